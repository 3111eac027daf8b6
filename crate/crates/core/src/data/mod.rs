//! Sample carriers and dataset plumbing: grayscale images with a declared
//! value range, axis-aligned boxes, domain-tagged samples, JSON-lines
//! manifests, preprocessing, object-aware cropping and the synthetic scene
//! generator.

mod crop;
mod manifest;
mod preprocess;
mod synth;

pub use crop::crop_with_object;
pub use manifest::{load_png, save_png, DatasetManifest, ManifestEntry};
pub use preprocess::{denormalize, histogram_equalize, normalize};
pub use synth::{synth_scene, SceneSpec};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{op} requires a {expected:?}-range image, got {got:?}")]
    WrongRange {
        op: &'static str,
        expected: ValueRange,
        got: ValueRange,
    },
    #[error("image must be at least 1x1")]
    EmptyImage,
    #[error("pixel value {value} outside the declared {range:?} range")]
    PixelOutOfRange { value: f64, range: ValueRange },
    #[error("box must have positive size, got {w}x{h}")]
    DegenerateBox { w: i64, h: i64 },
    #[error("box ({x},{y},{w},{h}) does not fit a {img_w}x{img_h} image")]
    BoxOutsideImage {
        x: i64,
        y: i64,
        w: i64,
        h: i64,
        img_w: usize,
        img_h: usize,
    },
    #[error("image {h}x{w} smaller than requested {size}x{size} crop")]
    CropTooLarge { h: usize, w: usize, size: usize },
    #[error("sample has no boxes")]
    NoBoxes,
    #[error("invalid scene spec: {0}")]
    SceneSpec(String),
    #[error("could not place {wanted} non-overlapping objects in a {w}x{h} scene")]
    ScenePlacement { wanted: usize, w: usize, h: usize },
    #[error("duplicate sample id {0:?} in manifest")]
    DuplicateId(String),
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("image file is not 8-bit grayscale: {0}")]
    NotGray8(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {source}")]
    Manifest {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Declared pixel value range of a [`GrayImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Integer intensity levels in `[0, 255]`.
    Uint8,
    /// Real values in `[-1, 1]`, the network side of the pipeline.
    Normalized,
}

/// Single-channel image with a declared value range.
///
/// The range tag is part of every operation contract: preprocessing ops
/// check it and refuse mismatched inputs instead of silently rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<F: Scalar> {
    pixels: Array2<F>,
    range: ValueRange,
}

impl<F: Scalar> GrayImage<F> {
    pub fn new(pixels: Array2<F>, range: ValueRange) -> Result<Self, DataError> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(DataError::EmptyImage);
        }
        let (lo, hi) = match range {
            ValueRange::Uint8 => (0.0, 255.0),
            ValueRange::Normalized => (-1.0, 1.0),
        };
        for &v in pixels.iter() {
            let v = v.as_f64();
            if !v.is_finite() || v < lo || v > hi {
                return Err(DataError::PixelOutOfRange { value: v, range });
            }
        }
        Ok(GrayImage { pixels, range })
    }

    /// Dimensions as `(height, width)`.
    pub fn hw(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn pixels(&self) -> &Array2<F> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<F> {
        self.pixels
    }

    pub(crate) fn require(&self, op: &'static str, range: ValueRange) -> Result<(), DataError> {
        if self.range != range {
            return Err(DataError::WrongRange {
                op,
                expected: range,
                got: self.range,
            });
        }
        Ok(())
    }
}

/// Axis-aligned pixel box: `x, y` top-left corner, `w, h` extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "[i64; 4]", try_from = "[i64; 4]")]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Result<Self, DataError> {
        if w < 1 || h < 1 {
            return Err(DataError::DegenerateBox { w, h });
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    /// Intersection box, `None` when disjoint.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 > x0 && y1 > y0 {
            Some(BBox {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
            })
        } else {
            None
        }
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.x >= 0 && self.y >= 0 && self.right() <= width as i64 && self.bottom() <= height as i64
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = String;

    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
    }
}

/// The two unpaired image domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "VI")]
    Vi,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Ir => write!(f, "IR"),
            Domain::Vi => write!(f, "VI"),
        }
    }
}

/// An image with its ground-truth boxes and domain tag.
#[derive(Debug, Clone)]
pub struct Sample<F: Scalar> {
    pub image: GrayImage<F>,
    pub boxes: Vec<BBox>,
    pub domain: Domain,
    pub id: String,
}

impl<F: Scalar> Sample<F> {
    pub fn new(
        image: GrayImage<F>,
        boxes: Vec<BBox>,
        domain: Domain,
        id: impl Into<String>,
    ) -> Result<Self, DataError> {
        let (h, w) = image.hw();
        for b in &boxes {
            if !b.fits_within(w, h) {
                return Err(DataError::BoxOutsideImage {
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    img_w: w,
                    img_h: h,
                });
            }
        }
        Ok(Sample {
            image,
            boxes,
            domain,
            id: id.into(),
        })
    }
}
