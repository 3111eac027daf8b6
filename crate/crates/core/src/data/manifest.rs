//! PNG image IO and the JSON-lines dataset manifest.
//!
//! One JSON object per line: `{"id": ..., "file": ..., "domain": "IR"|"VI",
//! "boxes": [[x, y, w, h], ...]}`. Files are stored relative to the
//! manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BBox, DataError, Domain, GrayImage, Sample, ValueRange};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub domain: Domain,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self, DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(DataError::DuplicateId(e.id.clone()));
            }
        }
        Ok(DatasetManifest {
            root: root.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Write JSON lines next to the data; `path`'s parent becomes the root.
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut out = fs::File::create(path)?;
        for e in &self.entries {
            let line = serde_json::to_string(e)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Read JSON lines; verifies id uniqueness and that every referenced
    /// file exists.
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let file = fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|source| DataError::Manifest { line: i + 1, source })?;
            entries.push(entry);
        }
        let manifest = DatasetManifest::new(root, entries)?;
        for e in &manifest.entries {
            let p = manifest.root.join(&e.file);
            if !p.exists() {
                return Err(DataError::MissingFile(p));
            }
        }
        Ok(manifest)
    }

    /// Load the image for one entry and assemble the sample.
    pub fn load_sample<F: Scalar>(&self, index: usize) -> Result<Sample<F>, DataError> {
        let e = &self.entries[index];
        let image = load_png(&self.root.join(&e.file))?;
        Sample::new(image, e.boxes.clone(), e.domain, e.id.clone())
    }
}

/// Write an 8-bit grayscale PNG; requires the uint8 range tag.
pub fn save_png<F: Scalar>(img: &GrayImage<F>, path: &Path) -> Result<(), DataError> {
    img.require("save_png", ValueRange::Uint8)?;
    let (h, w) = img.hw();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (y, row) in img.pixels().outer_iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            buf.put_pixel(x as u32, y as u32, image::Luma([v.as_f64().round() as u8]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load an 8-bit grayscale PNG into a uint8-tagged image.
pub fn load_png<F: Scalar>(path: &Path) -> Result<GrayImage<F>, DataError> {
    let dynimg = image::open(path)?;
    let gray = match dynimg {
        image::DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    let (w, h) = gray.dimensions();
    let mut pixels = ndarray::Array2::<F>::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            pixels[[y as usize, x as usize]] = F::cast(gray.get_pixel(x, y).0[0] as f64);
        }
    }
    GrayImage::new(pixels, ValueRange::Uint8)
}
