//! Synthetic two-domain scenes with ground-truth boxes.
//!
//! The thermal domain renders over-bright, low-texture blobs on a dark noisy
//! background; the visible domain renders dark, textured, sharp-edged
//! objects on a brighter textured background. The intensity polarity of the
//! object/background relationship is opposite between the domains, which is
//! what makes a detector tuned on one domain fail on raw images from the
//! other.

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, DataError, Domain, GrayImage, Sample, ValueRange};
use crate::rng::{standard_normal, uniform, uniform_usize};
use crate::scalar::Scalar;

/// Geometry of generated scenes; appearance constants live with the
/// renderers below.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_min_size: usize,
    pub object_max_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            objects_min: 1,
            objects_max: 3,
            object_min_size: 12,
            object_max_size: 22,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.width < 8 || self.height < 8 {
            return Err(DataError::SceneSpec(format!(
                "scene {}x{} too small",
                self.width, self.height
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(DataError::SceneSpec(
                "objects_min exceeds objects_max".into(),
            ));
        }
        if self.object_min_size < 3 || self.object_min_size > self.object_max_size {
            return Err(DataError::SceneSpec("bad object size range".into()));
        }
        if self.object_max_size + 2 > self.width.min(self.height) {
            return Err(DataError::SceneSpec(
                "objects do not fit inside the scene".into(),
            ));
        }
        Ok(())
    }
}

// thermal domain appearance
const IR_BG_BASE: f64 = 0.06;
const IR_BG_JITTER: f64 = 0.04;
const IR_BG_NOISE: f64 = 0.035;
const IR_OBJ_BASE: f64 = 0.86;
const IR_OBJ_JITTER: f64 = 0.06;
const IR_OBJ_NOISE: f64 = 0.015;

// visible domain appearance
const VI_BG_BASE: f64 = 0.58;
const VI_BG_JITTER: f64 = 0.05;
const VI_BG_TEXTURE: f64 = 0.035;
const VI_BG_NOISE: f64 = 0.012;
const VI_OBJ_BASE: f64 = 0.20;
const VI_OBJ_JITTER: f64 = 0.06;
const VI_OBJ_TEXTURE: f64 = 0.05;
const VI_OBJ_NOISE: f64 = 0.02;

const PLACEMENT_MARGIN: i64 = 4;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

struct Object {
    bbox: BBox,
    shape: Shape,
}

impl Object {
    fn contains(&self, x: i64, y: i64) -> bool {
        let b = &self.bbox;
        if x < b.x || y < b.y || x >= b.right() || y >= b.bottom() {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let cx = b.x as f64 + b.w as f64 / 2.0;
                let cy = b.y as f64 + b.h as f64 / 2.0;
                let rx = b.w as f64 / 2.0;
                let ry = b.h as f64 / 2.0;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn expanded(b: &BBox, m: i64) -> BBox {
    BBox {
        x: b.x - m,
        y: b.y - m,
        w: b.w + 2 * m,
        h: b.h + 2 * m,
    }
}

fn place_objects<R: RngCore>(rng: &mut R, spec: &SceneSpec) -> Result<Vec<Object>, DataError> {
    let wanted = uniform_usize(rng, spec.objects_min, spec.objects_max);
    for _round in 0..20 {
        let mut objects: Vec<Object> = Vec::with_capacity(wanted);
        'next_obj: for _ in 0..wanted {
            for _try in 0..60 {
                let w = uniform_usize(rng, spec.object_min_size, spec.object_max_size) as i64;
                let h = uniform_usize(rng, spec.object_min_size, spec.object_max_size) as i64;
                let x = uniform_usize(rng, 1, spec.width - w as usize - 1) as i64;
                let y = uniform_usize(rng, 1, spec.height - h as usize - 1) as i64;
                let bbox = BBox { x, y, w, h };
                let grown = expanded(&bbox, PLACEMENT_MARGIN);
                if objects.iter().all(|o| o.bbox.intersect(&grown).is_none()) {
                    let shape = if uniform(rng) < 0.5 {
                        Shape::Rect
                    } else {
                        Shape::Ellipse
                    };
                    objects.push(Object { bbox, shape });
                    continue 'next_obj;
                }
            }
            break; // couldn't place this one; retry the whole scene
        }
        if objects.len() == wanted {
            return Ok(objects);
        }
    }
    Err(DataError::ScenePlacement {
        wanted,
        w: spec.width,
        h: spec.height,
    })
}

struct Texture {
    amp1: f64,
    fx1: f64,
    fy1: f64,
    ph1: f64,
    amp2: f64,
    fx2: f64,
    fy2: f64,
    ph2: f64,
}

impl Texture {
    fn sample<R: RngCore>(rng: &mut R, amp: f64, max_freq: f64) -> Self {
        let tau = std::f64::consts::TAU;
        Texture {
            amp1: amp,
            fx1: uniform(rng) * max_freq,
            fy1: uniform(rng) * max_freq,
            ph1: uniform(rng) * tau,
            amp2: amp * 0.6,
            fx2: uniform(rng) * max_freq * 2.0,
            fy2: uniform(rng) * max_freq * 2.0,
            ph2: uniform(rng) * tau,
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let tau = std::f64::consts::TAU;
        self.amp1 * (tau * (self.fx1 * x as f64 + self.fy1 * y as f64) + self.ph1).sin()
            + self.amp2 * (tau * (self.fx2 * x as f64 + self.fy2 * y as f64) + self.ph2).sin()
    }
}

/// Deterministically render one scene for the given domain.
///
/// All stochastic choices are drawn from `rng` in a fixed order, so a fixed
/// stream yields a byte-identical sample.
pub fn synth_scene<F: Scalar, R: RngCore>(
    rng: &mut R,
    domain: Domain,
    spec: &SceneSpec,
    id: impl Into<String>,
) -> Result<Sample<F>, DataError> {
    spec.validate()?;
    let objects = place_objects(rng, spec)?;
    let (h, w) = (spec.height, spec.width);
    let mut img = Array2::<f64>::zeros((h, w));

    match domain {
        Domain::Ir => {
            let bg = IR_BG_BASE + IR_BG_JITTER * uniform(rng);
            let levels: Vec<f64> = objects
                .iter()
                .map(|_| IR_OBJ_BASE + IR_OBJ_JITTER * uniform(rng))
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let owner = objects
                        .iter()
                        .position(|o| o.contains(x as i64, y as i64));
                    let v = match owner {
                        Some(k) => levels[k] + IR_OBJ_NOISE * standard_normal(rng),
                        None => bg + IR_BG_NOISE * standard_normal(rng),
                    };
                    img[[y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
        Domain::Vi => {
            let bg = VI_BG_BASE + VI_BG_JITTER * uniform(rng);
            let bg_tex = Texture::sample(rng, VI_BG_TEXTURE, 0.04);
            let obj_params: Vec<(f64, Texture)> = objects
                .iter()
                .map(|_| {
                    let level = VI_OBJ_BASE + VI_OBJ_JITTER * uniform(rng);
                    let tex = Texture::sample(rng, VI_OBJ_TEXTURE, 0.15);
                    (level, tex)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let owner = objects
                        .iter()
                        .position(|o| o.contains(x as i64, y as i64));
                    let v = match owner {
                        Some(k) => {
                            let (level, tex) = &obj_params[k];
                            level + tex.at(x, y) + VI_OBJ_NOISE * standard_normal(rng)
                        }
                        None => bg + bg_tex.at(x, y) + VI_BG_NOISE * standard_normal(rng),
                    };
                    img[[y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    let quantized = img.mapv(|v| F::cast((v * 255.0).round()));
    let image = GrayImage::new(quantized, ValueRange::Uint8)?;
    let boxes = objects.iter().map(|o| o.bbox).collect();
    Sample::new(image, boxes, domain, id)
}
