//! Contrast-blob detector: the shipped stand-in for a learned detector.
//!
//! Thresholds local contrast against a box-blur background estimate, takes
//! 8-connected components, filters by area, and scores each surviving
//! component by its normalized mean contrast. Tuned for the visible domain
//! of the synthetic scenes (dark textured objects on a brighter
//! background), which is exactly why it returns nothing useful on raw
//! thermal images: their polarity is inverted.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, GrayImage, ValueRange};
use crate::evaluation::Detection;
use crate::scalar::Scalar;

/// Anything that proposes scored boxes on an image; plug a learned model
/// here to run the full protocol.
pub trait Detector<F: Scalar> {
    fn detect(&self, image: &GrayImage<F>, image_id: &str) -> Vec<Detection>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// objects darker than their surroundings (visible-domain tuning)
    #[default]
    Dark,
    /// objects brighter than their surroundings
    Bright,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobDetectorConfig {
    /// minimum contrast (in [0,1] intensity units) against the local
    /// background for a pixel to join a component
    pub contrast_threshold: f64,
    /// components below this pixel count are discarded
    pub min_area: usize,
    /// half-width of the box-blur background estimate
    pub background_radius: usize,
    /// mean contrast mapped to score 1.0
    pub score_scale: f64,
    pub polarity: Polarity,
}

impl Default for BlobDetectorConfig {
    fn default() -> Self {
        BlobDetectorConfig {
            contrast_threshold: 0.12,
            min_area: 25,
            background_radius: 16,
            score_scale: 0.5,
            polarity: Polarity::Dark,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlobDetector {
    pub config: BlobDetectorConfig,
}

impl BlobDetector {
    pub fn new(config: BlobDetectorConfig) -> Self {
        BlobDetector { config }
    }
}

/// Clamped-window box mean via an integral image.
fn local_mean(v: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = v.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        for x in 0..w {
            integral[[y + 1, x + 1]] =
                v[[y, x]] + integral[[y, x + 1]] + integral[[y + 1, x]] - integral[[y, x]];
        }
    }
    let r = radius as isize;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let y0 = (y as isize - r).max(0) as usize;
            let x0 = (x as isize - r).max(0) as usize;
            let y1 = (y as isize + r + 1).min(h as isize) as usize;
            let x1 = (x as isize + r + 1).min(w as isize) as usize;
            let sum = integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]]
                + integral[[y0, x0]];
            out[[y, x]] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

impl<F: Scalar> Detector<F> for BlobDetector {
    fn detect(&self, image: &GrayImage<F>, image_id: &str) -> Vec<Detection> {
        let cfg = &self.config;
        let (h, w) = image.hw();
        // unify to [0, 1]
        let unit: Array2<f64> = match image.range() {
            ValueRange::Uint8 => image.pixels().mapv(|v| v.as_f64() / 255.0),
            ValueRange::Normalized => image.pixels().mapv(|v| (v.as_f64() + 1.0) / 2.0),
        };
        let bg = local_mean(&unit, cfg.background_radius);
        let mut contrast = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let c = match cfg.polarity {
                    Polarity::Dark => bg[[y, x]] - unit[[y, x]],
                    Polarity::Bright => unit[[y, x]] - bg[[y, x]],
                };
                contrast[[y, x]] = c;
            }
        }

        // 8-connected components over the thresholded mask, row-major scan
        let mut label = vec![usize::MAX; h * w];
        let mut detections = Vec::new();
        let mut next = 0usize;
        let mut stack = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                let idx = sy * w + sx;
                if label[idx] != usize::MAX || contrast[[sy, sx]] < cfg.contrast_threshold {
                    continue;
                }
                let id = next;
                next += 1;
                label[idx] = id;
                stack.push((sy, sx));
                let (mut min_x, mut max_x, mut min_y, mut max_y) = (sx, sx, sy, sy);
                let mut area = 0usize;
                let mut contrast_sum = 0.0;
                while let Some((y, x)) = stack.pop() {
                    area += 1;
                    contrast_sum += contrast[[y, x]];
                    min_x = min_x.min(x);
                    max_x = max_x.max(x);
                    min_y = min_y.min(y);
                    max_y = max_y.max(y);
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let ny = y as i64 + dy;
                            let nx = x as i64 + dx;
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            let nidx = ny * w + nx;
                            if label[nidx] == usize::MAX
                                && contrast[[ny, nx]] >= cfg.contrast_threshold
                            {
                                label[nidx] = id;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
                if area < cfg.min_area {
                    continue;
                }
                let mean_contrast = contrast_sum / area as f64;
                let score = (mean_contrast / cfg.score_scale).clamp(0.0, 1.0);
                detections.push(Detection {
                    image_id: image_id.to_string(),
                    bbox: BBox {
                        x: min_x as i64,
                        y: min_y as i64,
                        w: (max_x - min_x + 1) as i64,
                        h: (max_y - min_y + 1) as i64,
                    },
                    score,
                });
            }
        }
        detections
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, Domain, SceneSpec};
    use crate::evaluation::{iou, match_detections};
    use crate::rng::{stream, tags};

    #[test]
    fn blank_image_yields_nothing() {
        let img =
            GrayImage::<f64>::new(Array2::from_elem((64, 64), 128.0), ValueRange::Uint8).unwrap();
        let dets = BlobDetector::default().detect(&img, "blank");
        assert!(dets.is_empty());
    }

    #[test]
    fn detector_is_deterministic() {
        let s: crate::data::Sample<f64> = synth_scene(
            &mut stream(55, &[tags::SCENE, 0]),
            Domain::Vi,
            &SceneSpec::default(),
            "d",
        )
        .unwrap();
        let d = BlobDetector::default();
        let a = d.detect(&s.image, "d");
        let b = d.detect(&s.image, "d");
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.score, y.score);
        }
    }

    #[test]
    fn finds_visible_domain_objects_with_good_overlap() {
        let spec = SceneSpec::default();
        let detector = BlobDetector::default();
        let mut found = 0usize;
        let mut total = 0usize;
        for seed in 0..100u64 {
            let s: crate::data::Sample<f64> = synth_scene(
                &mut stream(56, &[tags::SCENE, seed]),
                Domain::Vi,
                &spec,
                format!("v{seed}"),
            )
            .unwrap();
            let dets = detector.detect(&s.image, &s.id);
            let assigned = match_detections(&dets, &s.boxes, 0.5);
            let matched: std::collections::BTreeSet<usize> =
                assigned.into_iter().flatten().collect();
            found += matched.len();
            total += s.boxes.len();
        }
        let rate = found as f64 / total as f64;
        assert!(
            rate >= 0.95,
            "detection rate {rate} ({found}/{total}) below 95%"
        );
    }

    #[test]
    fn raw_thermal_images_fool_the_visible_tuned_detector() {
        let spec = SceneSpec::default();
        let detector = BlobDetector::default();
        let mut hits = 0usize;
        for seed in 0..50u64 {
            let s: crate::data::Sample<f64> = synth_scene(
                &mut stream(57, &[tags::SCENE, seed]),
                Domain::Ir,
                &spec,
                format!("i{seed}"),
            )
            .unwrap();
            for d in detector.detect(&s.image, &s.id) {
                if s.boxes.iter().any(|g| iou(&d.bbox, g) >= 0.5) {
                    hits += 1;
                }
            }
        }
        assert_eq!(hits, 0, "polarity-inverted blobs should not match");
    }
}
