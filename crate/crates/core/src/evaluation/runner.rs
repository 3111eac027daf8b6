//! Manifest-level evaluation: translate (optionally), detect, match, pool,
//! and write the report artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::data::{
    denormalize, histogram_equalize, normalize, DataError, DatasetManifest, GrayImage, Sample,
};
use crate::evaluation::{average_precision, match_detections, Detection, Detector};
use crate::generator::Generator;
use crate::scalar::Scalar;
use crate::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// equalize thermal inputs before translation (matches training)
    pub equalize_ir: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            equalize_ir: true,
        }
    }
}

/// Report plus where the artifacts were written.
#[derive(Debug)]
pub struct EvalOutcome {
    pub report: super::APReport,
    pub report_path: std::path::PathBuf,
    pub detections_path: std::path::PathBuf,
    pub pr_csv_path: std::path::PathBuf,
}

/// Run the detector over every manifest image — translated through the
/// generator when one is given, raw otherwise — then pool detections
/// across images and compute average precision against the manifest boxes.
///
/// Per-image translation or detection failures are recorded and skipped;
/// their ground truth stays in the denominator.
pub fn evaluate_manifest<F: Scalar>(
    generator: Option<&Generator<F>>,
    manifest: &DatasetManifest,
    detector: &dyn Detector<F>,
    cfg: &EvalConfig,
    out_dir: &Path,
    config_hash_input: &serde_json::Value,
) -> Result<EvalOutcome, EvalError> {
    fs::create_dir_all(out_dir)?;
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut all_detections: Vec<Detection> = Vec::new();
    // the manifest declares the ground truth; a skipped image's objects
    // stay in the recall denominator as misses
    let n_gt: usize = manifest.entries.iter().map(|e| e.boxes.len()).sum();
    let mut n_images = 0usize;
    let mut n_skipped = 0usize;

    for index in 0..manifest.len() {
        let sample: Sample<F> = match manifest.load_sample(index) {
            Ok(s) => s,
            Err(_) => {
                n_skipped += 1;
                continue;
            }
        };
        let image_for_detector: GrayImage<F> = match generator {
            None => sample.image.clone(),
            Some(g) => match translate_one(g, &sample.image, cfg.equalize_ir) {
                Ok(img) => img,
                Err(_) => {
                    n_skipped += 1;
                    continue;
                }
            },
        };
        n_images += 1;
        let dets = detector.detect(&image_for_detector, &sample.id);
        let assigned = match_detections(&dets, &sample.boxes, cfg.iou_threshold);
        for (d, a) in dets.iter().zip(assigned.iter()) {
            pooled.push((d.score, a.is_some()));
        }
        all_detections.extend(dets);
    }

    let mut report = average_precision(&pooled, n_gt);
    report.n_images = n_images;
    report.n_skipped = n_skipped;

    let detections_path = out_dir.join("detections.jsonl");
    let mut df = fs::File::create(&detections_path)?;
    for d in &all_detections {
        writeln!(df, "{}", serde_json::to_string(d)?)?;
    }

    let pr_csv_path = out_dir.join("pr_curve.csv");
    let mut pf = fs::File::create(&pr_csv_path)?;
    writeln!(pf, "threshold,precision,recall")?;
    for (t, p) in report
        .curve
        .thresholds
        .iter()
        .zip(report.curve.points.iter())
    {
        writeln!(pf, "{},{},{}", t, p.precision, p.recall)?;
    }

    let report_path = out_dir.join("report.json");
    let payload = serde_json::json!({
        "ap": report.ap,
        "n_images": report.n_images,
        "n_gt": report.n_gt,
        "n_detections": report.n_detections,
        "n_skipped": report.n_skipped,
        "config_hash": format!("{:016x}", fnv1a(config_hash_input.to_string().as_bytes())),
        "curve": report.curve,
    });
    fs::write(&report_path, serde_json::to_string_pretty(&payload)?)?;

    Ok(EvalOutcome {
        report,
        report_path,
        detections_path,
        pr_csv_path,
    })
}

/// Full-size single-image translation: equalize (optionally), normalize,
/// run the generator in eval mode, and return to 8-bit.
pub fn translate_one<F: Scalar>(
    g: &Generator<F>,
    image: &GrayImage<F>,
    equalize: bool,
) -> Result<GrayImage<F>, EvalError> {
    let pre = if equalize {
        histogram_equalize(image)?
    } else {
        image.clone()
    };
    let norm = normalize(&pre)?;
    let (h, w) = norm.hw();
    let mut batch = Array4::<F>::zeros((1, 1, h, w));
    batch
        .index_axis_mut(ndarray::Axis(0), 0)
        .index_axis_move(ndarray::Axis(0), 0)
        .assign(norm.pixels());
    let translated = g
        .translate(&batch)
        .map_err(|e| EvalError::Train(TrainError::Nn(e)))?;
    let plane = translated
        .index_axis(ndarray::Axis(0), 0)
        .index_axis_move(ndarray::Axis(0), 0)
        .to_owned();
    let out = GrayImage::new(plane, crate::data::ValueRange::Normalized)?;
    Ok(denormalize(&out)?)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
