//! Object-aware square cropping.

use rand::RngCore;

use crate::data::{BBox, DataError, GrayImage, Sample};
use crate::rng::{uniform_usize};
use crate::scalar::Scalar;

/// Fraction of a box's original area that must survive clipping for the box
/// to be kept in the crop; small slivers would poison the region losses.
const KEEP_AREA_FRACTION: f64 = 0.25;

const MAX_ATTEMPTS: usize = 100;

/// Translate `b` into window coordinates, clip, and keep it only when at
/// least [`KEEP_AREA_FRACTION`] of its area survives.
fn clip_into(b: &BBox, window: &BBox) -> Option<BBox> {
    let inter = b.intersect(window)?;
    if (inter.area() as f64) < KEEP_AREA_FRACTION * b.area() as f64 {
        return None;
    }
    Some(BBox {
        x: inter.x - window.x,
        y: inter.y - window.y,
        w: inter.w,
        h: inter.h,
    })
}

fn crop_at<F: Scalar>(sample: &Sample<F>, x0: usize, y0: usize, size: usize) -> Option<Sample<F>> {
    let window = BBox {
        x: x0 as i64,
        y: y0 as i64,
        w: size as i64,
        h: size as i64,
    };
    let kept: Vec<BBox> = sample.boxes.iter().filter_map(|b| clip_into(b, &window)).collect();
    if kept.is_empty() {
        return None;
    }
    let view = sample
        .image
        .pixels()
        .slice(ndarray::s![y0..y0 + size, x0..x0 + size])
        .to_owned();
    let image = GrayImage::new(view, sample.image.range()).expect("crop of a valid image");
    Some(Sample {
        image,
        boxes: kept,
        domain: sample.domain,
        id: sample.id.clone(),
    })
}

/// Sample a `size`x`size` crop guaranteed to retain at least one annotated
/// object.
///
/// Rejection-samples window origins; after [`MAX_ATTEMPTS`] misses it falls
/// back to a crop centered on a uniformly chosen box, which always retains
/// that box, so the operation terminates.
pub fn crop_with_object<F: Scalar, R: RngCore>(
    sample: &Sample<F>,
    size: usize,
    rng: &mut R,
) -> Result<Sample<F>, DataError> {
    let (h, w) = sample.image.hw();
    if h < size || w < size {
        return Err(DataError::CropTooLarge { h, w, size });
    }
    if sample.boxes.is_empty() {
        return Err(DataError::NoBoxes);
    }
    for _ in 0..MAX_ATTEMPTS {
        let x0 = uniform_usize(rng, 0, w - size);
        let y0 = uniform_usize(rng, 0, h - size);
        if let Some(cropped) = crop_at(sample, x0, y0, size) {
            return Ok(cropped);
        }
    }
    // fallback: center on a box, clamped into bounds
    let b = sample.boxes[uniform_usize(rng, 0, sample.boxes.len() - 1)];
    let cx = b.x + b.w / 2;
    let cy = b.y + b.h / 2;
    let x0 = (cx - size as i64 / 2).clamp(0, (w - size) as i64) as usize;
    let y0 = (cy - size as i64 / 2).clamp(0, (h - size) as i64) as usize;
    crop_at(sample, x0, y0, size).ok_or(DataError::NoBoxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, ValueRange};
    use crate::rng::{stream, tags};
    use ndarray::Array2;

    fn sample_with_boxes(h: usize, w: usize, boxes: Vec<BBox>) -> Sample<f64> {
        let img = GrayImage::new(Array2::zeros((h, w)), ValueRange::Uint8).unwrap();
        Sample::new(img, boxes, Domain::Ir, "t").unwrap()
    }

    #[test]
    fn exact_fit_is_the_identity_crop() {
        let b = BBox::new(100, 100, 50, 50).unwrap();
        let s = sample_with_boxes(256, 256, vec![b]);
        let c = crop_with_object(&s, 256, &mut stream(1, &[tags::CROP])).unwrap();
        assert_eq!(c.image.hw(), (256, 256));
        assert_eq!(c.boxes, vec![b]);
    }

    #[test]
    fn crop_always_retains_a_box() {
        let b = BBox::new(10, 10, 40, 40).unwrap();
        let s = sample_with_boxes(512, 512, vec![b]);
        for trial in 0..1000u64 {
            let mut rng = stream(7, &[tags::CROP, trial]);
            let c = crop_with_object(&s, 256, &mut rng).unwrap();
            assert!(!c.boxes.is_empty(), "trial {trial} lost every box");
            for kb in &c.boxes {
                assert!(kb.fits_within(256, 256));
                assert!(kb.intersect(&BBox { x: 0, y: 0, w: 256, h: 256 }).is_some());
            }
        }
    }

    #[test]
    fn sliver_boxes_are_dropped() {
        // Window chosen so the second box keeps only 10% of its area; the
        // first box keeps everything and anchors the crop.
        let anchor = BBox::new(10, 10, 20, 20).unwrap();
        let sliver = BBox::new(60, 0, 20, 20).unwrap();
        let s = sample_with_boxes(128, 128, vec![anchor, sliver]);
        // crop window [0,64) x [0,64): sliver keeps 4 of 20 columns = 20% < 25%
        let c = crop_at(&s, 0, 0, 64).unwrap();
        assert_eq!(c.boxes.len(), 1);
        assert_eq!(c.boxes[0], anchor);
    }

    #[test]
    fn quarter_area_boundary_is_kept() {
        // exactly 25% of the box survives: 10 of 20 cols, 10 of 20 rows
        let b = BBox::new(54, 54, 20, 20).unwrap();
        let s = sample_with_boxes(128, 128, vec![b]);
        let c = crop_at(&s, 0, 0, 64).unwrap();
        assert_eq!(c.boxes.len(), 1);
        assert_eq!(c.boxes[0], BBox { x: 54, y: 54, w: 10, h: 10 });
    }

    #[test]
    fn errors_on_small_image_or_no_boxes() {
        let s = sample_with_boxes(100, 100, vec![BBox::new(0, 0, 5, 5).unwrap()]);
        assert!(matches!(
            crop_with_object(&s, 256, &mut stream(1, &[tags::CROP])),
            Err(DataError::CropTooLarge { .. })
        ));
        let s2 = sample_with_boxes(300, 300, vec![]);
        assert!(matches!(
            crop_with_object(&s2, 256, &mut stream(1, &[tags::CROP])),
            Err(DataError::NoBoxes)
        ));
    }

    #[test]
    fn boxes_are_translated_into_crop_coordinates() {
        let b = BBox::new(100, 120, 30, 30).unwrap();
        let s = sample_with_boxes(512, 512, vec![b]);
        let c = crop_at(&s, 90, 110, 64).unwrap();
        assert_eq!(c.boxes[0], BBox { x: 10, y: 10, w: 30, h: 30 });
    }
}
