//! Intensity preprocessing: histogram equalization on the 8-bit side and the
//! affine map onto the network's `[-1, 1]` range.

use ndarray::Array2;

use crate::data::{DataError, GrayImage, ValueRange};
use crate::scalar::Scalar;

const LEVELS: usize = 256;

/// CDF-remap histogram equalization over 256 bins.
///
/// A constant image is a 0/0 degenerate of the remap formula and is passed
/// through unchanged. The mapping is monotone non-decreasing in intensity.
pub fn histogram_equalize<F: Scalar>(img: &GrayImage<F>) -> Result<GrayImage<F>, DataError> {
    img.require("histogram_equalize", ValueRange::Uint8)?;
    let mut hist = [0u64; LEVELS];
    for &v in img.pixels().iter() {
        let level = (v.as_f64().round() as usize).min(LEVELS - 1);
        hist[level] += 1;
    }
    let total: u64 = hist.iter().sum();
    let mut cdf = [0u64; LEVELS];
    let mut acc = 0u64;
    for (level, &count) in hist.iter().enumerate() {
        acc += count;
        cdf[level] = acc;
    }
    let cdf_min = *cdf
        .iter()
        .find(|&&c| c > 0)
        .expect("image has at least one pixel");
    if cdf_min == total {
        // constant image: identity by decision
        return Ok(img.clone());
    }
    let denom = (total - cdf_min) as f64;
    let mut lut = [0.0f64; LEVELS];
    for level in 0..LEVELS {
        lut[level] = ((cdf[level].saturating_sub(cdf_min)) as f64 / denom * 255.0).round();
    }
    let remapped = img.pixels().mapv(|v| {
        let level = (v.as_f64().round() as usize).min(LEVELS - 1);
        F::cast(lut[level])
    });
    GrayImage::new(remapped, ValueRange::Uint8)
}

/// `[0, 255] -> [-1, 1]` via `v / 127.5 - 1`, the range the generators
/// produce through their final tanh.
pub fn normalize<F: Scalar>(img: &GrayImage<F>) -> Result<GrayImage<F>, DataError> {
    img.require("normalize", ValueRange::Uint8)?;
    let pixels = img
        .pixels()
        .mapv(|v| F::cast(v.as_f64() / 127.5 - 1.0));
    GrayImage::new(pixels, ValueRange::Normalized)
}

/// Inverse of [`normalize`], rounding back onto the integer grid.
pub fn denormalize<F: Scalar>(img: &GrayImage<F>) -> Result<GrayImage<F>, DataError> {
    img.require("denormalize", ValueRange::Normalized)?;
    let pixels: Array2<F> = img.pixels().mapv(|v| {
        let raw = ((v.as_f64() + 1.0) * 127.5).round();
        F::cast(raw.clamp(0.0, 255.0))
    });
    GrayImage::new(pixels, ValueRange::Uint8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform_usize};
    use ndarray::array;

    fn gray(p: Array2<f64>) -> GrayImage<f64> {
        GrayImage::new(p, ValueRange::Uint8).unwrap()
    }

    #[test]
    fn constant_image_passes_through() {
        let img = gray(Array2::from_elem((4, 4), 77.0));
        let eq = histogram_equalize(&img).unwrap();
        assert_eq!(eq.pixels(), img.pixels());
    }

    #[test]
    fn full_range_uniform_histogram_is_a_fixed_point() {
        // one pixel per level: cdf(v) = v + 1, remap collapses to identity
        let vals: Vec<f64> = (0..256).map(|v| v as f64).collect();
        let img = gray(Array2::from_shape_vec((16, 16), vals).unwrap());
        let eq = histogram_equalize(&img).unwrap();
        assert_eq!(eq.pixels(), img.pixels());
    }

    #[test]
    fn four_level_case_matches_hand_cdf() {
        // Hand evaluation of (cdf - cdf_min) / (N - cdf_min) * 255 with one
        // pixel at each of {0, 85, 170, 255}: cdf = {1,2,3,4}, cdf_min = 1,
        // outputs (0/3, 1/3, 2/3, 3/3) * 255 = {0, 85, 170, 255}.
        let img = gray(array![[0.0, 85.0], [170.0, 255.0]]);
        let eq = histogram_equalize(&img).unwrap();
        assert_eq!(
            eq.pixels().iter().copied().collect::<Vec<_>>(),
            vec![0.0, 85.0, 170.0, 255.0]
        );
    }

    #[test]
    fn equalize_requires_uint8() {
        let img = GrayImage::<f64>::new(array![[0.0, 0.5]], ValueRange::Normalized).unwrap();
        assert!(matches!(
            histogram_equalize(&img),
            Err(DataError::WrongRange { .. })
        ));
    }

    #[test]
    fn equalize_is_monotone_and_nearly_idempotent() {
        let mut rng = stream(21, &[1]);
        let vals: Vec<f64> = (0..64 * 64)
            .map(|_| uniform_usize(&mut rng, 10, 90) as f64)
            .collect();
        let img = gray(Array2::from_shape_vec((64, 64), vals).unwrap());
        let once = histogram_equalize(&img).unwrap();
        // monotone: sorting pairs by input level must leave outputs sorted
        let mut pairs: Vec<(f64, f64)> = img
            .pixels()
            .iter()
            .zip(once.pixels().iter())
            .map(|(&a, &b)| (a, b))
            .collect();
        pairs.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1, "monotonicity violated");
        }
        let twice = histogram_equalize(&once).unwrap();
        for (a, b) in once.pixels().iter().zip(twice.pixels().iter()) {
            assert!((a - b).abs() <= 1.0, "idempotency drift {a} -> {b}");
        }
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let img = gray(array![[0.0, 255.0], [128.0, 64.0]]);
        let n = normalize(&img).unwrap();
        assert_eq!(n.range(), ValueRange::Normalized);
        assert_eq!(n.pixels()[[0, 0]], -1.0);
        assert_eq!(n.pixels()[[0, 1]], 1.0);
        let mid = n.pixels()[[1, 0]];
        assert!((mid - (128.0 / 127.5 - 1.0)).abs() < 1e-12);
        assert!((mid - 0.00392156862745098).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_wrong_tag() {
        let img = GrayImage::<f64>::new(array![[0.0]], ValueRange::Normalized).unwrap();
        assert!(matches!(normalize(&img), Err(DataError::WrongRange { .. })));
    }

    proptest::proptest! {
        /// normalize then denormalize restores any 8-bit image exactly
        #[test]
        fn normalize_round_trip_is_exact(levels in proptest::collection::vec(0u8..=255, 16)) {
            let vals: Vec<f64> = levels.iter().map(|&v| v as f64).collect();
            let img = gray(Array2::from_shape_vec((4, 4), vals).unwrap());
            let back = denormalize(&normalize(&img).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.pixels(), img.pixels());
        }

        /// equalizing twice never moves a pixel by more than one level
        #[test]
        fn equalize_is_idempotent_up_to_rounding(
            levels in proptest::collection::vec(0u8..=255, 64)
        ) {
            let vals: Vec<f64> = levels.iter().map(|&v| v as f64).collect();
            let img = gray(Array2::from_shape_vec((8, 8), vals).unwrap());
            let once = histogram_equalize(&img).unwrap();
            let twice = histogram_equalize(&once).unwrap();
            for (a, b) in once.pixels().iter().zip(twice.pixels().iter()) {
                proptest::prop_assert!((a - b).abs() <= 1.0, "{} -> {}", a, b);
            }
        }
    }

    #[test]
    fn denormalize_round_trip_within_one_level() {
        let vals: Vec<f64> = (0..=255).map(|v| v as f64).collect();
        let img = gray(Array2::from_shape_vec((16, 16), vals).unwrap());
        let back = denormalize(&normalize(&img).unwrap()).unwrap();
        assert_eq!(back.pixels(), img.pixels());
        // and the other composition stays within 1/255
        let grid = GrayImage::<f64>::new(
            Array2::from_shape_vec((1, 5), vec![-1.0, -0.25, 0.0, 0.5, 1.0]).unwrap(),
            ValueRange::Normalized,
        )
        .unwrap();
        let again = normalize(&denormalize(&grid).unwrap()).unwrap();
        for (a, b) in grid.pixels().iter().zip(again.pixels().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }
}
