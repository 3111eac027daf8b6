//! Region pooling: crop an annotated box and resample it to a fixed-size
//! patch, so the region losses see every object at the same scale.
//!
//! Two methods: `bilinear_resize` (the default; dense gradients) and
//! `max_bins` (per-bin maxima with sparse gradients; kept for fidelity
//! runs). Both
//! read only pixels inside the box, so patches are local by construction.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::nn::Batch;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum RoiError {
    #[error("pooled output size must be >= 2, got {0}")]
    OutSizeTooSmall(usize),
    #[error("box ({x},{y},{w},{h}) exceeds the {img_w}x{img_h} image")]
    BoxOutOfBounds {
        x: i64,
        y: i64,
        w: i64,
        h: i64,
        img_w: usize,
        img_h: usize,
    },
    #[error("region pooling expects single-channel batches, got {0} channels")]
    MultiChannel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoiMethod {
    MaxBins,
    #[default]
    BilinearResize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiPoolSpec {
    pub out_size: usize,
    pub method: RoiMethod,
}

impl Default for RoiPoolSpec {
    fn default() -> Self {
        RoiPoolSpec {
            out_size: 64,
            method: RoiMethod::BilinearResize,
        }
    }
}

impl RoiPoolSpec {
    pub fn validate(&self) -> Result<(), RoiError> {
        if self.out_size < 2 {
            return Err(RoiError::OutSizeTooSmall(self.out_size));
        }
        Ok(())
    }
}

fn check_box(b: &BBox, img_h: usize, img_w: usize) -> Result<(), RoiError> {
    if !b.fits_within(img_w, img_h) {
        return Err(RoiError::BoxOutOfBounds {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            img_w,
            img_h,
        });
    }
    Ok(())
}

/// Bilinear sample positions for one output index: source offsets within the
/// box and the interpolation fraction. Clamped to the box, so the edge rows
/// never read outside it.
#[inline]
fn bilinear_taps(i: usize, out: usize, extent: i64) -> (usize, usize, f64) {
    let scale = extent as f64 / out as f64;
    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(extent as usize - 1);
    (lo, hi, s - lo as f64)
}

/// Bin extent for one output index of max pooling; never empty.
#[inline]
fn bin_range(i: usize, out: usize, extent: i64) -> (usize, usize) {
    let lo = (i as i64 * extent / out as i64) as usize;
    let hi = (((i as i64 + 1) * extent) / out as i64).max(lo as i64 + 1) as usize;
    (lo, hi.min(extent as usize))
}

/// Pool each box of a single-channel plane to an `out_size`-square patch;
/// returns `(n_boxes, S, S)`. An empty box list yields an empty stack.
pub fn roi_pool<F: Scalar>(
    plane: &Array2<F>,
    boxes: &[BBox],
    spec: &RoiPoolSpec,
) -> Result<Array3<F>, RoiError> {
    spec.validate()?;
    let (img_h, img_w) = plane.dim();
    let s = spec.out_size;
    let mut out = Array3::<F>::zeros((boxes.len(), s, s));
    for (k, b) in boxes.iter().enumerate() {
        check_box(b, img_h, img_w)?;
        let mut patch = out.index_axis_mut(Axis(0), k);
        match spec.method {
            RoiMethod::BilinearResize => {
                for i in 0..s {
                    let (y0, y1, fy) = bilinear_taps(i, s, b.h);
                    for j in 0..s {
                        let (x0, x1, fx) = bilinear_taps(j, s, b.w);
                        let at = |yy: usize, xx: usize| {
                            plane[[b.y as usize + yy, b.x as usize + xx]].as_f64()
                        };
                        // lerp form: exact for constant planes and fx=fy=0
                        let (a, bv, c, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                        let v = a + fx * (bv - a) + fy * (c - a) + fx * fy * (a + d - bv - c);
                        patch[[i, j]] = F::cast(v);
                    }
                }
            }
            RoiMethod::MaxBins => {
                for i in 0..s {
                    let (ylo, yhi) = bin_range(i, s, b.h);
                    for j in 0..s {
                        let (xlo, xhi) = bin_range(j, s, b.w);
                        let mut best = F::neg_infinity();
                        for yy in ylo..yhi {
                            for xx in xlo..xhi {
                                let v = plane[[b.y as usize + yy, b.x as usize + xx]];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        patch[[i, j]] = best;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scatter patch gradients back onto the plane. Bilinear routes through its
/// interpolation weights; max bins route to the first-scan argmax.
pub fn roi_pool_backward<F: Scalar>(
    dpatches: &Array3<F>,
    plane: &Array2<F>,
    boxes: &[BBox],
    spec: &RoiPoolSpec,
) -> Array2<F> {
    let s = spec.out_size;
    let mut dplane = Array2::<F>::zeros(plane.dim());
    for (k, b) in boxes.iter().enumerate() {
        let dpatch = dpatches.index_axis(Axis(0), k);
        match spec.method {
            RoiMethod::BilinearResize => {
                for i in 0..s {
                    let (y0, y1, fy) = bilinear_taps(i, s, b.h);
                    for j in 0..s {
                        let (x0, x1, fx) = bilinear_taps(j, s, b.w);
                        let d = dpatch[[i, j]].as_f64();
                        let mut add = |yy: usize, xx: usize, w: f64| {
                            dplane[[b.y as usize + yy, b.x as usize + xx]] +=
                                F::cast(d * w);
                        };
                        add(y0, x0, (1.0 - fy) * (1.0 - fx));
                        add(y0, x1, (1.0 - fy) * fx);
                        add(y1, x0, fy * (1.0 - fx));
                        add(y1, x1, fy * fx);
                    }
                }
            }
            RoiMethod::MaxBins => {
                for i in 0..s {
                    let (ylo, yhi) = bin_range(i, s, b.h);
                    for j in 0..s {
                        let (xlo, xhi) = bin_range(j, s, b.w);
                        let mut best = F::neg_infinity();
                        let mut arg = (ylo, xlo);
                        for yy in ylo..yhi {
                            for xx in xlo..xhi {
                                let v = plane[[b.y as usize + yy, b.x as usize + xx]];
                                if v > best {
                                    best = v;
                                    arg = (yy, xx);
                                }
                            }
                        }
                        dplane[[b.y as usize + arg.0, b.x as usize + arg.1]] += dpatch[[i, j]];
                    }
                }
            }
        }
    }
    dplane
}

/// Pool every box of every batch element; returns the `(total, 1, S, S)`
/// patch batch plus the owning element index of each patch.
pub fn roi_pool_batch<F: Scalar>(
    batch: &Batch<F>,
    boxes_per: &[Vec<BBox>],
    spec: &RoiPoolSpec,
) -> Result<(Batch<F>, Vec<usize>), RoiError> {
    let (n, c, h, w) = batch.dim();
    if c != 1 {
        return Err(RoiError::MultiChannel(c));
    }
    assert_eq!(n, boxes_per.len(), "one box list per batch element");
    let s = spec.out_size;
    let total: usize = boxes_per.iter().map(Vec::len).sum();
    let mut patches = Batch::<F>::zeros((total, 1, s, s));
    let mut owners = Vec::with_capacity(total);
    let mut cursor = 0;
    for (e, boxes) in boxes_per.iter().enumerate() {
        let plane = batch
            .index_axis(Axis(0), e)
            .index_axis_move(Axis(0), 0)
            .to_owned();
        let pooled = roi_pool(&plane, boxes, spec)?;
        for k in 0..boxes.len() {
            patches
                .index_axis_mut(Axis(0), cursor)
                .index_axis_move(Axis(0), 0)
                .assign(&pooled.index_axis(Axis(0), k));
            owners.push(e);
            cursor += 1;
        }
    }
    let _ = (h, w);
    Ok((patches, owners))
}

/// Adjoint of [`roi_pool_batch`].
pub fn roi_pool_batch_backward<F: Scalar>(
    dpatches: &Batch<F>,
    batch: &Batch<F>,
    boxes_per: &[Vec<BBox>],
    spec: &RoiPoolSpec,
) -> Batch<F> {
    let (n, _, _, _) = batch.dim();
    let mut dbatch = Batch::<F>::zeros(batch.dim());
    let mut cursor = 0;
    for e in 0..n {
        let boxes = &boxes_per[e];
        if boxes.is_empty() {
            continue;
        }
        let plane = batch
            .index_axis(Axis(0), e)
            .index_axis_move(Axis(0), 0)
            .to_owned();
        let k = boxes.len();
        let mut dp = Array3::<F>::zeros((k, spec.out_size, spec.out_size));
        for i in 0..k {
            dp.index_axis_mut(Axis(0), i).assign(
                &dpatches
                    .index_axis(Axis(0), cursor + i)
                    .index_axis_move(Axis(0), 0),
            );
        }
        let dplane = roi_pool_backward(&dp, &plane, boxes, spec);
        dbatch
            .index_axis_mut(Axis(0), e)
            .index_axis_move(Axis(0), 0)
            .scaled_add(F::one(), &dplane);
        cursor += k;
    }
    dbatch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};

    fn randn2(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[94]);
        let mut a = Array2::<f64>::zeros(shape);
        a.mapv_inplace(|_| standard_normal(&mut rng) * 0.3);
        a
    }

    fn bb(x: i64, y: i64, w: i64, h: i64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn exact_size_box_is_plain_crop() {
        let plane = randn2((100, 100), 1);
        let spec = RoiPoolSpec {
            out_size: 64,
            method: RoiMethod::BilinearResize,
        };
        let b = bb(12, 20, 64, 64);
        let patches = roi_pool(&plane, &[b], &spec).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(patches[[0, i, j]], plane[[20 + i, 12 + j]]);
            }
        }
    }

    #[test]
    fn max_bins_matches_brute_force_bins() {
        let plane = randn2((160, 160), 2);
        let spec = RoiPoolSpec {
            out_size: 64,
            method: RoiMethod::MaxBins,
        };
        let b = bb(10, 20, 128, 128);
        let patches = roi_pool(&plane, &[b], &spec).unwrap();
        // 128 -> 64 means every bin is exactly 2x2
        for i in 0..64 {
            for j in 0..64 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(plane[[20 + 2 * i + dy, 10 + 2 * j + dx]]);
                    }
                }
                assert_eq!(patches[[0, i, j]], m);
            }
        }
    }

    #[test]
    fn constant_image_pools_to_constant_patch() {
        let plane = Array2::<f64>::from_elem((80, 80), 0.37);
        for method in [RoiMethod::BilinearResize, RoiMethod::MaxBins] {
            let spec = RoiPoolSpec {
                out_size: 64,
                method,
            };
            let patches = roi_pool(&plane, &[bb(5, 9, 17, 33)], &spec).unwrap();
            for &v in patches.iter() {
                assert_eq!(v, 0.37);
            }
        }
    }

    #[test]
    fn empty_box_list_is_an_empty_stack() {
        let plane = randn2((32, 32), 3);
        let patches = roi_pool(&plane, &[], &RoiPoolSpec::default()).unwrap();
        assert_eq!(patches.dim(), (0, 64, 64));
    }

    #[test]
    fn out_of_bounds_box_is_an_error() {
        let plane = randn2((32, 32), 4);
        assert!(matches!(
            roi_pool(&plane, &[bb(20, 0, 16, 8)], &RoiPoolSpec::default()),
            Err(RoiError::BoxOutOfBounds { .. })
        ));
    }

    #[test]
    fn locality_pixels_outside_the_box_do_not_matter() {
        let mut plane = randn2((64, 64), 5);
        let b = bb(10, 14, 21, 13);
        for method in [RoiMethod::BilinearResize, RoiMethod::MaxBins] {
            let spec = RoiPoolSpec {
                out_size: 16,
                method,
            };
            let before = roi_pool(&plane, &[b], &spec).unwrap();
            // perturb every pixel outside the box
            let saved = plane.clone();
            for y in 0..64 {
                for x in 0..64 {
                    let inside = (y as i64) >= b.y
                        && (y as i64) < b.bottom()
                        && (x as i64) >= b.x
                        && (x as i64) < b.right();
                    if !inside {
                        plane[[y, x]] += 10.0;
                    }
                }
            }
            let after = roi_pool(&plane, &[b], &spec).unwrap();
            assert_eq!(before, after, "{method:?} leaked out-of-box pixels");
            plane = saved;
        }
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let mut plane = randn2((40, 40), 6);
        let b = bb(3, 5, 19, 27);
        let spec = RoiPoolSpec {
            out_size: 8,
            method: RoiMethod::BilinearResize,
        };
        let dpatch = {
            let mut rng = stream(7, &[93]);
            let mut a = Array3::<f64>::zeros((1, 8, 8));
            a.mapv_inplace(|_| standard_normal(&mut rng));
            a
        };
        let dplane = roi_pool_backward(&dpatch, &plane, &[b], &spec);
        let loss = |p: &Array2<f64>| (&roi_pool(p, &[b], &spec).unwrap() * &dpatch).sum();
        let h = 1e-6;
        for idx in [[6usize, 4usize], [10, 12], [31, 21], [5, 3]] {
            let orig = plane[idx];
            plane[idx] = orig + h;
            let up = loss(&plane);
            plane[idx] = orig - h;
            let dn = loss(&plane);
            plane[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            let a = dplane[idx];
            assert!(
                (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-8),
                "fd={fd} analytic={a}"
            );
        }
    }

    /// Independent oracle: direct crop + textbook bilinear resample written
    /// from the interpolation formula, no shared helpers.
    fn oracle_bilinear(plane: &Array2<f64>, b: &BBox, s: usize) -> Array2<f64> {
        let crop: Vec<Vec<f64>> = (0..b.h)
            .map(|i| {
                (0..b.w)
                    .map(|j| plane[[(b.y + i) as usize, (b.x + j) as usize]])
                    .collect()
            })
            .collect();
        let mut out = Array2::<f64>::zeros((s, s));
        for i in 0..s {
            for j in 0..s {
                let sy = ((i as f64 + 0.5) * (b.h as f64 / s as f64) - 0.5)
                    .clamp(0.0, b.h as f64 - 1.0);
                let sx = ((j as f64 + 0.5) * (b.w as f64 / s as f64) - 0.5)
                    .clamp(0.0, b.w as f64 - 1.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let y1 = (y0 + 1).min(b.h as usize - 1);
                let x1 = (x0 + 1).min(b.w as usize - 1);
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                out[[i, j]] = crop[y0][x0] * (1.0 - fy) * (1.0 - fx)
                    + crop[y0][x1] * (1.0 - fy) * fx
                    + crop[y1][x0] * fy * (1.0 - fx)
                    + crop[y1][x1] * fy * fx;
            }
        }
        out
    }

    #[test]
    fn matches_crop_resample_oracle_on_random_cases() {
        let mut rng = stream(8, &[92]);
        let spec = RoiPoolSpec {
            out_size: 64,
            method: RoiMethod::BilinearResize,
        };
        for case in 0..100 {
            let plane = randn2((96, 96), 1000 + case);
            let w = crate::rng::uniform_usize(&mut rng, 3, 80) as i64;
            let h = crate::rng::uniform_usize(&mut rng, 3, 80) as i64;
            let x = crate::rng::uniform_usize(&mut rng, 0, (96 - w) as usize) as i64;
            let y = crate::rng::uniform_usize(&mut rng, 0, (96 - h) as usize) as i64;
            let b = bb(x, y, w, h);
            let got = roi_pool(&plane, &[b], &spec).unwrap();
            let want = oracle_bilinear(&plane, &b, 64);
            let mut worst = 0.0f64;
            for i in 0..64 {
                for j in 0..64 {
                    worst = worst.max((got[[0, i, j]] - want[[i, j]]).abs());
                }
            }
            assert!(worst <= 1e-6, "case {case}: max abs diff {worst}");
        }
    }

    #[test]
    fn one_box_per_element_gives_matching_batch_sizes() {
        let batch = Batch::<f64>::from_elem((3, 1, 32, 32), 0.1);
        let boxes = vec![
            vec![bb(0, 0, 8, 8)],
            vec![bb(4, 4, 10, 10)],
            vec![bb(9, 9, 12, 6)],
        ];
        let (patches, owners) = roi_pool_batch(&batch, &boxes, &RoiPoolSpec::default()).unwrap();
        assert_eq!(patches.dim().0, batch.dim().0);
        assert_eq!(owners, vec![0, 1, 2]);
    }

    #[test]
    fn batch_pooling_tracks_owners() {
        let mut batch = Batch::<f64>::zeros((2, 1, 32, 32));
        batch.fill(0.5);
        let boxes = vec![vec![bb(0, 0, 8, 8), bb(10, 10, 8, 8)], vec![bb(4, 4, 16, 16)]];
        let spec = RoiPoolSpec {
            out_size: 16,
            method: RoiMethod::BilinearResize,
        };
        let (patches, owners) = roi_pool_batch(&batch, &boxes, &spec).unwrap();
        assert_eq!(patches.dim(), (3, 1, 16, 16));
        assert_eq!(owners, vec![0, 0, 1]);
    }
}
