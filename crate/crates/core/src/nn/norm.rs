//! Batch and instance normalization with affine parameters.
//!
//! Batch mode normalizes per channel over `(N, H, W)` and keeps running
//! statistics for eval; instance mode normalizes per `(N, C)` plane over
//! `(H, W)` in both modes, so batch-size-2 statistics never leak across
//! samples.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone)]
pub struct Norm2d<F: Scalar> {
    pub kind: NormKind,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

#[derive(Debug)]
pub enum NormCache<F: Scalar> {
    /// Train-mode batch statistics: normalized input and per-channel 1/std.
    Batch { xhat: Array4<F>, inv: Array1<F> },
    /// Per-(n, c) statistics.
    Instance { xhat: Array4<F>, inv: Array2<F> },
    /// Eval-mode batch norm: the effective per-channel scale gamma/std.
    Frozen,
}

impl<F: Scalar> Norm2d<F> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Norm2d {
            kind,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, NormCache<F>) {
        match self.kind {
            NormKind::Batch => {
                let (y, xhat, inv, mean, var_unbiased) = batch_norm_train(x, &self.gamma, &self.beta);
                let m = F::cast(RUNNING_MOMENTUM);
                let one_m = F::cast(1.0 - RUNNING_MOMENTUM);
                for c in 0..self.running_mean.len() {
                    self.running_mean[c] = one_m * self.running_mean[c] + m * mean[c];
                    self.running_var[c] = one_m * self.running_var[c] + m * var_unbiased[c];
                }
                (y, NormCache::Batch { xhat, inv })
            }
            NormKind::Instance => {
                let (y, xhat, inv) = instance_norm(x, &self.gamma, &self.beta);
                (y, NormCache::Instance { xhat, inv })
            }
        }
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        match self.kind {
            NormKind::Batch => {
                let eps = F::cast(NORM_EPS);
                let mut y = x.clone();
                for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
                    let inv = F::one() / (self.running_var[c] + eps).sqrt();
                    let scale = self.gamma[c] * inv;
                    let shift = self.beta[c] - self.running_mean[c] * scale;
                    plane.mapv_inplace(|v| v * scale + shift);
                }
                y
            }
            NormKind::Instance => instance_norm(x, &self.gamma, &self.beta).0,
        }
    }

    /// Input gradient; accumulates `[dgamma, dbeta]` when `grads` is given.
    pub fn backward(
        &self,
        dy: &Array4<F>,
        cache: &NormCache<F>,
        grads: Option<&mut [ArrayD<F>]>,
    ) -> Array4<F> {
        match cache {
            NormCache::Batch { xhat, inv } => {
                let (n, c, h, w) = dy.dim();
                let count = F::cast((n * h * w) as f64);
                // dgamma/dbeta and the two reductions the compact formula needs
                let mut sum_dy = Array1::<F>::zeros(c);
                let mut sum_dy_xhat = Array1::<F>::zeros(c);
                for b in 0..n {
                    for ci in 0..c {
                        let dyp = dy.index_axis(Axis(0), b);
                        let dyp = dyp.index_axis(Axis(0), ci);
                        let xp = xhat.index_axis(Axis(0), b);
                        let xp = xp.index_axis(Axis(0), ci);
                        let mut s = F::zero();
                        let mut sx = F::zero();
                        for (d, xh) in dyp.iter().zip(xp.iter()) {
                            s += *d;
                            sx += *d * *xh;
                        }
                        sum_dy[ci] += s;
                        sum_dy_xhat[ci] += sx;
                    }
                }
                if let Some(gs) = grads {
                    let (dg, db) = gs.split_at_mut(1);
                    let dg = dg[0].as_slice_mut().expect("standard layout");
                    let db = db[0].as_slice_mut().expect("standard layout");
                    for ci in 0..c {
                        dg[ci] += sum_dy_xhat[ci];
                        db[ci] += sum_dy[ci];
                    }
                }
                let mut dx = Array4::<F>::zeros(dy.dim());
                for b in 0..n {
                    for ci in 0..c {
                        let scale = self.gamma[ci] * inv[ci] / count;
                        let sd = sum_dy[ci];
                        let sdx = sum_dy_xhat[ci];
                        let dyp = dy.index_axis(Axis(0), b);
                        let dyp = dyp.index_axis(Axis(0), ci);
                        let xp = xhat.index_axis(Axis(0), b);
                        let xp = xp.index_axis(Axis(0), ci);
                        let mut dxp = dx.index_axis_mut(Axis(0), b);
                        let mut dxp = dxp.index_axis_mut(Axis(0), ci);
                        ndarray::Zip::from(&mut dxp)
                            .and(&dyp)
                            .and(&xp)
                            .for_each(|o, &d, &xh| {
                                *o = scale * (count * d - sd - xh * sdx);
                            });
                    }
                }
                dx
            }
            NormCache::Instance { xhat, inv } => {
                let (n, c, h, w) = dy.dim();
                let count = F::cast((h * w) as f64);
                let mut dx = Array4::<F>::zeros(dy.dim());
                let mut dgamma = Array1::<F>::zeros(c);
                let mut dbeta = Array1::<F>::zeros(c);
                for b in 0..n {
                    for ci in 0..c {
                        let dyp = dy.index_axis(Axis(0), b);
                        let dyp = dyp.index_axis(Axis(0), ci);
                        let xp = xhat.index_axis(Axis(0), b);
                        let xp = xp.index_axis(Axis(0), ci);
                        let mut sd = F::zero();
                        let mut sdx = F::zero();
                        for (d, xh) in dyp.iter().zip(xp.iter()) {
                            sd += *d;
                            sdx += *d * *xh;
                        }
                        dgamma[ci] += sdx;
                        dbeta[ci] += sd;
                        let scale = self.gamma[ci] * inv[[b, ci]] / count;
                        let mut dxp = dx.index_axis_mut(Axis(0), b);
                        let mut dxp = dxp.index_axis_mut(Axis(0), ci);
                        ndarray::Zip::from(&mut dxp)
                            .and(&dyp)
                            .and(&xp)
                            .for_each(|o, &d, &xh| {
                                *o = scale * (count * d - sd - xh * sdx);
                            });
                    }
                }
                if let Some(gs) = grads {
                    let (dg, db) = gs.split_at_mut(1);
                    let dg = dg[0].as_slice_mut().expect("standard layout");
                    let db = db[0].as_slice_mut().expect("standard layout");
                    for ci in 0..c {
                        dg[ci] += dgamma[ci];
                        db[ci] += dbeta[ci];
                    }
                }
                dx
            }
            NormCache::Frozen => {
                let eps = F::cast(NORM_EPS);
                let mut dx = dy.clone();
                for (ci, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
                    let scale =
                        self.gamma[ci] / (self.running_var[ci] + eps).sqrt();
                    plane.mapv_inplace(|v| v * scale);
                }
                dx
            }
        }
    }
}

fn batch_norm_train<F: Scalar>(
    x: &Array4<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array4<F>, Array4<F>, Array1<F>, Array1<F>, Array1<F>) {
    let (n, c, h, w) = x.dim();
    let count = n * h * w;
    let countf = F::cast(count as f64);
    let eps = F::cast(NORM_EPS);
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let mut s = F::zero();
        for b in 0..n {
            let plane = x.index_axis(Axis(0), b);
            s += plane.index_axis(Axis(0), ci).iter().copied().sum::<F>();
        }
        let m = s / countf;
        let mut v = F::zero();
        for b in 0..n {
            let plane = x.index_axis(Axis(0), b);
            v += plane
                .index_axis(Axis(0), ci)
                .iter()
                .map(|&t| (t - m) * (t - m))
                .sum::<F>();
        }
        mean[ci] = m;
        var[ci] = v / countf; // biased, used for normalization
    }
    let mut inv = Array1::<F>::zeros(c);
    for ci in 0..c {
        inv[ci] = F::one() / (var[ci] + eps).sqrt();
    }
    let mut xhat = x.clone();
    for b in 0..n {
        for ci in 0..c {
            let m = mean[ci];
            let iv = inv[ci];
            let mut plane = xhat.index_axis_mut(Axis(0), b);
            let mut plane = plane.index_axis_mut(Axis(0), ci);
            plane.mapv_inplace(|t| (t - m) * iv);
        }
    }
    let mut y = xhat.clone();
    for b in 0..n {
        for ci in 0..c {
            let g = gamma[ci];
            let be = beta[ci];
            let mut plane = y.index_axis_mut(Axis(0), b);
            let mut plane = plane.index_axis_mut(Axis(0), ci);
            plane.mapv_inplace(|t| t * g + be);
        }
    }
    // unbiased variance feeds the running estimate
    let denom = F::cast((count.max(2) - 1) as f64);
    let var_unbiased = var.mapv(|v| v * countf / denom);
    (y, xhat, inv, mean, var_unbiased)
}

fn instance_norm<F: Scalar>(
    x: &Array4<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array4<F>, Array4<F>, Array2<F>) {
    let (n, c, h, w) = x.dim();
    let countf = F::cast((h * w) as f64);
    let eps = F::cast(NORM_EPS);
    let mut xhat = x.clone();
    let mut inv = Array2::<F>::zeros((n, c));
    for b in 0..n {
        for ci in 0..c {
            let mut plane = xhat.index_axis_mut(Axis(0), b);
            let mut plane = plane.index_axis_mut(Axis(0), ci);
            let m = plane.iter().copied().sum::<F>() / countf;
            let v = plane.iter().map(|&t| (t - m) * (t - m)).sum::<F>() / countf;
            let iv = F::one() / (v + eps).sqrt();
            inv[[b, ci]] = iv;
            plane.mapv_inplace(|t| (t - m) * iv);
        }
    }
    let mut y = xhat.clone();
    for b in 0..n {
        for ci in 0..c {
            let g = gamma[ci];
            let be = beta[ci];
            let mut plane = y.index_axis_mut(Axis(0), b);
            let mut plane = plane.index_axis_mut(Axis(0), ci);
            plane.mapv_inplace(|t| t * g + be);
        }
    }
    (y, xhat, inv)
}
