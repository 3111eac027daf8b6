//! Adam with per-network moment buffers.

use ndarray::ArrayD;

use crate::scalar::Scalar;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    /// Zero moments shaped after one parameter visitation of the network.
    pub fn new(visit: impl FnOnce(&mut dyn FnMut(&[F]))) -> Self {
        let mut lens = Vec::new();
        visit(&mut |p: &[F]| lens.push(p.len()));
        AdamState {
            t: 0,
            m: lens.iter().map(|&l| vec![F::zero(); l]).collect(),
            v: lens.iter().map(|&l| vec![F::zero(); l]).collect(),
        }
    }

    /// One update over the network's parameters, visited in the same order
    /// the gradients were accumulated in.
    pub fn step(
        &mut self,
        lr: f64,
        beta1: f64,
        beta2: f64,
        grads: &[ArrayD<F>],
        visit_mut: impl FnOnce(&mut dyn FnMut(&mut [F])),
    ) {
        assert_eq!(grads.len(), self.m.len(), "gradient/moment count mismatch");
        self.t += 1;
        let corr1 = 1.0 - beta1.powi(self.t as i32);
        let corr2 = 1.0 - beta2.powi(self.t as i32);
        let b1 = F::cast(beta1);
        let b2 = F::cast(beta2);
        let one_b1 = F::cast(1.0 - beta1);
        let one_b2 = F::cast(1.0 - beta2);
        let c1 = F::cast(1.0 / corr1);
        let c2 = F::cast(1.0 / corr2);
        let step_lr = F::cast(lr);
        let eps = F::cast(ADAM_EPS);
        let mut idx = 0usize;
        let m = &mut self.m;
        let v = &mut self.v;
        visit_mut(&mut |p: &mut [F]| {
            let g = grads[idx].as_slice().expect("standard layout");
            assert_eq!(g.len(), p.len(), "parameter {idx} length mismatch");
            let mi = &mut m[idx];
            let vi = &mut v[idx];
            for i in 0..p.len() {
                mi[i] = b1 * mi[i] + one_b1 * g[i];
                vi[i] = b2 * vi[i] + one_b2 * g[i] * g[i];
                let mhat = mi[i] * c1;
                let vhat = vi[i] * c2;
                p[i] = p[i] - step_lr * mhat / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
        assert_eq!(idx, grads.len(), "visitation covered {idx} of {} arrays", grads.len());
    }
}
