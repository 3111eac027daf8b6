//! Finite-difference verification of the analytic gradients.
//!
//! Runs the train-mode generator objective twice per sampled coordinate
//! (central differences) and compares against the accumulated analytic
//! gradient. Meant to run on 64-bit micro configurations; the acceptance
//! suite drives it per objective term and for the full weighted objective.

use crate::discriminator::Discriminator;
use crate::generator::Generator;
use crate::losses::{
    generator_objective_with_grads, AdversarialKind, GeneratorTerms, LossError, LossWeights,
    TermMask, TrainBatch,
};
use crate::rng::{stream, uniform_usize};
use crate::roi::RoiPoolSpec;

/// Sampling and tolerance knobs.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// coordinates sampled per parameter array
    pub samples_per_array: usize,
    /// central-difference step
    pub step: f64,
    /// relative-error pass threshold per coordinate
    pub tolerance: f64,
    /// absolute floor: coordinates where both gradients are below the
    /// finite-difference noise level pass unconditionally
    pub abs_tolerance: f64,
    /// seed for coordinate sampling
    pub seed: u64,
    /// print every failing coordinate
    pub verbose: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            samples_per_array: 6,
            step: 1e-5,
            tolerance: 1e-4,
            abs_tolerance: 1e-7,
            seed: 17,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Masked, weighted objective value matching the gradient scaling inside
/// [`generator_objective_with_grads`].
fn masked_value(terms: &GeneratorTerms, weights: &LossWeights, mask: TermMask) -> f64 {
    let mut v = 0.0;
    if mask.adv_global {
        v += terms.adv_g_vi + terms.adv_g_ir;
    }
    if mask.cyc {
        v += weights.lambda_cyc * terms.cyc;
    }
    if mask.roi_cyc {
        v += weights.lambda_roi * weights.lambda_cyc * terms.roi_cyc;
    }
    if mask.roi_adv {
        v += weights.lambda_roi * (terms.roi_adv_vi + terms.roi_adv_ir);
    }
    v
}

/// All six networks bundled for perturbation runs.
pub struct Nets<F: crate::scalar::Scalar> {
    pub g: Generator<F>,
    pub f: Generator<F>,
    pub d_g_vi: Discriminator<F>,
    pub d_g_ir: Discriminator<F>,
    pub d_roi_vi: Discriminator<F>,
    pub d_roi_ir: Discriminator<F>,
}

impl<F: crate::scalar::Scalar> Clone for Nets<F> {
    fn clone(&self) -> Self {
        Nets {
            g: self.g.clone(),
            f: self.f.clone(),
            d_g_vi: self.d_g_vi.clone(),
            d_g_ir: self.d_g_ir.clone(),
            d_roi_vi: self.d_roi_vi.clone(),
            d_roi_ir: self.d_roi_ir.clone(),
        }
    }
}

fn objective_value(
    nets: &Nets<f64>,
    batch: &TrainBatch<f64>,
    weights: &LossWeights,
    kind: AdversarialKind,
    roi_spec: &RoiPoolSpec,
    mask: TermMask,
) -> Result<f64, LossError> {
    let mut n = nets.clone();
    let step = generator_objective_with_grads(
        &mut n.g,
        &mut n.f,
        &mut n.d_g_vi,
        &mut n.d_g_ir,
        &mut n.d_roi_vi,
        &mut n.d_roi_ir,
        batch,
        weights,
        kind,
        roi_spec,
        mask,
    )?;
    Ok(masked_value(&step.terms, weights, mask))
}

/// Check the analytic gradients of every parameter array of both mappings
/// against central finite differences of the masked objective.
pub fn check_generator_gradients(
    nets: &Nets<f64>,
    batch: &TrainBatch<f64>,
    weights: &LossWeights,
    kind: AdversarialKind,
    roi_spec: &RoiPoolSpec,
    mask: TermMask,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, LossError> {
    let mut work = nets.clone();
    let step = generator_objective_with_grads(
        &mut work.g,
        &mut work.f,
        &mut work.d_g_vi,
        &mut work.d_g_ir,
        &mut work.d_roi_vi,
        &mut work.d_roi_ir,
        batch,
        weights,
        kind,
        roi_spec,
        mask,
    )?;

    let mut rng = stream(cfg.seed, &[0x6f64]);
    let mut checked = 0usize;
    let mut passed = 0usize;
    let mut max_rel = 0.0f64;

    // which = 0 perturbs G, 1 perturbs F
    for which in 0..2usize {
        let grads = if which == 0 { &step.g_grads } else { &step.f_grads };
        for (array_idx, grad) in grads.iter().enumerate() {
            let len = grad.len();
            if len == 0 {
                continue;
            }
            for _ in 0..cfg.samples_per_array.min(len) {
                let coord = uniform_usize(&mut rng, 0, len - 1);
                let analytic = grad.as_slice().unwrap()[coord];

                let eval_at = |delta: f64| -> Result<f64, LossError> {
                    let mut n = nets.clone();
                    let target = if which == 0 { &mut n.g } else { &mut n.f };
                    let mut seen = 0usize;
                    target.visit_params_mut(&mut |p: &mut [f64]| {
                        if seen == array_idx {
                            p[coord] += delta;
                        }
                        seen += 1;
                    });
                    objective_value(&n, batch, weights, kind, roi_spec, mask)
                };
                let up = eval_at(cfg.step)?;
                let dn = eval_at(-cfg.step)?;
                let fd = (up - dn) / (2.0 * cfg.step);
                let err = (fd - analytic).abs();
                let rel = err / fd.abs().max(analytic.abs()).max(1e-12);
                checked += 1;
                if err <= cfg.abs_tolerance + cfg.tolerance * fd.abs().max(analytic.abs()) {
                    passed += 1;
                } else if cfg.verbose {
                    eprintln!(
                        "FAIL which={which} array={array_idx} coord={coord} fd={fd:.3e} analytic={analytic:.3e} rel={rel:.3e}"
                    );
                }
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(GradCheckReport {
        checked,
        passed,
        max_rel_err: max_rel,
    })
}
