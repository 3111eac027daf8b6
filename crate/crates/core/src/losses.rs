//! Objective terms: cycle consistency, global adversarial, region cycle
//! consistency, region adversarial, and their weighted combination.
//!
//! Probabilities come from a numerically stable log-sigmoid over raw logits;
//! minimax objective values clamp probabilities to `[1e-7, 1 - 1e-7]`.
//! The generator step uses the non-saturating form `-log D(fake)`; an
//! optional least-squares variant is available behind a config switch.

use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{BBox, Domain, Sample, ValueRange};
use crate::discriminator::Discriminator;
use crate::generator::Generator;
use crate::nn::{Batch, NnError};
use crate::roi::{roi_pool_batch, roi_pool_batch_backward, RoiError, RoiPoolSpec};
use crate::scalar::Scalar;

/// Probability clamp inside the log objective terms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("expected a {expected} sample on this side, got {got}")]
    DomainMismatch { expected: Domain, got: Domain },
    #[error("loss inputs must be normalized images")]
    NotNormalized,
    #[error("batch element {index} on the {side} side has no boxes")]
    ElementWithoutBoxes { index: usize, side: Domain },
    #[error("batch images must share one size; element {index} differs")]
    RaggedBatch { index: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss weights must be non-negative")]
    NegativeWeight,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Roi(#[from] RoiError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_roi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 5.0,
            lambda_roi: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_cyc < 0.0 || self.lambda_roi < 0.0 {
            return Err(LossError::NegativeWeight);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    /// The classic log form, non-saturating on the generator side.
    #[default]
    Log,
    /// Least-squares variant `(D-1)^2 / D^2` on raw logits.
    LeastSquares,
}

/// Per-iteration scalar summary. Totals are composed from the parts by
/// [`LossReport::compose`], which is the single home of the nested
/// `lambda_roi * (lambda_cyc * roi_cyc + ...)` grouping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub cyc: f64,
    pub adv_g_vi: f64,
    pub adv_g_ir: f64,
    pub roi_cyc: f64,
    pub roi_adv_vi: f64,
    pub roi_adv_ir: f64,
    pub total_g: f64,
    pub total_d: f64,
    /// discriminator-step losses: global VI, global IR, region VI, region IR
    pub d_parts: [f64; 4],
}

impl LossReport {
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        cyc: f64,
        adv_g_vi: f64,
        adv_g_ir: f64,
        roi_cyc: f64,
        roi_adv_vi: f64,
        roi_adv_ir: f64,
        d_parts: [f64; 4],
        weights: &LossWeights,
    ) -> LossReport {
        let total_g = adv_g_vi
            + adv_g_ir
            + weights.lambda_cyc * cyc
            + weights.lambda_roi * (weights.lambda_cyc * roi_cyc + roi_adv_vi + roi_adv_ir);
        let total_d = d_parts.iter().sum();
        LossReport {
            cyc,
            adv_g_vi,
            adv_g_ir,
            roi_cyc,
            roi_adv_vi,
            roi_adv_ir,
            total_g,
            total_d,
            d_parts,
        }
    }

    /// First non-finite term, if any; used to abort training with a name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let named = [
            (self.cyc, "cyc"),
            (self.adv_g_vi, "adv_g_vi"),
            (self.adv_g_ir, "adv_g_ir"),
            (self.roi_cyc, "roi_cyc"),
            (self.roi_adv_vi, "roi_adv_vi"),
            (self.roi_adv_ir, "roi_adv_ir"),
            (self.total_g, "total_g"),
            (self.total_d, "total_d"),
            (self.d_parts[0], "d_global_vi"),
            (self.d_parts[1], "d_global_ir"),
            (self.d_parts[2], "d_roi_vi"),
            (self.d_parts[3], "d_roi_ir"),
        ];
        named.iter().find(|(v, _)| !v.is_finite()).map(|(_, n)| *n)
    }
}

/// A complete unpaired training batch: thermal side with boxes, visible side
/// with boxes, already normalized and stacked.
#[derive(Debug, Clone)]
pub struct TrainBatch<F: Scalar> {
    pub x: Batch<F>,
    pub x_boxes: Vec<Vec<BBox>>,
    pub y: Batch<F>,
    pub y_boxes: Vec<Vec<BBox>>,
}

impl<F: Scalar> TrainBatch<F> {
    /// Stack samples; checks domain tags, the normalized range, equal
    /// sizes, and that every element carries at least one box.
    pub fn from_samples(ir: &[Sample<F>], vi: &[Sample<F>]) -> Result<Self, LossError> {
        let stack_side = |samples: &[Sample<F>],
                          expected: Domain|
         -> Result<(Batch<F>, Vec<Vec<BBox>>), LossError> {
            if samples.is_empty() {
                return Err(LossError::EmptyBatch);
            }
            let (h, w) = samples[0].image.hw();
            let mut batch = Batch::<F>::zeros((samples.len(), 1, h, w));
            let mut boxes = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                if s.domain != expected {
                    return Err(LossError::DomainMismatch {
                        expected,
                        got: s.domain,
                    });
                }
                if s.image.range() != ValueRange::Normalized {
                    return Err(LossError::NotNormalized);
                }
                if s.image.hw() != (h, w) {
                    return Err(LossError::RaggedBatch { index: i });
                }
                if s.boxes.is_empty() {
                    return Err(LossError::ElementWithoutBoxes {
                        index: i,
                        side: expected,
                    });
                }
                batch
                    .index_axis_mut(Axis(0), i)
                    .index_axis_move(Axis(0), 0)
                    .assign(s.image.pixels());
                boxes.push(s.boxes.clone());
            }
            Ok((batch, boxes))
        };
        let (x, x_boxes) = stack_side(ir, Domain::Ir)?;
        let (y, y_boxes) = stack_side(vi, Domain::Vi)?;
        Ok(TrainBatch {
            x,
            x_boxes,
            y,
            y_boxes,
        })
    }
}

// ---------------------------------------------------------------------------
// stable scalar pieces

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

// ---------------------------------------------------------------------------
// minimax objective values: E[log D(real)] + E[log(1 - D(fake))]

/// `mean log p_real + mean log (1 - p_fake)` over probability arrays, with
/// the epsilon clamp on both logs.
pub fn adversarial_objective_from_probs<F: Scalar>(real_p: &[F], fake_p: &[F]) -> f64 {
    let r = real_p
        .iter()
        .map(|p| clamp_prob(p.as_f64()).ln())
        .sum::<f64>()
        / real_p.len() as f64;
    let f = fake_p
        .iter()
        .map(|p| (1.0 - clamp_prob(p.as_f64())).ln())
        .sum::<f64>()
        / fake_p.len() as f64;
    r + f
}

/// Minimax adversarial objective evaluated through a critic in eval mode.
pub fn adversarial_objective<F: Scalar>(
    d: &Discriminator<F>,
    real: &Batch<F>,
    fake: &Batch<F>,
) -> Result<f64, LossError> {
    let sr = d.discriminate(real)?;
    let sf = d.discriminate(fake)?;
    let rp: Vec<F> = sr.iter().map(|&z| F::cast(sigmoid(z.as_f64()))).collect();
    let fp: Vec<F> = sf.iter().map(|&z| F::cast(sigmoid(z.as_f64()))).collect();
    Ok(adversarial_objective_from_probs(&rp, &fp))
}

// ---------------------------------------------------------------------------
// training losses on logit maps (value + gradient seed)

/// Optional per-batch-element weights; `None` means uniform `1/n`.
fn element_weights<F: Scalar>(n: usize, weights: Option<&[f64]>) -> Vec<f64> {
    match weights {
        Some(w) => {
            assert_eq!(w.len(), n);
            w.to_vec()
        }
        None => vec![1.0 / n as f64; n],
    }
}

/// Discriminator-step loss: `mean softplus(-real) + mean softplus(fake)`
/// (the negation of the minimax objective) or its least-squares analogue.
/// Returns the value and the gradient seeds w.r.t. both logit maps.
pub fn d_loss<F: Scalar>(
    kind: AdversarialKind,
    real_logits: &Batch<F>,
    fake_logits: &Batch<F>,
    real_weights: Option<&[f64]>,
    fake_weights: Option<&[f64]>,
) -> (f64, Batch<F>, Batch<F>) {
    let rw = element_weights::<F>(real_logits.dim().0, real_weights);
    let fw = element_weights::<F>(fake_logits.dim().0, fake_weights);
    let mut value = 0.0;
    let mut dreal = Batch::<F>::zeros(real_logits.dim());
    let mut dfake = Batch::<F>::zeros(fake_logits.dim());
    let cells_r = (real_logits.len() / real_logits.dim().0) as f64;
    let cells_f = (fake_logits.len() / fake_logits.dim().0) as f64;
    for (e, &w) in rw.iter().enumerate() {
        let logits = real_logits.index_axis(Axis(0), e);
        let mut seed = dreal.index_axis_mut(Axis(0), e);
        ndarray::Zip::from(&mut seed).and(&logits).for_each(|d, &z| {
            let z = z.as_f64();
            match kind {
                AdversarialKind::Log => {
                    value += w * softplus(-z) / cells_r;
                    *d = F::cast(w * (sigmoid(z) - 1.0) / cells_r);
                }
                AdversarialKind::LeastSquares => {
                    value += w * (z - 1.0) * (z - 1.0) / cells_r;
                    *d = F::cast(w * 2.0 * (z - 1.0) / cells_r);
                }
            }
        });
    }
    for (e, &w) in fw.iter().enumerate() {
        let logits = fake_logits.index_axis(Axis(0), e);
        let mut seed = dfake.index_axis_mut(Axis(0), e);
        ndarray::Zip::from(&mut seed).and(&logits).for_each(|d, &z| {
            let z = z.as_f64();
            match kind {
                AdversarialKind::Log => {
                    value += w * softplus(z) / cells_f;
                    *d = F::cast(w * sigmoid(z) / cells_f);
                }
                AdversarialKind::LeastSquares => {
                    value += w * z * z / cells_f;
                    *d = F::cast(w * 2.0 * z / cells_f);
                }
            }
        });
    }
    (value, dreal, dfake)
}

/// Generator-step adversarial loss on fake logits: non-saturating
/// `mean softplus(-fake)` (log form) or `(fake-1)^2` (least squares).
pub fn g_adv_loss<F: Scalar>(
    kind: AdversarialKind,
    fake_logits: &Batch<F>,
    fake_weights: Option<&[f64]>,
) -> (f64, Batch<F>) {
    let fw = element_weights::<F>(fake_logits.dim().0, fake_weights);
    let cells = (fake_logits.len() / fake_logits.dim().0) as f64;
    let mut value = 0.0;
    let mut seed = Batch::<F>::zeros(fake_logits.dim());
    for (e, &w) in fw.iter().enumerate() {
        let logits = fake_logits.index_axis(Axis(0), e);
        let mut dst = seed.index_axis_mut(Axis(0), e);
        ndarray::Zip::from(&mut dst).and(&logits).for_each(|d, &z| {
            let z = z.as_f64();
            match kind {
                AdversarialKind::Log => {
                    value += w * softplus(-z) / cells;
                    *d = F::cast(w * (sigmoid(z) - 1.0) / cells);
                }
                AdversarialKind::LeastSquares => {
                    value += w * (z - 1.0) * (z - 1.0) / cells;
                    *d = F::cast(w * 2.0 * (z - 1.0) / cells);
                }
            }
        });
    }
    (value, seed)
}

/// Weighted mean absolute difference plus the gradient w.r.t. `a`.
/// `weights`, when given, hold one factor per batch element; cells within an
/// element average uniformly.
pub fn l1_mean<F: Scalar>(
    a: &Batch<F>,
    b: &Batch<F>,
    weights: Option<&[f64]>,
) -> (f64, Batch<F>) {
    assert_eq!(a.dim(), b.dim());
    let w = element_weights::<F>(a.dim().0, weights);
    let cells = (a.len() / a.dim().0) as f64;
    let mut value = 0.0;
    let mut grad = Batch::<F>::zeros(a.dim());
    for (e, &we) in w.iter().enumerate() {
        let ae = a.index_axis(Axis(0), e);
        let be = b.index_axis(Axis(0), e);
        let mut ge = grad.index_axis_mut(Axis(0), e);
        ndarray::Zip::from(&mut ge).and(&ae).and(&be).for_each(|g, &av, &bv| {
            let d = (av - bv).as_f64();
            value += we * d.abs() / cells;
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            *g = F::cast(we * s / cells);
        });
    }
    (value, grad)
}

/// Per-patch weights that average region patches within their owning batch
/// element first, then across elements.
pub fn patch_weights(owners: &[usize], n_elements: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_elements];
    for &o in owners {
        counts[o] += 1;
    }
    owners
        .iter()
        .map(|&o| 1.0 / (n_elements as f64 * counts[o] as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// operation-level values (eval mode)

/// Anything that maps an image batch to an image batch; lets tests drive the
/// loss formulas with exact identities in place of trained networks.
pub trait ImageMapping<F: Scalar> {
    fn map_images(&self, x: &Batch<F>) -> Result<Batch<F>, NnError>;
}

impl<F: Scalar> ImageMapping<F> for Generator<F> {
    fn map_images(&self, x: &Batch<F>) -> Result<Batch<F>, NnError> {
        self.translate(x)
    }
}

/// The exact identity mapping.
pub struct IdentityMapping;

impl<F: Scalar> ImageMapping<F> for IdentityMapping {
    fn map_images(&self, x: &Batch<F>) -> Result<Batch<F>, NnError> {
        Ok(x.clone())
    }
}

/// Cycle-consistency value: `mean |F(G(x)) - x| + mean |G(F(y)) - y|`.
pub fn cycle_loss<F: Scalar>(
    g: &dyn ImageMapping<F>,
    f: &dyn ImageMapping<F>,
    x: &Batch<F>,
    y: &Batch<F>,
) -> Result<f64, LossError> {
    let x_rec = f.map_images(&g.map_images(x)?)?;
    let y_rec = g.map_images(&f.map_images(y)?)?;
    let (vx, _) = l1_mean(&x_rec, x, None);
    let (vy, _) = l1_mean(&y_rec, y, None);
    Ok(vx + vy)
}

/// Region cycle-consistency value: the cycle residual pooled through the
/// source element's own boxes on both sides.
pub fn roi_cycle_loss<F: Scalar>(
    g: &dyn ImageMapping<F>,
    f: &dyn ImageMapping<F>,
    x: &Batch<F>,
    x_boxes: &[Vec<BBox>],
    y: &Batch<F>,
    y_boxes: &[Vec<BBox>],
    spec: &RoiPoolSpec,
) -> Result<f64, LossError> {
    for (i, b) in x_boxes.iter().enumerate() {
        if b.is_empty() {
            return Err(LossError::ElementWithoutBoxes {
                index: i,
                side: Domain::Ir,
            });
        }
    }
    for (i, b) in y_boxes.iter().enumerate() {
        if b.is_empty() {
            return Err(LossError::ElementWithoutBoxes {
                index: i,
                side: Domain::Vi,
            });
        }
    }
    let x_rec = f.map_images(&g.map_images(x)?)?;
    let y_rec = g.map_images(&f.map_images(y)?)?;
    let (rx_rec, owners_x) = roi_pool_batch(&x_rec, x_boxes, spec)?;
    let (rx, _) = roi_pool_batch(x, x_boxes, spec)?;
    let (ry_rec, owners_y) = roi_pool_batch(&y_rec, y_boxes, spec)?;
    let (ry, _) = roi_pool_batch(y, y_boxes, spec)?;
    let wx = patch_weights(&owners_x, x.dim().0);
    let wy = patch_weights(&owners_y, y.dim().0);
    let (vx, _) = l1_mean(&rx_rec, &rx, Some(&wx));
    let (vy, _) = l1_mean(&ry_rec, &ry, Some(&wy));
    Ok(vx + vy)
}

/// Full objective in eval mode: every part of the report computed from the
/// current networks on one batch, without gradients.
#[allow(clippy::too_many_arguments)]
pub fn full_objective<F: Scalar>(
    g: &Generator<F>,
    f: &Generator<F>,
    d_g_vi: &Discriminator<F>,
    d_g_ir: &Discriminator<F>,
    d_roi_vi: &Discriminator<F>,
    d_roi_ir: &Discriminator<F>,
    batch: &TrainBatch<F>,
    weights: &LossWeights,
    kind: AdversarialKind,
    roi_spec: &RoiPoolSpec,
) -> Result<LossReport, LossError> {
    weights.validate()?;
    let gx = g.translate(&batch.x)?;
    let fgx = f.translate(&gx)?;
    let fy = f.translate(&batch.y)?;
    let gfy = g.translate(&fy)?;

    let (cyc_x, _) = l1_mean(&fgx, &batch.x, None);
    let (cyc_y, _) = l1_mean(&gfy, &batch.y, None);
    let cyc = cyc_x + cyc_y;

    let (adv_g_vi, _) = g_adv_loss(kind, &d_g_vi.discriminate(&gx)?, None);
    let (adv_g_ir, _) = g_adv_loss(kind, &d_g_ir.discriminate(&fy)?, None);

    let (r_fgx, ox) = roi_pool_batch(&fgx, &batch.x_boxes, roi_spec)?;
    let (r_x, _) = roi_pool_batch(&batch.x, &batch.x_boxes, roi_spec)?;
    let (r_gfy, oy) = roi_pool_batch(&gfy, &batch.y_boxes, roi_spec)?;
    let (r_y, _) = roi_pool_batch(&batch.y, &batch.y_boxes, roi_spec)?;
    let wx = patch_weights(&ox, batch.x.dim().0);
    let wy = patch_weights(&oy, batch.y.dim().0);
    let roi_cyc = l1_mean(&r_fgx, &r_x, Some(&wx)).0 + l1_mean(&r_gfy, &r_y, Some(&wy)).0;

    let (r_gx, ogx) = roi_pool_batch(&gx, &batch.x_boxes, roi_spec)?;
    let (r_fy, ofy) = roi_pool_batch(&fy, &batch.y_boxes, roi_spec)?;
    let wgx = patch_weights(&ogx, batch.x.dim().0);
    let wfy = patch_weights(&ofy, batch.y.dim().0);
    let (roi_adv_vi, _) = g_adv_loss(kind, &d_roi_vi.discriminate(&r_gx)?, Some(&wgx));
    let (roi_adv_ir, _) = g_adv_loss(kind, &d_roi_ir.discriminate(&r_fy)?, Some(&wfy));

    // discriminator-side values on the same fakes
    let d_g_vi_loss = d_loss(
        kind,
        &d_g_vi.discriminate(&batch.y)?,
        &d_g_vi.discriminate(&gx)?,
        None,
        None,
    )
    .0;
    let d_g_ir_loss = d_loss(
        kind,
        &d_g_ir.discriminate(&batch.x)?,
        &d_g_ir.discriminate(&fy)?,
        None,
        None,
    )
    .0;
    let (r_real_y, ory) = roi_pool_batch(&batch.y, &batch.y_boxes, roi_spec)?;
    let (r_real_x, orx) = roi_pool_batch(&batch.x, &batch.x_boxes, roi_spec)?;
    let wry = patch_weights(&ory, batch.y.dim().0);
    let wrx = patch_weights(&orx, batch.x.dim().0);
    let d_roi_vi_loss = d_loss(
        kind,
        &d_roi_vi.discriminate(&r_real_y)?,
        &d_roi_vi.discriminate(&r_gx)?,
        Some(&wry),
        Some(&wgx),
    )
    .0;
    let d_roi_ir_loss = d_loss(
        kind,
        &d_roi_ir.discriminate(&r_real_x)?,
        &d_roi_ir.discriminate(&r_fy)?,
        Some(&wrx),
        Some(&wfy),
    )
    .0;

    Ok(LossReport::compose(
        cyc,
        adv_g_vi,
        adv_g_ir,
        roi_cyc,
        roi_adv_vi,
        roi_adv_ir,
        [d_g_vi_loss, d_g_ir_loss, d_roi_vi_loss, d_roi_ir_loss],
        weights,
    ))
}

// ---------------------------------------------------------------------------
// gradient-bearing generator objective (train mode)

/// Which objective terms participate; the verification suite checks each
/// term's gradients in isolation and then all together.
#[derive(Debug, Clone, Copy)]
pub struct TermMask {
    pub adv_global: bool,
    pub cyc: bool,
    pub roi_cyc: bool,
    pub roi_adv: bool,
}

impl TermMask {
    pub fn all() -> Self {
        TermMask {
            adv_global: true,
            cyc: true,
            roi_cyc: true,
            roi_adv: true,
        }
    }

    pub fn only(term: &str) -> Self {
        let mut m = TermMask {
            adv_global: false,
            cyc: false,
            roi_cyc: false,
            roi_adv: false,
        };
        match term {
            "adv_global" => m.adv_global = true,
            "cyc" => m.cyc = true,
            "roi_cyc" => m.roi_cyc = true,
            "roi_adv" => m.roi_adv = true,
            other => panic!("unknown term {other}"),
        }
        m
    }
}

/// Raw (unweighted) generator-side term values.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeneratorTerms {
    pub cyc: f64,
    pub adv_g_vi: f64,
    pub adv_g_ir: f64,
    pub roi_cyc: f64,
    pub roi_adv_vi: f64,
    pub roi_adv_ir: f64,
}

/// Everything one generator step produces: term values, gradients for both
/// mappings, and the fakes the discriminator step consumes afterwards.
#[derive(Debug)]
pub struct GeneratorStep<F: Scalar> {
    pub terms: GeneratorTerms,
    pub g_grads: Vec<ArrayD<F>>,
    pub f_grads: Vec<ArrayD<F>>,
    /// `G(x)` — synthetic visible-domain images.
    pub fake_vi: Batch<F>,
    /// `F(y)` — synthetic thermal-domain images.
    pub fake_ir: Batch<F>,
}

/// Train-mode generator objective with gradients for both mappings.
///
/// Discriminators run in train mode (their batch statistics see the fakes,
/// as during a real step) but their parameters receive no gradients here.
/// Masked-off terms contribute neither value nor gradient, which is what
/// makes the `lambda_roi = 0` independence assertions exact.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective_with_grads<F: Scalar>(
    g: &mut Generator<F>,
    f: &mut Generator<F>,
    d_g_vi: &mut Discriminator<F>,
    d_g_ir: &mut Discriminator<F>,
    d_roi_vi: &mut Discriminator<F>,
    d_roi_ir: &mut Discriminator<F>,
    batch: &TrainBatch<F>,
    weights: &LossWeights,
    kind: AdversarialKind,
    roi_spec: &RoiPoolSpec,
    mask: TermMask,
) -> Result<GeneratorStep<F>, LossError> {
    weights.validate()?;
    let n_x = batch.x.dim().0;
    let n_y = batch.y.dim().0;
    let lc = weights.lambda_cyc;
    let lr = weights.lambda_roi;

    let mut terms = GeneratorTerms::default();
    let mut g_grads = g.zero_grads();
    let mut f_grads = f.zero_grads();

    // forward chain
    let (gx, c_g1) = g.forward_train(&batch.x)?;
    let (fgx, c_f1) = f.forward_train(&gx)?;
    let (fy, c_f2) = f.forward_train(&batch.y)?;
    let (gfy, c_g2) = g.forward_train(&fy)?;

    let scale =
        |seed: &Batch<F>, k: f64| -> Batch<F> { seed.mapv(|v| v * F::cast(k)) };

    // gradients w.r.t. the four generator outputs
    let mut d_gx = Batch::<F>::zeros(gx.dim());
    let mut d_fgx = Batch::<F>::zeros(fgx.dim());
    let mut d_fy = Batch::<F>::zeros(fy.dim());
    let mut d_gfy = Batch::<F>::zeros(gfy.dim());

    if mask.cyc {
        let (vx, gx_seed) = l1_mean(&fgx, &batch.x, None);
        let (vy, gy_seed) = l1_mean(&gfy, &batch.y, None);
        terms.cyc = vx + vy;
        d_fgx = d_fgx + &scale(&gx_seed, lc);
        d_gfy = d_gfy + &scale(&gy_seed, lc);
    }

    if mask.roi_cyc {
        let (r_fgx, ox) = roi_pool_batch(&fgx, &batch.x_boxes, roi_spec)?;
        let (r_x, _) = roi_pool_batch(&batch.x, &batch.x_boxes, roi_spec)?;
        let (r_gfy, oy) = roi_pool_batch(&gfy, &batch.y_boxes, roi_spec)?;
        let (r_y, _) = roi_pool_batch(&batch.y, &batch.y_boxes, roi_spec)?;
        check_boxes(&batch.x_boxes, Domain::Ir)?;
        check_boxes(&batch.y_boxes, Domain::Vi)?;
        let wx = patch_weights(&ox, n_x);
        let wy = patch_weights(&oy, n_y);
        let (vx, seed_x) = l1_mean(&r_fgx, &r_x, Some(&wx));
        let (vy, seed_y) = l1_mean(&r_gfy, &r_y, Some(&wy));
        terms.roi_cyc = vx + vy;
        let scaled_x = scale(&seed_x, lr * lc);
        let scaled_y = scale(&seed_y, lr * lc);
        d_fgx = d_fgx + &roi_pool_batch_backward(&scaled_x, &fgx, &batch.x_boxes, roi_spec);
        d_gfy = d_gfy + &roi_pool_batch_backward(&scaled_y, &gfy, &batch.y_boxes, roi_spec);
    }

    if mask.adv_global {
        let (s_gx, c_dvi) = d_g_vi.forward_train(&gx)?;
        let (v_vi, seed_vi) = g_adv_loss(kind, &s_gx, None);
        terms.adv_g_vi = v_vi;
        d_gx = d_gx + &d_g_vi.backward(seed_vi, &c_dvi, None);

        let (s_fy, c_dir) = d_g_ir.forward_train(&fy)?;
        let (v_ir, seed_ir) = g_adv_loss(kind, &s_fy, None);
        terms.adv_g_ir = v_ir;
        d_fy = d_fy + &d_g_ir.backward(seed_ir, &c_dir, None);
    }

    if mask.roi_adv {
        check_boxes(&batch.x_boxes, Domain::Ir)?;
        check_boxes(&batch.y_boxes, Domain::Vi)?;
        let (r_gx, ogx) = roi_pool_batch(&gx, &batch.x_boxes, roi_spec)?;
        let wgx = patch_weights(&ogx, n_x);
        let (s_rgx, c_droi_vi) = d_roi_vi.forward_train(&r_gx)?;
        let (v_vi, seed_vi) = g_adv_loss(kind, &s_rgx, Some(&wgx));
        terms.roi_adv_vi = v_vi;
        let d_r_gx = d_roi_vi.backward(scale(&seed_vi, lr), &c_droi_vi, None);
        d_gx = d_gx + &roi_pool_batch_backward(&d_r_gx, &gx, &batch.x_boxes, roi_spec);

        let (r_fy, ofy) = roi_pool_batch(&fy, &batch.y_boxes, roi_spec)?;
        let wfy = patch_weights(&ofy, n_y);
        let (s_rfy, c_droi_ir) = d_roi_ir.forward_train(&r_fy)?;
        let (v_ir, seed_ir) = g_adv_loss(kind, &s_rfy, Some(&wfy));
        terms.roi_adv_ir = v_ir;
        let d_r_fy = d_roi_ir.backward(scale(&seed_ir, lr), &c_droi_ir, None);
        d_fy = d_fy + &roi_pool_batch_backward(&d_r_fy, &fy, &batch.y_boxes, roi_spec);
    }

    // backward chains: x side F then G, y side G then F
    d_gx = d_gx + &f.backward(&d_fgx, &c_f1, Some(&mut f_grads));
    let _ = g.backward(&d_gx, &c_g1, Some(&mut g_grads));
    d_fy = d_fy + &g.backward(&d_gfy, &c_g2, Some(&mut g_grads));
    let _ = f.backward(&d_fy, &c_f2, Some(&mut f_grads));

    Ok(GeneratorStep {
        terms,
        g_grads,
        f_grads,
        fake_vi: gx,
        fake_ir: fy,
    })
}

fn check_boxes(boxes: &[Vec<BBox>], side: Domain) -> Result<(), LossError> {
    for (i, b) in boxes.iter().enumerate() {
        if b.is_empty() {
            return Err(LossError::ElementWithoutBoxes { index: i, side });
        }
    }
    Ok(())
}
