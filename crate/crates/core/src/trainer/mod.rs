//! Alternating adversarial optimization of the six networks: one joint
//! generator step (critics frozen), then one step for each critic on real
//! versus detached fakes, with the constant-then-linear-decay schedule,
//! checkpointing and a CSV metrics log.

mod adam;
mod replay;
mod schedule;

pub use adam::{AdamState, ADAM_EPS};
pub use replay::ImagePool;
pub use schedule::lr_at;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, CheckpointError};
use crate::data::{
    crop_with_object, histogram_equalize, normalize, DataError, DatasetManifest, Domain, Sample,
};
use crate::discriminator::{build_patch_discriminator, Discriminator, DiscriminatorConfig};
use crate::generator::{build_generator, ConfigError, Generator, GeneratorConfig};
use crate::losses::{
    d_loss, generator_objective_with_grads, patch_weights, AdversarialKind, LossError, LossReport,
    LossWeights, TermMask, TrainBatch,
};
use crate::nn::{Batch, NnError, NormKind};
use crate::rng::{shuffle, stream, tags};
use crate::roi::{roi_pool_batch, RoiError, RoiPoolSpec};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("epoch {epoch} outside the schedule (0..={total})")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("loss term {term} became non-finite at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: u64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Roi(#[from] RoiError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs_const: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub replay_buffer: usize,
    pub norm: NormKind,
    pub checkpoint_every: usize,
    /// side of the object-containing square crops fed to the networks
    pub crop_size: usize,
    /// equalize thermal-side inputs (visible images are never equalized)
    pub equalize_ir: bool,
    pub adversarial: AdversarialKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            epochs_const: 20,
            epochs_decay: 20,
            batch_size: 2,
            weights: LossWeights::default(),
            seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            replay_buffer: 50,
            norm: NormKind::Batch,
            checkpoint_every: 5,
            crop_size: 256,
            equalize_ir: true,
            adversarial: AdversarialKind::Log,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_const + self.epochs_decay
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::Config("checkpoint_every must be >= 1".into()));
        }
        if self.crop_size % 4 != 0 {
            return Err(TrainError::Config(
                "crop_size must be divisible by 4".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Everything the trainer needs to build and drive the six networks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSetup {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub roi: RoiPoolSpec,
}

impl TrainerSetup {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.roi
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// The six networks, their optimizer moments, the two fake pools, and the
/// position counters.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar> {
    pub g: Generator<F>,
    pub f: Generator<F>,
    pub d_g_vi: Discriminator<F>,
    pub d_g_ir: Discriminator<F>,
    pub d_roi_vi: Discriminator<F>,
    pub d_roi_ir: Discriminator<F>,
    pub opt_g: AdamState<F>,
    pub opt_f: AdamState<F>,
    pub opt_d_g_vi: AdamState<F>,
    pub opt_d_g_ir: AdamState<F>,
    pub opt_d_roi_vi: AdamState<F>,
    pub opt_d_roi_ir: AdamState<F>,
    pub pool_vi: ImagePool<F>,
    pub pool_ir: ImagePool<F>,
    /// next epoch to run
    pub epoch: usize,
    /// global iteration counter
    pub iteration: u64,
}

impl<F: Scalar> TrainState<F> {
    pub fn init(setup: &TrainerSetup) -> Result<Self, TrainError> {
        setup.validate()?;
        let seed = setup.train.seed;
        let norm = setup.train.norm;
        let g = build_generator(&setup.generator, &mut stream(seed, &[tags::WEIGHT_INIT, 0]))?;
        let f = build_generator(&setup.generator, &mut stream(seed, &[tags::WEIGHT_INIT, 1]))?;
        let d_g_vi = build_patch_discriminator(
            &setup.discriminator,
            norm,
            &mut stream(seed, &[tags::WEIGHT_INIT, 2]),
        )?;
        let d_g_ir = build_patch_discriminator(
            &setup.discriminator,
            norm,
            &mut stream(seed, &[tags::WEIGHT_INIT, 3]),
        )?;
        let d_roi_vi = build_patch_discriminator(
            &setup.discriminator,
            norm,
            &mut stream(seed, &[tags::WEIGHT_INIT, 4]),
        )?;
        let d_roi_ir = build_patch_discriminator(
            &setup.discriminator,
            norm,
            &mut stream(seed, &[tags::WEIGHT_INIT, 5]),
        )?;
        let opt_g = AdamState::new(|cb| g.visit_params(&mut |p| cb(p)));
        let opt_f = AdamState::new(|cb| f.visit_params(&mut |p| cb(p)));
        let opt_d_g_vi = AdamState::new(|cb| d_g_vi.visit_params(&mut |p| cb(p)));
        let opt_d_g_ir = AdamState::new(|cb| d_g_ir.visit_params(&mut |p| cb(p)));
        let opt_d_roi_vi = AdamState::new(|cb| d_roi_vi.visit_params(&mut |p| cb(p)));
        let opt_d_roi_ir = AdamState::new(|cb| d_roi_ir.visit_params(&mut |p| cb(p)));
        Ok(TrainState {
            g,
            f,
            d_g_vi,
            d_g_ir,
            d_roi_vi,
            d_roi_ir,
            opt_g,
            opt_f,
            opt_d_g_vi,
            opt_d_g_ir,
            opt_d_roi_vi,
            opt_d_roi_ir,
            pool_vi: ImagePool::new(setup.train.replay_buffer, stream(seed, &[tags::POOL_VI, 0])),
            pool_ir: ImagePool::new(setup.train.replay_buffer, stream(seed, &[tags::POOL_IR, 0])),
            epoch: 0,
            iteration: 0,
        })
    }
}

fn d_update<F: Scalar>(
    d: &mut Discriminator<F>,
    opt: &mut AdamState<F>,
    real: &Batch<F>,
    fake: &Batch<F>,
    real_weights: Option<&[f64]>,
    fake_weights: Option<&[f64]>,
    kind: AdversarialKind,
    lr: f64,
    betas: (f64, f64),
) -> Result<f64, TrainError> {
    let (s_real, c_real) = d.forward_train(real)?;
    let (s_fake, c_fake) = d.forward_train(fake)?;
    let (value, d_real_seed, d_fake_seed) = d_loss(kind, &s_real, &s_fake, real_weights, fake_weights);
    let mut grads = d.zero_grads();
    let _ = d.backward(d_real_seed, &c_real, Some(&mut grads[..]));
    let _ = d.backward(d_fake_seed, &c_fake, Some(&mut grads[..]));
    opt.step(lr, betas.0, betas.1, &grads, |cb| {
        d.visit_params_mut(&mut |p| cb(p))
    });
    Ok(value)
}

/// One optimization step: generator update with critics frozen, then one
/// update per critic. Global critics see pool-mixed fakes; region critics
/// see current-batch patches.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    batch: &TrainBatch<F>,
    setup: &TrainerSetup,
    lr: f64,
) -> Result<LossReport, TrainError> {
    let cfg = &setup.train;
    let kind = cfg.adversarial;
    let betas = (cfg.adam_beta1, cfg.adam_beta2);
    let use_roi = cfg.weights.lambda_roi > 0.0;
    let mask = TermMask {
        adv_global: true,
        cyc: true,
        roi_cyc: use_roi,
        roi_adv: use_roi,
    };

    let step = generator_objective_with_grads(
        &mut state.g,
        &mut state.f,
        &mut state.d_g_vi,
        &mut state.d_g_ir,
        &mut state.d_roi_vi,
        &mut state.d_roi_ir,
        batch,
        &cfg.weights,
        kind,
        &setup.roi,
        mask,
    )?;
    state
        .opt_g
        .step(lr, betas.0, betas.1, &step.g_grads, |cb| {
            state.g.visit_params_mut(&mut |p| cb(p))
        });
    state
        .opt_f
        .step(lr, betas.0, betas.1, &step.f_grads, |cb| {
            state.f.visit_params_mut(&mut |p| cb(p))
        });

    // critic updates on detached fakes
    let fake_vi = state.pool_vi.query(&step.fake_vi);
    let d_g_vi_loss = d_update(
        &mut state.d_g_vi,
        &mut state.opt_d_g_vi,
        &batch.y,
        &fake_vi,
        None,
        None,
        kind,
        lr,
        betas,
    )?;
    let fake_ir = state.pool_ir.query(&step.fake_ir);
    let d_g_ir_loss = d_update(
        &mut state.d_g_ir,
        &mut state.opt_d_g_ir,
        &batch.x,
        &fake_ir,
        None,
        None,
        kind,
        lr,
        betas,
    )?;

    let (d_roi_vi_loss, d_roi_ir_loss) = if use_roi {
        let (real_vi, o_ry) = roi_pool_batch(&batch.y, &batch.y_boxes, &setup.roi)?;
        let (fake_vi_patches, o_fx) = roi_pool_batch(&step.fake_vi, &batch.x_boxes, &setup.roi)?;
        let w_ry = patch_weights(&o_ry, batch.y.dim().0);
        let w_fx = patch_weights(&o_fx, batch.x.dim().0);
        let vi = d_update(
            &mut state.d_roi_vi,
            &mut state.opt_d_roi_vi,
            &real_vi,
            &fake_vi_patches,
            Some(&w_ry),
            Some(&w_fx),
            kind,
            lr,
            betas,
        )?;
        let (real_ir, o_rx) = roi_pool_batch(&batch.x, &batch.x_boxes, &setup.roi)?;
        let (fake_ir_patches, o_fy) = roi_pool_batch(&step.fake_ir, &batch.y_boxes, &setup.roi)?;
        let w_rx = patch_weights(&o_rx, batch.x.dim().0);
        let w_fy = patch_weights(&o_fy, batch.y.dim().0);
        let ir = d_update(
            &mut state.d_roi_ir,
            &mut state.opt_d_roi_ir,
            &real_ir,
            &fake_ir_patches,
            Some(&w_rx),
            Some(&w_fy),
            kind,
            lr,
            betas,
        )?;
        (vi, ir)
    } else {
        (0.0, 0.0)
    };

    let report = LossReport::compose(
        step.terms.cyc,
        step.terms.adv_g_vi,
        step.terms.adv_g_ir,
        step.terms.roi_cyc,
        step.terms.roi_adv_vi,
        step.terms.roi_adv_ir,
        [d_g_vi_loss, d_g_ir_loss, d_roi_vi_loss, d_roi_ir_loss],
        &cfg.weights,
    );
    if let Some(term) = report.non_finite_term() {
        return Err(TrainError::NonFiniteLoss {
            term: term.to_string(),
            iteration: state.iteration,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// checkpointing

fn opt_tensors<F: Scalar>(name: &str, opt: &AdamState<F>, archive: &mut Archive<F>) {
    for (i, m) in opt.m.iter().enumerate() {
        archive.insert(format!("opt.{name}.m.{i:03}"), vec![m.len()], m.clone());
    }
    for (i, v) in opt.v.iter().enumerate() {
        archive.insert(format!("opt.{name}.v.{i:03}"), vec![v.len()], v.clone());
    }
}

fn load_opt<F: Scalar>(
    name: &str,
    template: &AdamState<F>,
    t: u64,
    archive: &Archive<F>,
) -> Result<AdamState<F>, TrainError> {
    let mut opt = template.clone();
    opt.t = t;
    for (i, m) in opt.m.iter_mut().enumerate() {
        let key = format!("opt.{name}.m.{i:03}");
        let data = archive
            .fetch(&key, &[m.len()])
            .map_err(TrainError::Config)?;
        m.copy_from_slice(&data);
    }
    for (i, v) in opt.v.iter_mut().enumerate() {
        let key = format!("opt.{name}.v.{i:03}");
        let data = archive
            .fetch(&key, &[v.len()])
            .map_err(TrainError::Config)?;
        v.copy_from_slice(&data);
    }
    Ok(opt)
}

fn pool_tensors<F: Scalar>(name: &str, pool: &ImagePool<F>, archive: &mut Archive<F>) {
    for (i, img) in pool.items().iter().enumerate() {
        archive.insert(
            format!("pool.{name}.{i:03}"),
            img.shape().to_vec(),
            img.as_slice().unwrap().to_vec(),
        );
    }
}

fn load_pool_items<F: Scalar>(
    name: &str,
    count: usize,
    archive: &Archive<F>,
) -> Result<Vec<Array3<F>>, TrainError> {
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let key = format!("pool.{name}.{i:03}");
        let (shape, data) = archive
            .get(&key)
            .ok_or_else(|| TrainError::Config(format!("checkpoint missing {key}")))?;
        let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.clone())
            .map_err(|e| TrainError::Config(e.to_string()))?;
        items.push(arr);
    }
    Ok(items)
}

/// Write the complete training state: all six networks (with norm running
/// buffers), all six optimizer moment sets, both fake pools, counters, and
/// the full setup in the header.
pub fn save_checkpoint<F: Scalar>(
    state: &TrainState<F>,
    setup: &TrainerSetup,
    path: &Path,
) -> Result<(), TrainError> {
    let header = serde_json::json!({
        "setup": setup,
        "epoch_next": state.epoch,
        "iteration": state.iteration,
        "opt_t": {
            "g": state.opt_g.t,
            "f": state.opt_f.t,
            "d_g_vi": state.opt_d_g_vi.t,
            "d_g_ir": state.opt_d_g_ir.t,
            "d_roi_vi": state.opt_d_roi_vi.t,
            "d_roi_ir": state.opt_d_roi_ir.t,
        },
        "pool_sizes": { "vi": state.pool_vi.len(), "ir": state.pool_ir.len() },
    });
    let mut archive = Archive::<F>::new(header);
    let mut tensors = Vec::new();
    state.g.collect_tensors("g.", &mut tensors);
    state.f.collect_tensors("f.", &mut tensors);
    state.d_g_vi.collect_tensors("d_g_vi.", &mut tensors);
    state.d_g_ir.collect_tensors("d_g_ir.", &mut tensors);
    state.d_roi_vi.collect_tensors("d_roi_vi.", &mut tensors);
    state.d_roi_ir.collect_tensors("d_roi_ir.", &mut tensors);
    archive.insert_all(tensors);
    opt_tensors("g", &state.opt_g, &mut archive);
    opt_tensors("f", &state.opt_f, &mut archive);
    opt_tensors("d_g_vi", &state.opt_d_g_vi, &mut archive);
    opt_tensors("d_g_ir", &state.opt_d_g_ir, &mut archive);
    opt_tensors("d_roi_vi", &state.opt_d_roi_vi, &mut archive);
    opt_tensors("d_roi_ir", &state.opt_d_roi_ir, &mut archive);
    pool_tensors("vi", &state.pool_vi, &mut archive);
    pool_tensors("ir", &state.pool_ir, &mut archive);
    archive.write(path)?;
    Ok(())
}

/// Rebuild the full training state from a checkpoint.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(TrainState<F>, TrainerSetup), TrainError> {
    let archive = Archive::<F>::read(path)?;
    let setup: TrainerSetup = serde_json::from_value(archive.header["setup"].clone())
        .map_err(|e| TrainError::Config(format!("bad checkpoint header: {e}")))?;
    let mut state = TrainState::<F>::init(&setup)?;
    let mut fetch = |name: &str, shape: &[usize]| archive.fetch(name, shape);
    state
        .g
        .load_tensors("g.", &mut fetch)
        .map_err(TrainError::Config)?;
    state
        .f
        .load_tensors("f.", &mut fetch)
        .map_err(TrainError::Config)?;
    state
        .d_g_vi
        .load_tensors("d_g_vi.", &mut fetch)
        .map_err(TrainError::Config)?;
    state
        .d_g_ir
        .load_tensors("d_g_ir.", &mut fetch)
        .map_err(TrainError::Config)?;
    state
        .d_roi_vi
        .load_tensors("d_roi_vi.", &mut fetch)
        .map_err(TrainError::Config)?;
    state
        .d_roi_ir
        .load_tensors("d_roi_ir.", &mut fetch)
        .map_err(TrainError::Config)?;

    let t_of = |k: &str| -> u64 { archive.header["opt_t"][k].as_u64().unwrap_or(0) };
    state.opt_g = load_opt("g", &state.opt_g, t_of("g"), &archive)?;
    state.opt_f = load_opt("f", &state.opt_f, t_of("f"), &archive)?;
    state.opt_d_g_vi = load_opt("d_g_vi", &state.opt_d_g_vi, t_of("d_g_vi"), &archive)?;
    state.opt_d_g_ir = load_opt("d_g_ir", &state.opt_d_g_ir, t_of("d_g_ir"), &archive)?;
    state.opt_d_roi_vi = load_opt("d_roi_vi", &state.opt_d_roi_vi, t_of("d_roi_vi"), &archive)?;
    state.opt_d_roi_ir = load_opt("d_roi_ir", &state.opt_d_roi_ir, t_of("d_roi_ir"), &archive)?;

    let vi_count = archive.header["pool_sizes"]["vi"].as_u64().unwrap_or(0) as usize;
    let ir_count = archive.header["pool_sizes"]["ir"].as_u64().unwrap_or(0) as usize;
    state
        .pool_vi
        .restore_items(load_pool_items("vi", vi_count, &archive)?);
    state
        .pool_ir
        .restore_items(load_pool_items("ir", ir_count, &archive)?);

    state.epoch = archive.header["epoch_next"].as_u64().unwrap_or(0) as usize;
    state.iteration = archive.header["iteration"].as_u64().unwrap_or(0);
    Ok((state, setup))
}

/// Load just the forward mapping (thermal -> visible) for inference.
pub fn load_generator<F: Scalar>(path: &Path) -> Result<(Generator<F>, TrainerSetup), TrainError> {
    let archive = Archive::<F>::read(path)?;
    let setup: TrainerSetup = serde_json::from_value(archive.header["setup"].clone())
        .map_err(|e| TrainError::Config(format!("bad checkpoint header: {e}")))?;
    let mut g = build_generator(
        &setup.generator,
        &mut stream(setup.train.seed, &[tags::WEIGHT_INIT, 0]),
    )?;
    g.load_tensors("g.", &mut |name: &str, shape: &[usize]| {
        archive.fetch(name, shape)
    })
    .map_err(TrainError::Config)?;
    Ok((g, setup))
}

// ---------------------------------------------------------------------------
// the training loop

/// Preloaded, preprocessed (but uncropped) training samples of one domain.
struct PreloadedSet<F: Scalar> {
    samples: Vec<Sample<F>>,
}

impl<F: Scalar> PreloadedSet<F> {
    fn load(manifest: &DatasetManifest, equalize: bool) -> Result<Self, TrainError> {
        let mut samples = Vec::with_capacity(manifest.len());
        for i in 0..manifest.len() {
            let mut s: Sample<F> = manifest.load_sample(i)?;
            if equalize {
                s = Sample {
                    image: histogram_equalize(&s.image)?,
                    ..s
                };
            }
            samples.push(s);
        }
        Ok(PreloadedSet { samples })
    }
}

/// Per-iteration progress callback: `(epoch, iteration_in_epoch, report)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, usize, &LossReport);

/// Run the full schedule over two unpaired manifests. Returns the final
/// checkpoint path. `resume` continues from an epoch-boundary checkpoint
/// written by the same setup.
pub fn train<F: Scalar>(
    setup: &TrainerSetup,
    ir_manifest: &Path,
    vi_manifest: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: Option<Progress<'_>>,
) -> Result<PathBuf, TrainError> {
    setup.validate()?;
    fs::create_dir_all(out_dir)?;
    let cfg = &setup.train;
    let seed = cfg.seed;

    let ir_set = DatasetManifest::read(ir_manifest)?;
    let vi_set = DatasetManifest::read(vi_manifest)?;
    if ir_set.is_empty() || vi_set.is_empty() {
        return Err(TrainError::Config("manifests must be non-empty".into()));
    }
    let ir: PreloadedSet<F> = PreloadedSet::load(&ir_set, cfg.equalize_ir)?;
    let vi: PreloadedSet<F> = PreloadedSet::load(&vi_set, false)?;

    let mut state = match resume {
        Some(path) => {
            let (state, saved_setup) = load_checkpoint::<F>(path)?;
            if &saved_setup != setup {
                return Err(TrainError::Config(
                    "checkpoint setup differs from the requested setup".into(),
                ));
            }
            state
        }
        None => TrainState::init(setup)?,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let continuing = state.iteration > 0 && metrics_path.exists();
    let mut metrics = if continuing {
        fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(
            f,
            "iteration,epoch,cyc,adv_g_vi,adv_g_ir,roi_cyc,roi_adv_vi,roi_adv_ir,total_g,total_d"
        )?;
        f
    };

    let epoch_len = ir.samples.len().max(vi.samples.len());
    let iters_per_epoch = epoch_len.div_ceil(cfg.batch_size);
    let total = cfg.total_epochs();
    let mut last_ckpt = None;

    for epoch in state.epoch..total {
        let lr = lr_at(epoch, cfg)?;
        state
            .pool_vi
            .reseed(stream(seed, &[tags::POOL_VI, epoch as u64 + 1]));
        state
            .pool_ir
            .reseed(stream(seed, &[tags::POOL_IR, epoch as u64 + 1]));
        let mut crop_rng = stream(seed, &[tags::CROP, epoch as u64]);

        let mut order_ir: Vec<usize> = (0..ir.samples.len()).collect();
        let mut order_vi: Vec<usize> = (0..vi.samples.len()).collect();
        shuffle(
            &mut stream(seed, &[tags::SHUFFLE_IR, epoch as u64]),
            &mut order_ir,
        );
        shuffle(
            &mut stream(seed, &[tags::SHUFFLE_VI, epoch as u64]),
            &mut order_vi,
        );

        for it in 0..iters_per_epoch {
            let lo = it * cfg.batch_size;
            let hi = ((it + 1) * cfg.batch_size).min(epoch_len);
            let mut ir_batch = Vec::with_capacity(hi - lo);
            let mut vi_batch = Vec::with_capacity(hi - lo);
            for j in lo..hi {
                let s = &ir.samples[order_ir[j % order_ir.len()]];
                let cropped = crop_with_object(s, cfg.crop_size, &mut crop_rng)?;
                ir_batch.push(Sample::new(
                    normalize(&cropped.image)?,
                    cropped.boxes,
                    Domain::Ir,
                    cropped.id,
                )?);
                let s = &vi.samples[order_vi[j % order_vi.len()]];
                let cropped = crop_with_object(s, cfg.crop_size, &mut crop_rng)?;
                vi_batch.push(Sample::new(
                    normalize(&cropped.image)?,
                    cropped.boxes,
                    Domain::Vi,
                    cropped.id,
                )?);
            }
            let batch = TrainBatch::from_samples(&ir_batch, &vi_batch)?;
            let report = train_step(&mut state, &batch, setup, lr)?;
            writeln!(
                metrics,
                "{},{},{},{},{},{},{},{},{},{}",
                state.iteration,
                epoch,
                report.cyc,
                report.adv_g_vi,
                report.adv_g_ir,
                report.roi_cyc,
                report.roi_adv_vi,
                report.roi_adv_ir,
                report.total_g,
                report.total_d
            )?;
            state.iteration += 1;
            if let Some(cb) = progress.as_deref_mut() {
                cb(epoch, it, &report);
            }
        }

        state.epoch = epoch + 1;
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == total {
            let path = out_dir.join(format!("checkpoint_{:04}.tvck", state.epoch));
            save_checkpoint(&state, setup, &path)?;
            last_ckpt = Some(path);
        }
    }

    metrics.sync_all()?;
    match last_ckpt {
        Some(p) => Ok(p),
        None => {
            // nothing left to run (zero-epoch schedule or an already-finished
            // resume): still emit a checkpoint of the current state
            let path = out_dir.join(format!("checkpoint_{:04}.tvck", state.epoch));
            save_checkpoint(&state, setup, &path)?;
            Ok(path)
        }
    }
}
