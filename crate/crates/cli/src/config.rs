//! Run configuration: one TOML file covering every stage, validated before
//! any work starts. Unknown keys are rejected. Flags override the file; the
//! root seed flows into every stage and is recorded next to the outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use thermovis_core::data::SceneSpec;
use thermovis_core::discriminator::DiscriminatorConfig;
use thermovis_core::evaluation::{BlobDetectorConfig, EvalConfig};
use thermovis_core::generator::GeneratorConfig;
use thermovis_core::roi::RoiPoolSpec;
use thermovis_core::trainer::{TrainConfig, TrainerSetup};

pub const OUT_ROOT_ENV: &str = "THERMOVIS_OUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// root seed; copied into the trainer and every derived stream
    pub seed: u64,
    /// base directory for outputs when a subcommand gets no explicit --out
    pub out_root: Option<PathBuf>,
    pub scene: SceneSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub roi: RoiPoolSpec,
    pub train: TrainConfig,
    pub detector: BlobDetectorConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>, out_root_flag: Option<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed_flag {
            cfg.seed = seed;
        }
        // precedence: flag > environment > config file
        if let Some(root) = out_root_flag {
            cfg.out_root = Some(root);
        } else if cfg.out_root.is_none() {
            if let Ok(env_root) = std::env::var(OUT_ROOT_ENV) {
                if !env_root.is_empty() {
                    cfg.out_root = Some(PathBuf::from(env_root));
                }
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene
            .validate()
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        self.setup().validate().map_err(|e| anyhow::anyhow!(e.to_string()))?;
        if self.eval.iou_threshold <= 0.0 || self.eval.iou_threshold > 1.0 {
            bail!("eval.iou_threshold must lie in (0, 1]");
        }
        if self.detector.contrast_threshold <= 0.0 {
            bail!("detector.contrast_threshold must be positive");
        }
        // training crops demand at least one object per image, so a scene
        // spec allowed to produce none is rejected before any work starts
        if self.scene.objects_min == 0 {
            bail!("scene.objects_min must be >= 1: training crops require at least one object");
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainerSetup {
        TrainerSetup {
            train: self.train.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            roi: self.roi,
        }
    }

    /// Resolve a subcommand output directory: explicit flag, else
    /// `<out_root>/<leaf>`.
    pub fn out_dir(&self, explicit: Option<PathBuf>, leaf: &str) -> Result<PathBuf> {
        match explicit {
            Some(p) => Ok(p),
            None => match &self.out_root {
                Some(root) => Ok(root.join(leaf)),
                None => bail!("no --out given and no out_root configured (flag, env {OUT_ROOT_ENV}, or config)"),
            },
        }
    }

    /// Write the resolved configuration next to the artifacts it produced.
    pub fn record(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)?;
        std::fs::write(dir.join("run_config.toml"), text)?;
        Ok(())
    }
}
