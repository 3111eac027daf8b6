//! Pipeline entry point: scene synthesis, training, translation,
//! detection-proxy evaluation, and PR-curve plotting.
//!
//! Exit codes: 0 success, 2 configuration/usage errors, 3 missing input
//! files, 1 runtime failures.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::RunConfig;
use thermovis_core::data::{save_png, synth_scene, DatasetManifest, Domain, ManifestEntry, Sample};
use thermovis_core::evaluation::{evaluate_manifest, translate_one, BlobDetector};
use thermovis_core::rng::{stream, tags};
use thermovis_core::trainer::{load_generator, train};

#[derive(Parser)]
#[command(
    name = "thermovis",
    version,
    about = "Unpaired thermal-to-visible image translation: synthesize scenes, train the cycle-consistent translator, translate, and score translations with a detection proxy."
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// root seed override (wins over the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output root override (wins over config and THERMOVIS_OUT_ROOT)
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-domain dataset with box annotations
    SynthData {
        /// images per domain
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// output directory (default <out_root>/data)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the translation networks on two unpaired manifests
    Train {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        /// run directory for checkpoints and metrics (default <out_root>/train)
        #[arg(long)]
        out: Option<PathBuf>,
        /// continue from an epoch-boundary checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every manifest image full-size through a checkpoint
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// output directory (default <out_root>/translated)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the detector over (translated) images and report average precision
    Evaluate {
        /// required unless --raw
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// score raw images instead of translations
        #[arg(long)]
        raw: bool,
        /// output directory (default <out_root>/eval)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlay one or more evaluation reports in a single PR figure
    PlotPr {
        /// report.json produced by evaluate; repeatable
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        /// optional label per report, same order
        #[arg(long = "label")]
        labels: Vec<String>,
        /// output SVG path
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Config(anyhow::Error),
    MissingInput(PathBuf),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    fn report(&self) {
        match self {
            CliError::Config(e) => eprintln!("configuration error: {e:#}"),
            CliError::MissingInput(p) => eprintln!("missing input: {}", p.display()),
            CliError::Runtime(e) => eprintln!("error: {e:#}"),
        }
    }
}

fn require_exists(p: &Path) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(p.to_path_buf()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::load(cli.config.as_deref(), cli.seed, cli.out_root.clone()) {
        Ok(c) => c,
        Err(e) => {
            CliError::Config(e).report();
            return ExitCode::from(2);
        }
    };
    let result = match cli.cmd {
        Cmd::SynthData { count, out } => cmd_synth_data(&cfg, count, out),
        Cmd::Train {
            ir,
            vi,
            out,
            resume,
        } => cmd_train(&cfg, &ir, &vi, out, resume),
        Cmd::Translate {
            checkpoint,
            manifest,
            out,
        } => cmd_translate(&cfg, &checkpoint, &manifest, out),
        Cmd::Evaluate {
            checkpoint,
            manifest,
            raw,
            out,
        } => cmd_evaluate(&cfg, checkpoint, &manifest, raw, out),
        Cmd::PlotPr {
            reports,
            labels,
            out,
        } => cmd_plot_pr(&reports, &labels, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.code())
        }
    }
}

fn cmd_synth_data(cfg: &RunConfig, count: usize, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = cfg.out_dir(out, "data").map_err(CliError::Config)?;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(CliError::Runtime)?;
    cfg.record(&out).map_err(CliError::Runtime)?;
    for (domain, tag, stem) in [(Domain::Ir, 1u64, "ir"), (Domain::Vi, 2u64, "vi")] {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count as u64 {
            let sample: Sample<f32> = synth_scene(
                &mut stream(cfg.seed, &[tags::SCENE, tag, i]),
                domain,
                &cfg.scene,
                format!("{stem}_{i:05}"),
            )
            .map_err(|e| CliError::Runtime(e.into()))?;
            let file = format!("{stem}_{i:05}.png");
            save_png(&sample.image, &out.join(&file)).map_err(|e| CliError::Runtime(e.into()))?;
            entries.push(ManifestEntry {
                id: sample.id,
                file,
                domain,
                boxes: sample.boxes,
            });
        }
        let manifest =
            DatasetManifest::new(&out, entries).map_err(|e| CliError::Runtime(e.into()))?;
        manifest
            .write(&out.join(format!("{stem}.jsonl")))
            .map_err(|e| CliError::Runtime(e.into()))?;
        println!("{domain}: {count} samples -> {}", out.join(format!("{stem}.jsonl")).display());
    }
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    ir: &Path,
    vi: &Path,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    require_exists(ir)?;
    require_exists(vi)?;
    if let Some(r) = &resume {
        require_exists(r)?;
    }
    let out = cfg.out_dir(out, "train").map_err(CliError::Config)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.into()))?;
    cfg.record(&out).map_err(CliError::Runtime)?;
    let setup = cfg.setup();
    let total = setup.train.total_epochs();
    let mut last_epoch = usize::MAX;
    let mut progress = |epoch: usize, it: usize, report: &thermovis_core::losses::LossReport| {
        if epoch != last_epoch && it == 0 {
            last_epoch = epoch;
            println!(
                "epoch {epoch:>3}/{total}: total_g {:.4} total_d {:.4} cyc {:.4}",
                report.total_g, report.total_d, report.cyc
            );
        }
    };
    let ckpt = train::<f32>(&setup, ir, vi, &out, resume.as_deref(), Some(&mut progress))
        .map_err(|e| CliError::Runtime(e.into()))?;
    println!("final checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_translate(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    require_exists(checkpoint)?;
    require_exists(manifest)?;
    let out = cfg.out_dir(out, "translated").map_err(CliError::Config)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.into()))?;
    cfg.record(&out).map_err(CliError::Runtime)?;
    let (generator, _) =
        load_generator::<f32>(checkpoint).map_err(|e| CliError::Runtime(e.into()))?;
    let set = DatasetManifest::read(manifest).map_err(|e| CliError::Runtime(e.into()))?;
    let mut written = 0usize;
    let mut skipped = 0usize;
    for i in 0..set.len() {
        let sample: Sample<f32> = match set.load_sample(i) {
            Ok(s) => s,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        match translate_one(&generator, &sample.image, cfg.eval.equalize_ir) {
            Ok(translated) => {
                let file = format!("{}.png", sample.id);
                save_png(&translated, &out.join(&file))
                    .map_err(|e| CliError::Runtime(e.into()))?;
                written += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    println!("translated {written} images ({skipped} skipped) -> {}", out.display());
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    manifest: &Path,
    raw: bool,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    require_exists(manifest)?;
    if !raw && checkpoint.is_none() {
        return Err(CliError::Config(anyhow::anyhow!(
            "evaluate needs --checkpoint unless --raw is given"
        )));
    }
    let out = cfg.out_dir(out, "eval").map_err(CliError::Config)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.into()))?;
    cfg.record(&out).map_err(CliError::Runtime)?;
    let generator = match (&checkpoint, raw) {
        (Some(p), false) => {
            require_exists(p)?;
            Some(
                load_generator::<f32>(p)
                    .map_err(|e| CliError::Runtime(e.into()))?
                    .0,
            )
        }
        _ => None,
    };
    let set = DatasetManifest::read(manifest).map_err(|e| CliError::Runtime(e.into()))?;
    let detector = BlobDetector::new(cfg.detector);
    let hash_input = serde_json::json!({
        "seed": cfg.seed,
        "detector": cfg.detector,
        "eval": cfg.eval,
        "checkpoint": checkpoint.as_ref().map(|p| p.display().to_string()),
        "raw": raw,
    });
    let outcome = evaluate_manifest(
        generator.as_ref(),
        &set,
        &detector,
        &cfg.eval,
        &out,
        &hash_input,
    )
    .map_err(|e| CliError::Runtime(e.into()))?;
    println!(
        "AP {:.4} over {} images ({} ground truths, {} detections, {} skipped)",
        outcome.report.ap,
        outcome.report.n_images,
        outcome.report.n_gt,
        outcome.report.n_detections,
        outcome.report.n_skipped
    );
    println!("report: {}", outcome.report_path.display());
    Ok(())
}

fn cmd_plot_pr(reports: &[PathBuf], labels: &[String], out: &Path) -> Result<(), CliError> {
    let mut curves = Vec::new();
    for (i, p) in reports.iter().enumerate() {
        require_exists(p)?;
        let mut c = plot::load_report_curve(p).map_err(CliError::Runtime)?;
        if let Some(label) = labels.get(i) {
            c.label = label.clone();
        }
        curves.push(c);
    }
    let svg = plot::render_pr_svg(&curves);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.into()))?;
        }
    }
    std::fs::write(out, svg).map_err(|e| CliError::Runtime(e.into()))?;
    println!("wrote {}", out.display());
    Ok(())
}
