//! Command-line surface for the audio-to-face pipeline: synthetic data
//! generation, PCA fitting, training, fine-tuning, transfer sweeps, the
//! stability grid, evaluation, inference and the gradient-check suite.
//!
//! Exit codes: 0 ok, 2 config error, 3 numeric failure, 1 anything else.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use a2f::dataset::{self, synth, DataError, Split};
use a2f::ipca;
use a2f::model::{registry_digest, Checkpoint, DecoderArch, ModelConfig, ModelError};
use a2f::motion::AnnotationKind;
use a2f::numerics::gradcheck::{check_layers, GradCheckReport};
use a2f::training::{
    self, finetune, grid, gradcheck as e2e, TrainError, TrainPlan, Trainer,
};

#[derive(Parser)]
#[command(name = "a2f", version, about = "Unified multi-head audio-to-face pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key=value configuration file (model.* and plan keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set model.decoder_channels=128.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    warmup: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-convention dataset.
    Synth {
        /// Comma-separated kinds: vertex,blendshape,skeleton.
        #[arg(long, default_value = "vertex,blendshape,skeleton")]
        conventions: String,
        /// Identities per convention.
        #[arg(long, default_value_t = 4)]
        ids: usize,
        /// Sequences per convention.
        #[arg(long, default_value_t = 40)]
        seqs: usize,
        /// Seconds per sequence.
        #[arg(long, default_value_t = 3)]
        seconds: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Fit one PCA basis per vertex convention (training split only).
    PcaFit {
        #[arg(long)]
        manifest: PathBuf,
        /// Retained components.
        #[arg(long = "L", default_value_t = ipca::DEFAULT_COMPONENTS)]
        components: usize,
        #[arg(long, default_value_t = ipca::DEFAULT_BATCH_SIZE)]
        batch: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train the unified model (decoder warm-up, then joint).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from <out>/last.utkr.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Fine-tune a checkpoint on one dataset it already knows.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        convention: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Transfer the encoder to an unseen annotation across data fractions.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated fractions of the training set, e.g. 1,0.5,0.25.
        #[arg(long, default_value = "1,0.5,0.25")]
        fractions: String,
        /// Also train a from-scratch control arm at each fraction.
        #[arg(long)]
        scratch_control: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Tune on a single sequence, validating on the same identity.
    Oneshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sequence: String,
        /// decoder_only or all_but_frontend.
        #[arg(long, default_value = "decoder_only")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Stability grid over decoder channels/arch and PCA/DW toggles.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "64,128,256,512")]
        channels: String,
        #[arg(long, default_value = "tcn")]
        archs: String,
        /// on, off or both.
        #[arg(long, default_value = "on")]
        pca: String,
        #[arg(long, default_value = "on")]
        dw: String,
        #[arg(long, default_value_t = 20)]
        epochs: u32,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Drive one audio clip through a head and write the motion files.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A2FA or 16-bit PCM mono WAV.
        #[arg(long)]
        audio: PathBuf,
        /// Integer identity label or "pivot".
        #[arg(long)]
        identity: String,
        #[arg(long)]
        convention: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the gradient suite; nonzero exit on any failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

// ── error / exit-code mapping ────────────────────────────────────────────

enum CliError {
    Config(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Other(m) => m,
        }
    }
}

fn classify_model(e: &ModelError, msg: String) -> CliError {
    match e {
        ModelError::Config(_)
        | ModelError::UnknownConvention(_)
        | ModelError::UnknownIdentity(_, _)
        | ModelError::MissingBasis(_)
        | ModelError::AudioTooShort { .. } => CliError::Config(msg),
        _ => CliError::Other(msg),
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match &e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(msg),
            TrainError::Config(_) | TrainError::Data(_) | TrainError::Metrics(_) => {
                CliError::Config(msg)
            }
            TrainError::Model(m) => classify_model(m, msg),
            TrainError::Pca(_) => CliError::Numeric(msg),
            TrainError::Numerics(n) => match n {
                a2f::numerics::NumericsError::NonFiniteGrad(_) => CliError::Numeric(msg),
                _ => CliError::Other(msg),
            },
            _ => CliError::Other(msg),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        classify_model(&e, e.to_string())
    }
}

impl From<ipca::PcaError> for CliError {
    fn from(e: ipca::PcaError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<a2f::motion::MotionError> for CliError {
    fn from(e: a2f::motion::MotionError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

// ── run configuration ────────────────────────────────────────────────────

/// Model config + training plan + pipeline knobs, every field overridable
/// by `--set key=value`. Unknown keys are rejected by name.
#[derive(Clone)]
struct RunConfig {
    model: ModelConfig,
    plan: TrainPlan,
    pca_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), plan: TrainPlan::default(), pca_batch: 64 }
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |k: &str, v: &str| CliError::Config(format!("bad value `{v}` for key `{k}`"));
        if let Some(model_key) = key.strip_prefix("model.") {
            return self.model.set(model_key, value).map_err(CliError::from);
        }
        match key {
            "epochs" => self.plan.total_epochs = value.parse().map_err(|_| bad(key, value))?,
            "warmup_epochs" => {
                self.plan.warmup_epochs = value.parse().map_err(|_| bad(key, value))?
            }
            "lr" => self.plan.lr = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.plan.seed = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => self.plan.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "alpha" => {
                self.plan.loss_weights.alpha = value.parse().map_err(|_| bad(key, value))?
            }
            "beta" => self.plan.loss_weights.beta = value.parse().map_err(|_| bad(key, value))?,
            "pca_batch" => self.pca_batch = value.parse().map_err(|_| bad(key, value))?,
            other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.model.to_text().lines() {
            out.push_str("model.");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&format!(
            "epochs={}\nwarmup_epochs={}\nlr={:?}\nseed={}\nbatch_size={}\nalpha={:?}\nbeta={:?}\npca_batch={}\n",
            self.plan.total_epochs,
            self.plan.warmup_epochs,
            self.plan.lr,
            self.plan.seed,
            self.plan.batch_size,
            self.plan.loss_weights.alpha,
            self.plan.loss_weights.beta,
            self.pca_batch
        ));
        out
    }

    fn assemble(args: &ConfigArgs) -> Result<Self, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &args.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            for (no, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Config(format!("{}:{}: expected key=value", path.display(), no + 1))
                })?;
                config.set(k.trim(), v.trim())?;
            }
        }
        for kv in &args.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set needs KEY=VALUE, got `{kv}`")))?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(epochs) = args.epochs {
            config.plan.total_epochs = epochs;
            // Keep the desk default ratio unless warm-up was pinned.
            if args.warmup.is_none() {
                config.plan.warmup_epochs = (epochs / 10).max(1).min(epochs);
            }
        }
        if let Some(warmup) = args.warmup {
            config.plan.warmup_epochs = warmup;
        }
        if let Some(lr) = args.lr {
            config.plan.lr = lr;
        }
        if let Some(seed) = args.seed {
            config.plan.seed = seed;
        }
        if let Some(batch) = args.batch {
            config.plan.batch_size = batch;
        }
        Ok(config)
    }
}

/// Resolve the run directory: explicit flag, or $A2F_RUN_ROOT/<name>.
fn resolve_out(out: Option<PathBuf>, default_name: &str) -> Result<PathBuf, CliError> {
    if let Some(p) = out {
        return Ok(p);
    }
    match std::env::var_os("A2F_RUN_ROOT") {
        Some(root) => Ok(PathBuf::from(root).join(default_name)),
        None => Err(CliError::Config(
            "no --out given and A2F_RUN_ROOT is not set".to_string(),
        )),
    }
}

/// Run directories are append-only; reusing a non-empty one needs --force.
fn claim_dir(path: &Path, force: bool, resuming: bool) -> Result<(), CliError> {
    if path.exists() {
        let occupied = std::fs::read_dir(path)
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if occupied && !force && !resuming {
            return Err(CliError::Config(format!(
                "output directory {} is not empty; pass --force to reuse it",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::parse(s).ok_or_else(|| CliError::Config(format!("unknown split `{s}`")))
}

// ── command handlers ─────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { conventions, ids, seqs, seconds, seed, sample_rate, out, force } => {
            let out = resolve_out(out, "synth")?;
            claim_dir(&out, force, false)?;
            let kinds: Result<Vec<AnnotationKind>, CliError> = conventions
                .split(',')
                .map(|k| {
                    AnnotationKind::parse(k.trim()).ok_or_else(|| {
                        CliError::Config(format!("unknown annotation kind `{k}`"))
                    })
                })
                .collect();
            let spec = synth::SynthSpec {
                kinds: kinds?,
                identities_per_convention: ids,
                sequences_per_convention: seqs,
                seconds,
                seed,
                sample_rate,
            };
            let (manifest, warnings) = synth::generate_synthetic(&spec, &out)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "wrote {} records across {} conventions to {}",
                manifest.records.len(),
                manifest.conventions.len(),
                out.display()
            );
            Ok(())
        }
        Command::PcaFit { manifest, components, batch, seed, out, force } => {
            let out = resolve_out(out, "pca")?;
            claim_dir(&out, force, false)?;
            let m = dataset::load_manifest(&manifest)?;
            if !m.conventions.iter().any(|c| c.kind == AnnotationKind::Vertex) {
                println!("no vertex conventions in the manifest; nothing to fit");
                return Ok(());
            }
            let bases = training::fit_train_bases(&m, Some(components), batch, seed)?;
            for (id, basis) in &bases {
                let mut c = a2f::container::Container::new(*b"UTKR", 1);
                let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
                c.put_f32(&format!("pca.{id}.mean"), vec![basis.dim as u64], &f32s(&basis.mean));
                c.put_f32(
                    &format!("pca.{id}.components"),
                    vec![basis.retained as u64, basis.dim as u64],
                    &f32s(&basis.components),
                );
                c.put_f32(
                    &format!("pca.{id}.variance"),
                    vec![basis.retained as u64],
                    &f32s(&basis.explained_variance),
                );
                let path = out.join(format!("pca_{id}.utkr"));
                c.write_to(&path)
                    .map_err(|e| CliError::Other(e.to_string()))?;
                println!(
                    "convention {id}: {} components over {} frames -> {}",
                    basis.retained,
                    basis.frames_seen,
                    path.display()
                );
            }
            Ok(())
        }
        Command::Train { manifest, out, cfg, resume, force } => {
            let out = resolve_out(out, "train")?;
            claim_dir(&out, force, resume)?;
            let config = RunConfig::assemble(&cfg)?;
            let m = dataset::load_manifest(&manifest)?;
            let last = out.join("last.utkr");
            let mut trainer = if resume && last.exists() {
                let ckpt = Checkpoint::load(&last)?;
                let data = training::prepare_dataset(&m, &ckpt.registry, &ckpt.bases)?;
                let mut t = Trainer::new(ckpt, config.plan.clone(), data)?;
                let curves = out.join("curves.csv");
                if curves.exists() {
                    t.load_curves(&curves)?;
                }
                println!("resuming from epoch {}", t.checkpoint.epoch);
                t
            } else {
                training::build_trainer(&m, config.model.clone(), config.plan.clone(), config.pca_batch)?
            };
            write_text(&out.join("config.txt"), &config.to_text())?;
            trainer.run(Some(&out))?;
            let row = trainer.curves.last().expect("at least one epoch");
            println!(
                "trained to epoch {}: train_loss {:.6e}, val LVE {:.6e} (m^2)",
                row.epoch, row.train_loss, row.val_lve
            );
            println!("checkpoint: {}", out.join("final.utkr").display());
            Ok(())
        }
        Command::Finetune { checkpoint, manifest, convention, out, cfg, force } => {
            let out = resolve_out(out, "finetune")?;
            claim_dir(&out, force, false)?;
            let config = RunConfig::assemble(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = dataset::load_manifest(&manifest)?;
            write_text(&out.join("config.txt"), &config.to_text())?;
            let trainer =
                finetune::finetune_seen(ckpt, &m, convention, config.plan.clone(), Some(&out))?;
            let row = trainer.curves.last().expect("at least one epoch");
            println!(
                "fine-tuned convention {convention} to epoch {}: val LVE {:.6e}",
                row.epoch, row.val_lve
            );
            Ok(())
        }
        Command::Transfer { checkpoint, manifest, fractions, scratch_control, out, cfg, force } => {
            let out = resolve_out(out, "transfer")?;
            claim_dir(&out, force, false)?;
            let config = RunConfig::assemble(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = dataset::load_manifest(&manifest)?;
            let fracs: Result<Vec<f64>, CliError> = fractions
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("bad fraction `{f}`")))
                })
                .collect();
            write_text(&out.join("config.txt"), &config.to_text())?;
            let outcomes = finetune::transfer_sweep(
                &ckpt,
                &m,
                &fracs?,
                scratch_control,
                &config.plan,
                config.pca_batch,
            )?;
            write_text(&out.join("sweep.csv"), &finetune::sweep_csv(&outcomes))?;
            for o in &outcomes {
                println!("fraction {:>5}: {:>10} arm val LVE {:.6e}", o.fraction, o.arm.as_str(), o.val_lve);
            }
            println!("sweep: {}", out.join("sweep.csv").display());
            Ok(())
        }
        Command::Oneshot { checkpoint, manifest, sequence, mode, out, cfg, force } => {
            let out = resolve_out(out, "oneshot")?;
            claim_dir(&out, force, false)?;
            let config = RunConfig::assemble(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = dataset::load_manifest(&manifest)?;
            let mode = match mode.as_str() {
                "decoder_only" => finetune::OneShotMode::DecoderOnly,
                "all_but_frontend" => finetune::OneShotMode::AllButFrontend,
                other => {
                    return Err(CliError::Config(format!("unknown one-shot mode `{other}`")))
                }
            };
            write_text(&out.join("config.txt"), &config.to_text())?;
            let report = finetune::one_shot_tune(ckpt, &m, &sequence, mode, config.plan.clone())?;
            report.checkpoint.save(&out.join("final.utkr"))?;
            println!(
                "one-shot ({}): best val LVE {:.6e} m^2, best val LVD {:.4} mm (initial LVE {:.6e})",
                report.mode.as_str(),
                report.best_val_lve,
                report.best_val_lvd * 1e3,
                report.initial_val_lve
            );
            Ok(())
        }
        Command::Grid { manifest, channels, archs, pca, dw, epochs, workers, seed, out, force } => {
            let out = resolve_out(out, "grid")?;
            claim_dir(&out, force, false)?;
            let m = dataset::load_manifest(&manifest)?;
            let channels: Result<Vec<usize>, CliError> = channels
                .split(',')
                .map(|c| {
                    c.trim().parse().map_err(|_| CliError::Config(format!("bad channels `{c}`")))
                })
                .collect();
            let archs: Result<Vec<DecoderArch>, CliError> = archs
                .split(',')
                .map(|a| {
                    DecoderArch::parse(a.trim())
                        .ok_or_else(|| CliError::Config(format!("unknown arch `{a}`")))
                })
                .collect();
            let toggles = |v: &str| -> Result<Vec<bool>, CliError> {
                match v {
                    "on" => Ok(vec![true]),
                    "off" => Ok(vec![false]),
                    "both" => Ok(vec![true, false]),
                    other => Err(CliError::Config(format!("expected on/off/both, got `{other}`"))),
                }
            };
            let spec = grid::GridSpec {
                channels: channels?,
                archs: archs?,
                pca: toggles(&pca)?,
                dw: toggles(&dw)?,
                epochs,
                workers,
            };
            let label = manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".to_string());
            let plan = TrainPlan { seed, ..TrainPlan::default() };
            let cells = grid::stability_grid(&m, &ModelConfig::default(), &plan, &spec, &label)?;
            grid::write_grid_csv(&cells, &out.join("grid.csv"))?;
            for c in &cells {
                println!(
                    "{} ch{} pca={} dw={}: {} (val LVE {:.6e}, baseline {:.6e})",
                    c.arch.as_str(),
                    c.channels,
                    c.pca,
                    c.dw,
                    c.status.as_str(),
                    c.val_lve,
                    c.baseline_lve
                );
            }
            println!("grid: {}", out.join("grid.csv").display());
            Ok(())
        }
        Command::Eval { checkpoint, manifest, split, out, force } => {
            let out = resolve_out(out, "eval")?;
            claim_dir(&out, force, false)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = dataset::load_manifest(&manifest)?;
            if registry_digest(&m.conventions) != ckpt.digest() {
                return Err(CliError::Config(
                    "checkpoint registry digest does not match the manifest conventions; \
                     retrain the model or convert the dataset to the checkpoint's conventions"
                        .to_string(),
                ));
            }
            let split = parse_split(&split)?;
            let data = training::prepare_dataset(&m, &ckpt.registry, &ckpt.bases)?;
            let reports = training::evaluate(&ckpt, &data, split)?;
            let mut csv = String::from(a2f::metrics::MetricsReport::CSV_HEADER);
            for r in &reports {
                csv.push_str(&r.to_csv_rows());
                write_text(&out.join(format!("std_map_{}.csv", r.convention)), &r.std_map_csv())?;
                println!(
                    "convention {}: LVE {:.6e} m^2, MVE {:.6e} m, UFVE {:.6e} m, FDD {:+.6e} m, LVD {:.4} mm",
                    r.convention, r.lve, r.mve, r.ufve, r.fdd, r.lvd * 1e3
                );
            }
            write_text(&out.join("report.csv"), &csv)?;
            println!("report: {}", out.join("report.csv").display());
            Ok(())
        }
        Command::Infer { checkpoint, audio, identity, convention, out, force } => {
            let out = resolve_out(out, "infer")?;
            claim_dir(&out, force, false)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let clip = dataset::files::read_audio(&audio)?;
            if clip.sample_rate != ckpt.config.sample_rate {
                return Err(CliError::Config(format!(
                    "audio sample rate {} != model sample rate {}",
                    clip.sample_rate, ckpt.config.sample_rate
                )));
            }
            let label = if identity == "pivot" {
                ckpt.pivot_identity()
            } else {
                identity
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad identity `{identity}`")))?
            };
            let conv = ckpt
                .convention(convention)
                .ok_or(ModelError::UnknownConvention(convention))?
                .clone();
            let mut g = a2f::numerics::Graph::<f32>::new();
            let fwd = a2f::model::forward(
                &mut g,
                &ckpt.params,
                &ckpt.config,
                &ckpt.registry,
                &ckpt.bases,
                &clip.samples,
                label,
                convention,
                ckpt.identity_rows,
                a2f::model::ForwardMode::Infer,
            )?;
            let native = g.tensor(fwd.native);
            let frames = native.rows();
            // Native motion in the convention's stored representation:
            // reconstructed displacements for PCA heads, parameters otherwise.
            let native_motion = if conv.uses_pca() {
                let basis = &ckpt.bases[&convention];
                let mut data = Vec::with_capacity(frames * basis.dim);
                for t in 0..frames {
                    let coords: Vec<f64> = native.row(t).iter().map(|&v| v as f64).collect();
                    data.extend(basis.reconstruct(&coords)?.into_iter().map(|v| v as f32));
                }
                a2f::numerics::Tensor::new(vec![frames, basis.dim], data)
                    .expect("sized from basis")
            } else {
                native.clone()
            };
            let motion_seq = a2f::motion::MotionSequence {
                convention_id: convention,
                fps: conv.fps,
                frames: native_motion,
                identity: label,
            };
            dataset::files::write_motion(&out.join("motion.a2fm"), &motion_seq)?;
            let scaled = g.tensor(fwd.vertices);
            let report_verts = a2f::motion::scale_vertices(&scaled, 1.0 / conv.scale)?;
            if !report_verts.all_finite() {
                return Err(CliError::Numeric("inference produced non-finite vertices".into()));
            }
            let verts_seq = a2f::motion::MotionSequence {
                convention_id: convention,
                fps: conv.fps,
                frames: report_verts,
                identity: label,
            };
            dataset::files::write_motion(&out.join("vertices.a2fm"), &verts_seq)?;
            println!(
                "wrote {frames} frames at {} fps to {} (motion.a2fm native, vertices.a2fm derived)",
                conv.fps,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let reports = check_layers(seeds, None);
            let mut failed = false;
            println!("{:<26} {:>6} {:>14} {:>10}  result", "layer", "cases", "max_rel_err", "tol");
            for r in &reports {
                print_report(r, &mut failed);
            }
            let mut worst_e2e = 0.0f64;
            for seed in 0..seeds {
                let err = e2e::end_to_end_gradient_check(seed)?;
                worst_e2e = worst_e2e.max(err);
            }
            let e2e_pass = worst_e2e < e2e::END_TO_END_TOLERANCE;
            println!(
                "{:<26} {:>6} {:>14.3e} {:>10.0e}  {}",
                "end_to_end_tiny_model",
                seeds,
                worst_e2e,
                e2e::END_TO_END_TOLERANCE,
                if e2e_pass { "pass" } else { "FAIL" }
            );
            if !e2e_pass {
                failed = true;
            }
            if failed {
                return Err(CliError::Numeric("gradient checks failed".to_string()));
            }
            Ok(())
        }
    }
}

fn print_report(r: &GradCheckReport, failed: &mut bool) {
    let ok = r.passed();
    if !ok {
        *failed = true;
    }
    println!(
        "{:<26} {:>6} {:>14.3e} {:>10.0e}  {}",
        r.name,
        r.cases,
        r.max_rel_err,
        r.tolerance,
        if ok { "pass" } else { "FAIL" }
    );
}
