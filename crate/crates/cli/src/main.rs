//! Command-line driver for the weakly supervised temporal action
//! localization pipelines: dataset synthesis, training, evaluation,
//! gradient checking and per-video localization dumps.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use wtal_core::data::{generate_synthetic, SyntheticSpec};
use wtal_core::error::Error;
use wtal_core::losses::DeltaMode;
use wtal_core::model::{FusionMode, RoleMode};
use wtal_core::pipeline::{
    gradcheck_model, load_run_config, localize_dump, run_eval, run_train, GradcheckSettings,
    RunConfig,
};

#[derive(Parser)]
#[command(
    name = "wtal",
    about = "Weakly supervised temporal action localization on two-modality snippet features",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config overrides shared by train/eval. Ablations are plain overrides of
/// the same config file, not separate code paths.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Manifest path override.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint path override.
    #[arg(long)]
    checkpoint_path: Option<PathBuf>,
    /// Report directory override.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Training steps override.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate override.
    #[arg(long)]
    lr: Option<f64>,
    /// Snippets sampled per training video.
    #[arg(long)]
    snippets: Option<usize>,
    /// Fusion ablation: ccm | add | concat | se.
    #[arg(long)]
    fusion: Option<String>,
    /// Mutual-learning metric ablation: mse | mae | kl | js.
    #[arg(long)]
    delta: Option<String>,
    /// Gate role ablation: global_local | local_global | local_local.
    #[arg(long)]
    roles: Option<String>,
    /// Disable loss terms (repeat or comma-separate): mil,oppo,ml,cas,norm.
    #[arg(long = "loss-off", value_delimiter = ',')]
    loss_off: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        if let Some(p) = &self.manifest {
            cfg.paths.manifest = p.clone();
        }
        if let Some(p) = &self.checkpoint_path {
            cfg.paths.checkpoint = p.clone();
        }
        if let Some(p) = &self.report_dir {
            cfg.paths.report_dir = p.clone();
        }
        if let Some(v) = self.max_steps {
            cfg.train.max_steps = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.snippets {
            cfg.train.snippets_per_video = v;
        }
        if let Some(s) = &self.fusion {
            cfg.model.fusion = FusionMode::from_str(s)?;
        }
        if let Some(s) = &self.delta {
            cfg.loss.delta = DeltaMode::from_str(s)?;
        }
        if let Some(s) = &self.roles {
            cfg.model.roles = RoleMode::from_str(s)?;
        }
        for term in &self.loss_off {
            cfg.loss.enabled.disable(term)?;
        }
        cfg.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset with planted actions and
    /// planted cross-modal distractors.
    Synth {
        /// Path to a SyntheticSpec JSON file.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for features and manifests.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint, its metadata sidecar and a
    /// JSON-lines loss log.
    Train {
        /// Run config JSON.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the test split; writes report.json,
    /// map_table.csv and proposals.json.
    Eval {
        /// Run config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate (defaults to the config's path).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Verify tape gradients of the full objective against central finite
    /// differences on a random model.
    Gradcheck {
        /// Feature channels per modality.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Foreground classes.
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Snippets per video.
        #[arg(long, default_value_t = 20)]
        t: usize,
        /// Videos in the probe batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Same-class pairs in the probe batch.
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        /// Hidden width of the conv stacks.
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        /// Dropout probability (active, with a fixed mask seed).
        #[arg(long, default_value_t = 0.7)]
        dropout: f64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        /// Pass tolerance on the relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Mutual-learning metric: mse | mae | kl | js.
        #[arg(long, default_value = "mse")]
        delta: String,
    },
    /// Dump one video's attention tracks and proposals as JSON.
    Localize {
        /// Run config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to load (defaults to the config's path).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Video id from the manifest.
        #[arg(long)]
        video: String,
        /// Frames per second; adds second-unit fields to proposals.
        #[arg(long)]
        fps: Option<f64>,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Label(_)
        | Error::Shape { .. }
        | Error::Contract { .. }
        | Error::Domain { .. }
        | Error::EmptySequence(_) => 2,
        Error::Io { .. } | Error::Json { .. } | Error::Decode { .. } | Error::Manifest { .. } => 3,
        Error::Compat(_) => 4,
        Error::NonFinite { .. } | Error::Determinism(_) => 5,
    }
}

fn load_synth_spec(path: &PathBuf) -> Result<SyntheticSpec, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        detail: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = load_synth_spec(&spec)?;
            let summary = generate_synthetic(&spec, &out)?;
            println!("videos: {}", summary.videos);
            println!("classes: {}", summary.classes);
            println!("segments: {}", summary.segments);
            println!("manifest hash: {}", summary.manifest_hash);
            println!(
                "train manifest: {}",
                out.join("manifest.train.json").display()
            );
            println!(
                "test manifest: {}",
                out.join("manifest.test.json").display()
            );
        }
        Command::Train { config, overrides } => {
            let mut cfg = load_run_config(&config)?;
            overrides.apply(&mut cfg)?;
            let summary = run_train(&cfg)?;
            println!("steps: {}", summary.steps);
            println!("config hash: {}", summary.config_hash);
            if let Some(total) = summary.final_total {
                println!("final total loss: {total}");
            }
            if summary.degenerate_pairs > 0 {
                eprintln!(
                    "warning: {} degenerate co-activity cosine evaluations",
                    summary.degenerate_pairs
                );
            }
            println!("loss log: {}", summary.loss_log.display());
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Eval {
            config,
            checkpoint,
            overrides,
        } => {
            let mut cfg = load_run_config(&config)?;
            overrides.apply(&mut cfg)?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let report = run_eval(&cfg, &checkpoint)?;
            println!("config hash: {}", report.config_hash);
            for (range, value) in &report.avg_map {
                println!("avg mAP {range}: {value:.4}");
            }
            println!("report dir: {}", cfg.paths.report_dir.display());
        }
        Command::Gradcheck {
            dim,
            classes,
            t,
            batch,
            pairs,
            hidden,
            dropout,
            h,
            tol,
            seed,
            delta,
        } => {
            let settings = GradcheckSettings {
                feature_dim: dim,
                num_classes: classes,
                snippets: t,
                batch,
                pairs,
                hidden,
                dropout,
                h,
                tol,
                seed,
                delta: DeltaMode::from_str(&delta)?,
            };
            let report = gradcheck_model(&settings)?;
            let mut entries = report.entries.clone();
            entries.sort_by(|a, b| b.rel_err.partial_cmp(&a.rel_err).unwrap());
            for entry in entries.iter().take(5) {
                println!(
                    "{:<28} rel {:.3e}  worst elem {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    entry.name,
                    entry.rel_err,
                    entry.max_elem_rel_err,
                    entry.analytic,
                    entry.numeric
                );
            }
            println!(
                "max rel err {:.3e} (worst element {:.3e}, {} refined) over {} parameters",
                report.max_rel_err,
                report.max_elem_rel_err,
                report.refined_elements,
                report.entries.len()
            );
            if !report.passes(tol) {
                return Err(Error::Determinism(format!(
                    "gradient check failed: max rel err {:.3e} > {tol:.1e}",
                    report.max_rel_err
                )));
            }
            println!("gradcheck PASS (tol {tol:.1e})");
        }
        Command::Localize {
            config,
            checkpoint,
            video,
            fps,
            out,
        } => {
            let cfg = load_run_config(&config)?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let dump = localize_dump(&cfg, &checkpoint, &video, fps)?;
            let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
            match out {
                Some(path) => {
                    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                    println!("wrote {}", path.display());
                }
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
