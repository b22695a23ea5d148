//! Operator entry point: dataset generation, training, inference,
//! evaluation and ablation sweeps.
//!
//! Exit codes: 0 success, 2 config error, 3 data-format error, 4 numeric
//! failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use panoptic4d::config::Config;
use panoptic4d::encoder_heads::TrainMode;
use panoptic4d::pipeline::{
    run_ablation, run_eval, run_inference, run_synth_gen, run_training, AblateAxis, InferOptions,
};
use panoptic4d::tinynet::Checkpoint;
use panoptic4d::Error;

#[derive(Parser)]
#[command(name = "panoptic4d", version, about = "4D panoptic LiDAR segmentation pipeline")]
struct Cli {
    /// Worker threads for the pure pipeline stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Every config key is overridable by a CLI flag of the same name; flags
/// are applied on top of --config.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "temporal_window")]
    temporal_window: Option<String>,
    /// Alias for temporal_window.
    #[arg(long = "scans")]
    scans: Option<String>,
    #[arg(long = "num_proposals")]
    num_proposals: Option<String>,
    #[arg(long = "group_radius")]
    group_radius: Option<String>,
    #[arg(long = "dbscan_eps")]
    dbscan_eps: Option<String>,
    #[arg(long = "dbscan_min_points")]
    dbscan_min_points: Option<String>,
    #[arg(long = "iou_stitch_threshold")]
    iou_stitch_threshold: Option<String>,
    #[arg(long = "huber_delta")]
    huber_delta: Option<String>,
    #[arg(long = "alpha")]
    alpha: Option<String>,
    #[arg(long = "beta")]
    beta: Option<String>,
    #[arg(long = "gamma")]
    gamma: Option<String>,
    #[arg(long = "sample_fraction")]
    sample_fraction: Option<String>,
    #[arg(long = "objectness_sigma")]
    objectness_sigma: Option<String>,
    #[arg(long = "gaussian_sigma")]
    gaussian_sigma: Option<String>,
    #[arg(long = "objectness_threshold")]
    objectness_threshold: Option<String>,
    #[arg(long = "probability_threshold")]
    probability_threshold: Option<String>,
    #[arg(long = "selection_radius")]
    selection_radius: Option<String>,
    #[arg(long = "feature_f")]
    feature_f: Option<String>,
    #[arg(long = "feature_d")]
    feature_d: Option<String>,
    #[arg(long = "feature_e")]
    feature_e: Option<String>,
    /// center | center+radius | full
    #[arg(long = "features")]
    features: Option<String>,
    /// dbscan | nms | centers
    #[arg(long = "aggregate")]
    aggregate: Option<String>,
    /// voting | gaussian
    #[arg(long = "variant")]
    variant: Option<String>,
    /// fps | random
    #[arg(long = "sampling")]
    sampling: Option<String>,
    #[arg(long = "rng_seed")]
    rng_seed: Option<String>,
    #[arg(long = "num_classes")]
    num_classes: Option<String>,
    /// Comma-separated thing class ids.
    #[arg(long = "thing_classes")]
    thing_classes: Option<String>,
    #[arg(long = "phase1_iters")]
    phase1_iters: Option<String>,
    #[arg(long = "phase2_iters")]
    phase2_iters: Option<String>,
    #[arg(long = "learning_rate")]
    learning_rate: Option<String>,
    #[arg(long = "momentum")]
    momentum: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config, Error> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        let overrides: [(&str, &Option<String>); 30] = [
            ("temporal_window", &self.temporal_window),
            ("temporal_window", &self.scans),
            ("num_proposals", &self.num_proposals),
            ("group_radius", &self.group_radius),
            ("dbscan_eps", &self.dbscan_eps),
            ("dbscan_min_points", &self.dbscan_min_points),
            ("iou_stitch_threshold", &self.iou_stitch_threshold),
            ("huber_delta", &self.huber_delta),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("sample_fraction", &self.sample_fraction),
            ("objectness_sigma", &self.objectness_sigma),
            ("gaussian_sigma", &self.gaussian_sigma),
            ("objectness_threshold", &self.objectness_threshold),
            ("probability_threshold", &self.probability_threshold),
            ("selection_radius", &self.selection_radius),
            ("feature_f", &self.feature_f),
            ("feature_d", &self.feature_d),
            ("feature_e", &self.feature_e),
            ("features", &self.features),
            ("aggregate", &self.aggregate),
            ("variant", &self.variant),
            ("sampling", &self.sampling),
            ("rng_seed", &self.rng_seed),
            ("num_classes", &self.num_classes),
            ("thing_classes", &self.thing_classes),
            ("phase1_iters", &self.phase1_iters),
            ("phase2_iters", &self.phase2_iters),
            ("learning_rate", &self.learning_rate),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(v) = &self.momentum {
            cfg.set("momentum", v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled sequence.
    SynthGen {
        /// Scene spec file; the built-in default scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-phase training on a labeled sequence.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV path (default: alongside the checkpoint).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// full | aggregation-only.
        #[arg(long, default_value = "full")]
        mode: String,
        /// Oracle vote noise sigma for aggregation-only training.
        #[arg(long = "vote_noise", default_value_t = 0.0)]
        vote_noise: f64,
    },
    /// Windowed inference producing per-scan prediction label files.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Trained checkpoint (omit with --oracle).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Bypass learned heads with ground-truth votes and semantics.
        #[arg(long)]
        oracle: bool,
        /// Gaussian noise sigma on oracle votes.
        #[arg(long = "vote_noise", default_value_t = 0.0)]
        vote_noise: f64,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for eval_report.csv / eval_report.txt (default: pred).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one parameter axis, scoring each configuration.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// proposals | radius | sampling | features | components | gaussian.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long = "vote_noise", default_value_t = 0.0)]
        vote_noise: f64,
        /// Scratch directory for per-configuration predictions.
        #[arg(long)]
        work: Option<PathBuf>,
    },
}

fn load_model(cfg: &Config, path: &std::path::Path) -> Result<panoptic4d::encoder_heads::Model, Error> {
    let ckpt = Checkpoint::load(path)?;
    panoptic4d::encoder_heads::Model::load_checkpoint(cfg, &ckpt)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        // Ignore failure if a pool already exists (e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::SynthGen { spec, out } => {
            let scene = run_synth_gen(spec.as_deref(), &out)?;
            println!(
                "wrote {} scans, {} objects to {}",
                scene.scans,
                scene.objects.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            loss_csv,
            resume,
            mode,
            vote_noise,
        } => {
            let cfg = config.build()?;
            let mode = match mode.as_str() {
                "full" => TrainMode::Full,
                "aggregation-only" => TrainMode::AggregationOnly { vote_noise },
                other => {
                    return Err(Error::Config(format!(
                        "unknown training mode '{other}' (expected full|aggregation-only)"
                    )))
                }
            };
            let csv = loss_csv.unwrap_or_else(|| out.with_extension("losses.csv"));
            println!(
                "phase 1: iterations 0..{} (weights alpha={} beta={} gamma=0)",
                cfg.phase1_iters, cfg.alpha, cfg.beta
            );
            println!(
                "phase 2: iterations {}..{} (weights alpha=0 beta=0 gamma={}, phase-1 parameters frozen)",
                cfg.phase1_iters,
                cfg.phase1_iters + cfg.phase2_iters,
                cfg.gamma
            );
            let summary = run_training(&data, &cfg, mode, resume.as_deref(), &out, Some(&csv))?;
            println!(
                "voting loss {:.6} -> {:.6}, vote-to-center error {:.4} m -> {:.4} m",
                summary.initial_vote_loss,
                summary.final_vote_loss,
                summary.initial_vote_error,
                summary.final_vote_error
            );
            println!("checkpoint: {} losses: {}", out.display(), csv.display());
        }
        Command::Infer {
            data,
            config,
            out,
            checkpoint,
            oracle,
            vote_noise,
        } => {
            let cfg = config.build()?;
            let model = match &checkpoint {
                Some(p) => Some(load_model(&cfg, p)?),
                None => None,
            };
            let opts = InferOptions {
                oracle,
                vote_noise,
                model,
            };
            let stats = run_inference(&data, &out, &cfg, &opts)?;
            println!(
                "{} windows in {:.3} s ({:.2} scans/s) -> {}",
                stats.windows,
                stats.seconds,
                stats.windows as f64 / stats.seconds.max(1e-9),
                out.display()
            );
        }
        Command::Eval {
            gt,
            pred,
            config,
            out,
        } => {
            let cfg = config.build()?;
            let report = run_eval(&gt, &pred, &cfg)?;
            print!("{report}");
            let out_dir = out.unwrap_or_else(|| pred.clone());
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let csv_path = out_dir.join("eval_report.csv");
            std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            let txt_path = out_dir.join("eval_report.txt");
            std::fs::write(&txt_path, format!("{report}")).map_err(|e| Error::io(&txt_path, e))?;
        }
        Command::Ablate {
            data,
            config,
            axis,
            out,
            checkpoint,
            oracle,
            vote_noise,
            work,
        } => {
            let cfg = config.build()?;
            let axis = AblateAxis::parse(&axis)?;
            let model = match &checkpoint {
                Some(p) => Some(load_model(&cfg, p)?),
                None => None,
            };
            let opts = InferOptions {
                oracle,
                vote_noise,
                model,
            };
            let tmp;
            let work_dir = match work {
                Some(w) => w,
                None => {
                    tmp = tempfile::tempdir().map_err(|e| Error::io("ablate-work", e))?;
                    tmp.path().to_path_buf()
                }
            };
            std::fs::create_dir_all(&work_dir).map_err(|e| Error::io(&work_dir, e))?;
            let csv = run_ablation(&data, &cfg, axis, &opts, &work_dir)?;
            std::fs::write(&out, &csv).map_err(|e| Error::io(&out, e))?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Format(_) | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
