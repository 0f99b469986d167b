use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vrdone::metrics::{ApMode, EvalOptions, VIouDenominator};
use vrdone::pipeline::{cmd_eval, cmd_infer, cmd_synth, cmd_train, InferOverrides};

/// One-stage video visual relation detection.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Denominator {
    Union,
    Gt,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApAveraging {
    Video,
    Class,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write predictions for every video of a dataset.
    Infer {
        /// Checkpoint directory (EMA weights are used).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        topk_predicates: Option<usize>,
        #[arg(long)]
        topk_video: Option<usize>,
        #[arg(long)]
        conf: Option<f64>,
    },
    /// Score a prediction file against a dataset's annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        viou: f64,
        #[arg(long, default_value_t = 0.5)]
        tiou: f64,
        #[arg(long, value_enum, default_value = "union")]
        viou_denominator: Denominator,
        #[arg(long, value_enum, default_value = "video")]
        ap: ApAveraging,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// TOML generator config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> vrdone::error::Result<()> {
    match cli.cmd {
        Cmd::Train { config, resume } => {
            let dir = cmd_train(&config, resume.as_deref())?;
            println!("final checkpoint: {}", dir.display());
        }
        Cmd::Infer {
            ckpt,
            data,
            out,
            topk_predicates,
            topk_video,
            conf,
        } => {
            let over = InferOverrides {
                conf_thresh: conf,
                topk_predicates,
                topk_video,
            };
            let file = cmd_infer(&ckpt, &data, &out, over)?;
            let n: usize = file.videos.iter().map(|v| v.relations.len()).sum();
            println!("{} relations over {} videos -> {}", n, file.videos.len(), out.display());
        }
        Cmd::Eval {
            pred,
            gt,
            viou,
            tiou,
            viou_denominator,
            ap,
            report,
        } => {
            let opts = EvalOptions {
                viou_thresh: viou,
                tiou_thresh: tiou,
                viou_denominator: match viou_denominator {
                    Denominator::Union => VIouDenominator::Union,
                    Denominator::Gt => VIouDenominator::GroundTruth,
                },
                ap_mode: match ap {
                    ApAveraging::Video => ApMode::PerVideo,
                    ApAveraging::Class => ApMode::PerTripletClass,
                },
            };
            let r = cmd_eval(&pred, &gt, &opts)?;
            println!("{r}");
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&r)? + "\n";
                std::fs::write(&path, text).map_err(|e| vrdone::error::Error::io(&path, e))?;
            }
        }
        Cmd::Synth { config, out } => {
            let stats = cmd_synth(config.as_deref(), &out)?;
            println!("{stats}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
