//! End-to-end commands: synthesize, train, infer, evaluate.

pub mod config;
pub mod infer;
pub mod optim;
pub mod train;

use std::path::{Path, PathBuf};

use crate::data::io::{load_annotations, load_dataset, save_dataset};
use crate::data::synth::{corpus_stats, generate, CorpusStats, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::files::{assemble, PredictionFile};
use crate::metrics::{evaluate, EvalOptions, EvalReport};

use config::RunConfig;
use infer::{predict, InferOptions};
use train::{final_dir, load_inference_model, Trainer};

/// Trains from a TOML run config, optionally continuing a checkpoint.
/// Returns the final checkpoint directory.
pub fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let train_dir = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let videos = load_dataset(&train_dir)?;
    if videos.is_empty() {
        return Err(Error::Precondition(format!("no videos in {}", train_dir.display())));
    }
    let mut trainer = match resume {
        Some(dir) => {
            let t = Trainer::from_checkpoint(dir)?;
            if t.cfg.model != cfg.model || t.cfg.precision != cfg.precision {
                return Err(Error::Config("checkpoint model config differs from the run config".into()));
            }
            Trainer { cfg: cfg.clone(), ..t }
        }
        None => Trainer::new(cfg.clone())?,
    };
    log::info!("{} parameters", trainer.ps.num_params());
    trainer.train(&videos, None, Some(&cfg.output.dir))?;
    Ok(final_dir(&cfg.output.dir))
}

/// Optional overrides of the inference settings stored in a checkpoint.
#[derive(Debug, Clone, Copy, Default)]
pub struct InferOverrides {
    pub conf_thresh: Option<f64>,
    pub topk_predicates: Option<usize>,
    pub topk_video: Option<usize>,
}

pub fn cmd_infer(ckpt: &Path, data: &Path, out: &Path, over: InferOverrides) -> Result<PredictionFile> {
    let (cfg, ps, model) = load_inference_model(ckpt)?;
    let mut opts = InferOptions::from_config(&cfg.data);
    opts.conf_thresh = over.conf_thresh.unwrap_or(opts.conf_thresh);
    opts.topk_predicates = over.topk_predicates.unwrap_or(opts.topk_predicates);
    opts.topk_video = over.topk_video.unwrap_or(opts.topk_video);
    if opts.topk_predicates == 0 || opts.topk_predicates > cfg.model.num_classes || opts.topk_video == 0 {
        return Err(Error::Config("invalid top-k override".into()));
    }
    let videos = load_dataset(data)?;
    let file = predict(&model, ps.dtype(), &videos, &opts)?;
    file.save(out)?;
    Ok(file)
}

pub fn cmd_eval(pred: &Path, gt: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let preds = PredictionFile::load(pred)?;
    let gts = load_annotations(gt)?;
    let videos = assemble(&preds, &gts)?;
    Ok(evaluate(&videos, opts))
}

pub fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<CorpusStats> {
    let cfg: SynthConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    let videos = generate(&cfg)?;
    let info = cfg.dataset_info();
    save_dataset(out, &info, &videos)?;
    Ok(corpus_stats(&videos, info.predicates.len()))
}
