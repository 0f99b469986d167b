//! Training loop with checkpoint/resume.
//!
//! All randomness is a pure function of the run seed and the epoch or step
//! index: training crops and batch order per epoch, drop-path masks per
//! step. A run resumed from a checkpoint therefore replays exactly the steps
//! an uninterrupted run would have taken.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::{grad_norm, lr_at, warmup_steps, AdamW, Ema};
use crate::data::{build_training_pairs, collate, PairSample, VideoRecord};
use crate::detector::VrdOne;
use crate::error::{Error, Result};
use crate::loss::criterion;
use crate::nn::{Ctx, ParamStore};

const CHECKPOINT_VERSION: u32 = 1;
const WEIGHTS_FILE: &str = "weights.safetensors";
const STATE_FILE: &str = "checkpoint.json";

const STREAM_CROP: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROP: u64 = 3;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(stream ^ splitmix(index)))
}

/// One optimizer step's record in the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub focal: f64,
    pub dice: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointState {
    schema_version: u32,
    step: usize,
    config: RunConfig,
}

/// Step counts of a run over a fixed training corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub pairs: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub ps: ParamStore,
    pub model: VrdOne,
    pub opt: AdamW,
    pub ema: Ema,
    pub step: usize,
}

pub fn build_model(cfg: &RunConfig) -> Result<(ParamStore, VrdOne)> {
    cfg.validate()?;
    let mut ps = ParamStore::new(cfg.precision.dtype(), cfg.seed);
    let model = VrdOne::new(&mut ps, &cfg.model)?;
    Ok((ps, model))
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let (ps, model) = build_model(&cfg)?;
        let opt = AdamW::new(&cfg.optim, &ps)?;
        let ema = Ema::new(cfg.optim.ema_decay, &ps);
        Ok(Self {
            cfg,
            ps,
            model,
            opt,
            ema,
            step: 0,
        })
    }

    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (state, tensors) = read_checkpoint(dir)?;
        let mut t = Self::new(state.config)?;
        let section = |prefix: &str| -> BTreeMap<String, Tensor> {
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        let params = section("param.");
        t.ps.load(&params)?;
        let dtype = t.ps.dtype();
        let restore = |src: BTreeMap<String, Tensor>, dst: &mut BTreeMap<String, Tensor>| -> Result<()> {
            for (k, slot) in dst.iter_mut() {
                let v = src
                    .get(k)
                    .ok_or_else(|| Error::schema(dir.display().to_string(), format!("missing tensor for {k}")))?;
                *slot = v.to_dtype(dtype)?;
            }
            Ok(())
        };
        restore(section("ema."), &mut t.ema.shadow)?;
        restore(section("adam_m."), &mut t.opt.m)?;
        restore(section("adam_v."), &mut t.opt.v)?;
        t.step = state.step;
        t.opt.steps = state.step;
        Ok(t)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = std::collections::HashMap::new();
        for (k, v) in self.ps.tensors() {
            tensors.insert(format!("param.{k}"), v);
        }
        for (prefix, map) in [("ema.", &self.ema.shadow), ("adam_m.", &self.opt.m), ("adam_v.", &self.opt.v)] {
            for (k, v) in map {
                tensors.insert(format!("{prefix}{k}"), v.clone());
            }
        }
        candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
        let state = CheckpointState {
            schema_version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.cfg.clone(),
        };
        crate::data::io::write_json(&dir.join(STATE_FILE), &state)
    }

    /// Training pairs of `epoch`, in that epoch's batch order.
    pub fn epoch_pairs(&self, videos: &[VideoRecord], epoch: usize) -> Result<Vec<PairSample>> {
        let d = &self.cfg.data;
        let mut crop = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_CROP, epoch as u64));
        let mut pairs = Vec::new();
        for v in videos {
            pairs.extend(build_training_pairs(v, d.max_len, self.cfg.model.num_queries, &mut crop)?);
        }
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_SHUFFLE, epoch as u64));
        pairs.shuffle(&mut shuffle);
        Ok(pairs)
    }

    pub fn plan(&self, videos: &[VideoRecord]) -> Result<Plan> {
        let pairs = self.epoch_pairs(videos, 0)?.len();
        if pairs == 0 {
            return Err(Error::Precondition("training corpus yields no subject-object pairs".into()));
        }
        let steps_per_epoch = pairs.div_ceil(self.cfg.data.batch_size);
        let total_steps = self
            .cfg
            .data
            .max_steps
            .unwrap_or(self.cfg.data.epochs * steps_per_epoch);
        Ok(Plan {
            pairs,
            steps_per_epoch,
            total_steps,
            warmup_steps: warmup_steps(&self.cfg.optim, total_steps),
        })
    }

    /// Trains until `stop_at` steps (or the planned total) have been taken.
    /// With `out`, appends to `train_log.jsonl` and writes periodic and final
    /// checkpoints there.
    pub fn train(&mut self, videos: &[VideoRecord], stop_at: Option<usize>, out: Option<&Path>) -> Result<Vec<StepLog>> {
        let plan = self.plan(videos)?;
        let stop = stop_at.unwrap_or(plan.total_steps).min(plan.total_steps);
        let mut log_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                Some((
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?,
                    path,
                ))
            }
            None => None,
        };
        log::info!(
            "training on {} pairs: {} steps/epoch, {} steps, warmup {}",
            plan.pairs,
            plan.steps_per_epoch,
            plan.total_steps,
            plan.warmup_steps
        );
        let min_len = self.model.encoder.min_len();
        let dtype = self.ps.dtype();
        let mut logs = Vec::new();
        let mut cached: Option<(usize, Vec<PairSample>)> = None;
        while self.step < stop {
            let epoch = self.step / plan.steps_per_epoch;
            let within = self.step % plan.steps_per_epoch;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_pairs(videos, epoch)?));
            }
            let pairs = &cached.as_ref().expect("filled above").1;
            let bs = self.cfg.data.batch_size;
            let batch: Vec<&PairSample> = pairs[within * bs..((within + 1) * bs).min(pairs.len())].iter().collect();
            let batch = collate(&batch, min_len, dtype, &Device::Cpu)?;

            let seed = derive_seed(self.cfg.seed, STREAM_DROP, self.step as u64);
            let mut ctx = Ctx::train(self.cfg.model.drop_path, self.cfg.model.dropout, seed);
            let out_t = self.model.forward(&batch.input, &mut ctx)?;
            let terms = criterion(&out_t, &batch.input.valid, &batch.gts, &self.cfg.loss)?;
            let grads = terms.total.backward()?;
            let norm = grad_norm(&self.ps, &grads)?;
            let scale = match self.cfg.optim.grad_clip {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let o = &self.cfg.optim;
            let lr = lr_at(self.step, plan.total_steps, plan.warmup_steps, o.lr, o.min_lr);
            self.opt.step(&self.ps, &grads, lr, scale)?;
            self.ema.update(&self.ps)?;
            let rec = StepLog {
                step: self.step,
                epoch,
                lr,
                loss: terms.value()?,
                cls: terms.cls,
                focal: terms.focal,
                dice: terms.dice,
                grad_norm: norm,
            };
            self.step += 1;
            if self.step.is_multiple_of(self.cfg.output.log_every) || self.step == stop {
                log::info!(
                    "step {:>6} epoch {:>3} lr {:.3e} loss {:.4} (cls {:.4} focal {:.4} dice {:.4})",
                    rec.step,
                    epoch,
                    lr,
                    rec.loss,
                    rec.cls,
                    rec.focal,
                    rec.dice
                );
            }
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path.as_path(), e))?;
            }
            logs.push(rec);
            if let Some(dir) = out {
                let every = self.cfg.output.checkpoint_every;
                let epoch_done = self.step.is_multiple_of(plan.steps_per_epoch);
                if every > 0 && epoch_done && (self.step / plan.steps_per_epoch).is_multiple_of(every) && self.step < plan.total_steps {
                    self.save_checkpoint(&dir.join(format!("ckpt-{:06}", self.step)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save_checkpoint(&final_dir(dir))?;
        }
        Ok(logs)
    }

    /// A copy of the model carrying the EMA weights, for inference.
    pub fn ema_model(&self) -> Result<(ParamStore, VrdOne)> {
        let (ps, model) = build_model(&self.cfg)?;
        ps.load(&self.ema.shadow)?;
        Ok((ps, model))
    }
}

pub fn final_dir(out: &Path) -> PathBuf {
    out.join("final")
}

fn read_checkpoint(dir: &Path) -> Result<(CheckpointState, BTreeMap<String, Tensor>)> {
    let state: CheckpointState = crate::data::io::read_json(&dir.join(STATE_FILE))?;
    if state.schema_version != CHECKPOINT_VERSION {
        return Err(Error::schema(
            dir.display().to_string(),
            format!("unsupported checkpoint version {}", state.schema_version),
        ));
    }
    let path = dir.join(WEIGHTS_FILE);
    let tensors = candle_core::safetensors::load(&path, &Device::Cpu)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    Ok((state, tensors.into_iter().collect()))
}

/// Loads the EMA weights of a checkpoint into a fresh model.
pub fn load_inference_model(dir: &Path) -> Result<(RunConfig, ParamStore, VrdOne)> {
    let (state, tensors) = read_checkpoint(dir)?;
    let (ps, model) = build_model(&state.config)?;
    let ema: BTreeMap<String, Tensor> = tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("ema.").map(|n| (n.to_string(), v.clone())))
        .collect();
    ps.load(&ema)?;
    Ok((state.config, ps, model))
}
