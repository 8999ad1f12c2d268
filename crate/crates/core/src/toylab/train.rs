//! Minibatch AdamW training of toy models, and the [`ToyTrainer`] that plugs
//! them into the branch-and-merge orchestrator.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;

use super::data::{load_samples, Sample};
use super::model::{EvalMetrics, ToyModel};
use super::optim::{lr_schedule, AdamW, OptimizerConfig};
use super::ToyError;
use crate::checkpoint::Checkpoint;
use crate::orchestrator::{Trainer, TrainerError};
use crate::seed::rng;
use crate::slice::ManifestEntry;

/// Runs `cfg.total_steps` AdamW steps on minibatches drawn from shuffled
/// epochs of `samples`. Step `t` (1-based) uses `lr_schedule(t)`.
pub fn train_samples(
    base: &ToyModel,
    samples: &[Sample],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<ToyModel, ToyError> {
    cfg.validate()?;
    let mut model = base.clone();
    if cfg.total_steps == 0 {
        return Ok(model);
    }
    if samples.is_empty() {
        return Err(ToyError::EmptyData);
    }
    let mut r = rng(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut r);
    let mut cursor = 0;
    let mut opt = AdamW::new(*cfg, model.params.len());
    let mut batch: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.total_steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(ToyError::NonFiniteLoss { step, loss });
        }
        let lr = lr_schedule(step, cfg)?;
        opt.step(&mut model.params, &grad, lr);
    }
    Ok(model)
}

/// Trains a toy-model checkpoint. The output carries `step`, `seed` and
/// `producer` metadata.
pub fn train(base: &Checkpoint, samples: &[Sample], cfg: &OptimizerConfig, seed: u64) -> Result<Checkpoint, ToyError> {
    let model = ToyModel::from_checkpoint(base)?;
    let trained = train_samples(&model, samples, cfg, seed)?;
    let mut out = trained.to_checkpoint();
    let prior_steps: u64 = base.metadata.get("step").and_then(|s| s.parse().ok()).unwrap_or(0);
    out.metadata.insert("step".into(), (prior_steps + cfg.total_steps as u64).to_string());
    out.metadata.insert("seed".into(), seed.to_string());
    out.metadata.insert("producer".into(), "bam-core toylab".into());
    Ok(out)
}

type SampleCache = Mutex<HashMap<PathBuf, Arc<Vec<Sample>>>>;

/// Trainer backed by [`train`]. Document and eval files are read once and
/// cached; the cache is shared by concurrently running branches.
#[derive(Debug, Default)]
pub struct ToyTrainer {
    cache: SampleCache,
}

impl ToyTrainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn samples(&self, path: &Path) -> Result<Arc<Vec<Sample>>, ToyError> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(path) {
            return Ok(hit.clone());
        }
        let loaded = Arc::new(load_samples(path)?);
        self.cache.lock().expect("cache lock").insert(path.to_path_buf(), loaded.clone());
        Ok(loaded)
    }

    /// All samples of a slice manifest, in manifest order. Repeated
    /// instances contribute their samples once per instance.
    pub fn slice_samples(&self, slice: &[ManifestEntry]) -> Result<Vec<Sample>, ToyError> {
        let mut out = Vec::new();
        for entry in slice {
            out.extend(self.samples(Path::new(&entry.path))?.iter().cloned());
        }
        Ok(out)
    }
}

impl Trainer for ToyTrainer {
    fn train(
        &self,
        base: &Checkpoint,
        slice: &[ManifestEntry],
        config: &serde_json::Value,
        seed: u64,
    ) -> Result<Checkpoint, TrainerError> {
        let cfg: OptimizerConfig =
            serde_json::from_value(config.clone()).map_err(|e| ToyError::InvalidConfig(e.to_string()))?;
        let samples = self.slice_samples(slice)?;
        if samples.is_empty() && cfg.total_steps > 0 {
            return Err(ToyError::EmptyData.into());
        }
        Ok(train(base, &samples, &cfg, seed)?)
    }

    fn evaluate(&self, ckpt: &Checkpoint, eval_set: &Path) -> Result<EvalMetrics, TrainerError> {
        let samples = self.samples(eval_set)?;
        Ok(super::model::evaluate(ckpt, &samples)?)
    }
}
