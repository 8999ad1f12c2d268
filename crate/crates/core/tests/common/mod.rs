#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use bam_core::checkpoint::{save_checkpoint, Checkpoint, DType, Tensor};
use bam_core::merge::{AngleScope, MergeMethod};
use bam_core::orchestrator::{BamPlan, EvalMetrics, Trainer, TrainerError};
use bam_core::seed::rng;
use bam_core::slice::{write_jsonl, ManifestEntry};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Checkpoint with `n_tensors` tensors of mixed dtype and rank whose
/// element total is at least `min_elems`.
pub fn random_checkpoint(seed: u64, n_tensors: usize, min_elems: usize) -> Checkpoint {
    let mut r = rng(seed);
    let per = min_elems.div_ceil(n_tensors).max(1);
    let mut ckpt = Checkpoint::new();
    for t in 0..n_tensors {
        let shape = match t % 3 {
            0 => vec![per],
            1 => vec![2, per.div_ceil(2)],
            _ => vec![1, 2, per.div_ceil(2)],
        };
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(&mut r)).collect();
        let dtype = if t % 2 == 0 { DType::F64 } else { DType::F32 };
        let tensor = Tensor::from_f64_values(shape, dtype, values).unwrap();
        ckpt.insert(format!("layer{t}.weight"), tensor).unwrap();
    }
    ckpt
}

/// `base + scale * N(0, 1)` with the same layout as `base`.
pub fn perturbed(base: &Checkpoint, seed: u64, scale: f64) -> Checkpoint {
    let mut r = rng(seed);
    let mut out = base.clone();
    for (name, t) in base.tensors() {
        let values = t
            .to_f64_vec()
            .into_iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut r);
                v + scale * z
            })
            .collect();
        out.set(name.clone(), Tensor::from_f64_values(t.shape().to_vec(), t.dtype(), values).unwrap()).unwrap();
    }
    out
}

pub fn vector_checkpoint(values: &[f64]) -> Checkpoint {
    Checkpoint::from_tensors([("w", Tensor::f64(vec![values.len()], values.to_vec()).unwrap())]).unwrap()
}

/// Deterministic stand-in trainer on a single tensor `w`.
///
/// Training moves `w` a fixed fraction towards a per-slice target read from
/// the manifest's first entry id (`"t:<value>"`), plus seeded noise.
/// Evaluation NLL is the squared distance of `w` to the value stored in the
/// eval file.
#[derive(Debug, Default)]
pub struct MockTrainer {
    pub calls: AtomicUsize,
    /// Slice target value whose training fails.
    pub fail_on: Option<f64>,
}

impl MockTrainer {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn slice_target(slice: &[ManifestEntry]) -> f64 {
    slice[0].id.strip_prefix("t:").unwrap().parse().unwrap()
}

impl Trainer for MockTrainer {
    fn train(
        &self,
        base: &Checkpoint,
        slice: &[ManifestEntry],
        config: &serde_json::Value,
        seed: u64,
    ) -> Result<Checkpoint, TrainerError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let target = slice_target(slice);
        if self.fail_on == Some(target) {
            return Err(format!("mock failure on slice target {target}").into());
        }
        let step = config.get("step").and_then(|v| v.as_f64()).unwrap_or(0.5);
        let mut r = rng(seed);
        let w = base.get("w").ok_or("no tensor w")?;
        let values =
            w.to_f64_vec().into_iter().map(|v| v + step * (target - v) + 0.05 * r.random_range(-1.0..1.0)).collect();
        let mut out = base.clone();
        out.set("w", Tensor::from_f64_values(w.shape().to_vec(), w.dtype(), values)?)?;
        out.metadata.insert("seed".into(), seed.to_string());
        Ok(out)
    }

    fn evaluate(&self, ckpt: &Checkpoint, eval_set: &Path) -> Result<EvalMetrics, TrainerError> {
        let target: f64 = fs::read_to_string(eval_set)?.trim().parse()?;
        let w = ckpt.get("w").ok_or("no tensor w")?.to_f64_vec();
        let nll = w.iter().map(|v| (v - target).powi(2)).sum::<f64>() / w.len() as f64;
        Ok(EvalMetrics { nll, accuracy: 1.0 / (1.0 + nll) })
    }
}

/// Writes `n` one-entry manifests with slice targets `1..=n`, a zero base
/// of dimension 8, an eval file and returns the plan.
pub fn mock_plan(dir: &Path, n: usize, k: usize, method: MergeMethod) -> BamPlan {
    fs::create_dir_all(dir).unwrap();
    let mut slices = Vec::new();
    for i in 1..=n {
        let path = dir.join(format!("slice_{i:02}.jsonl"));
        write_jsonl(
            &path,
            [ManifestEntry {
                dataset: "mock".into(),
                id: format!("t:{i}"),
                instance: 0,
                tokens: 1,
                path: String::new(),
            }],
        )
        .unwrap();
        slices.push(path);
    }
    let base = dir.join("base.ckpt");
    save_checkpoint(&vector_checkpoint(&[0.0; 8]), &base).unwrap();
    let eval = dir.join("eval.txt");
    fs::write(&eval, "3.0").unwrap();
    BamPlan {
        n,
        k,
        c: 0.5,
        merge_method: method,
        angle_scope: AngleScope::PerTensor,
        slice_order: vec![],
        slices,
        base,
        trainer_config: serde_json::json!({ "step": 0.5 }),
        checkpoint_dir: dir.join("run"),
        seed: 11,
        eval_sets: BTreeMap::from([("mock".to_string(), eval)]),
    }
}

pub fn with_dir(plan: &BamPlan, dir: PathBuf) -> BamPlan {
    BamPlan { checkpoint_dir: dir, ..plan.clone() }
}
