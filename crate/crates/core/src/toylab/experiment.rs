//! End-to-end continued-training setup on the synthetic domain pair.
//!
//! The base model is pretrained on the source domain. Continued training
//! then runs on target-domain slices with source-domain replay, either as
//! branch-and-merge or sequentially, from the same plan.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{
    default_mixture, load_corpus, make_domain_pair, write_corpus, DomainPairConfig, SyntheticDomainPair,
};
use super::model::{evaluate, Architecture, EvalMetrics, ToyModel};
use super::optim::OptimizerConfig;
use super::train::train;
use super::ToyError;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::merge::{weight_change_norm, AngleScope, MergeMethod};
use crate::orchestrator::BamPlan;
use crate::seed::derive_seed;
use crate::slice::{
    manifest_name, materialize_slice, plan_curriculum, plan_iid, SliceMode, SlicePlan, DEFAULT_REPLAY_HEAVY,
    DEFAULT_REPLAY_LIGHT,
};

pub const SOURCE_EVAL: &str = "source";
pub const TARGET_EVAL: &str = "target";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub domains: DomainPairConfig,
    pub architecture: Architecture,
    pub hidden_dim: usize,
    /// Samples per corpus document.
    pub doc_size: usize,
    /// Repetition factor of the source-domain replay dataset.
    pub replay_repetitions: f64,
    pub slice_mode: SliceMode,
    pub replay_light: f64,
    pub replay_heavy: f64,
    pub n: usize,
    pub k: usize,
    pub c: f64,
    pub merge_method: MergeMethod,
    pub angle_scope: AngleScope,
    /// Source-domain training that produces the base model.
    pub pretrain: OptimizerConfig,
    /// Per-slice training.
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domains: DomainPairConfig::default(),
            architecture: Architecture::Mlp,
            hidden_dim: 32,
            doc_size: 20,
            replay_repetitions: 0.5,
            slice_mode: SliceMode::Iid,
            replay_light: DEFAULT_REPLAY_LIGHT,
            replay_heavy: DEFAULT_REPLAY_HEAVY,
            n: 8,
            k: 2,
            c: 0.5,
            merge_method: MergeMethod::Slerp,
            angle_scope: AngleScope::PerTensor,
            pretrain: OptimizerConfig { max_lr: 1e-2, total_steps: 600, ..Default::default() },
            optimizer: OptimizerConfig { max_lr: 1e-2, total_steps: 200, ..Default::default() },
            seed: 0,
        }
    }
}

/// Files of a prepared experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub pair: SyntheticDomainPair,
    pub base: Checkpoint,
    pub base_path: PathBuf,
    pub slice_plan: SlicePlan,
    pub source_eval: PathBuf,
    pub target_eval: PathBuf,
    /// BaM plan writing into `dir/run`.
    pub plan: BamPlan,
}

impl Experiment {
    /// The experiment's plan with parallelism `k` writing into `checkpoint_dir`.
    pub fn plan_with(&self, k: usize, checkpoint_dir: impl Into<PathBuf>) -> BamPlan {
        BamPlan { k, checkpoint_dir: checkpoint_dir.into(), ..self.plan.clone() }
    }

    pub fn measure(&self, ckpt: &Checkpoint) -> Result<RunMetrics, ToyError> {
        let before_source = evaluate(&self.base, &self.pair.source_eval)?;
        let source = evaluate(ckpt, &self.pair.source_eval)?;
        let target = evaluate(ckpt, &self.pair.target_eval)?;
        let change = weight_change_norm(ckpt, &self.base).map_err(|e| ToyError::InvalidModel(e.to_string()))?;
        Ok(RunMetrics {
            weight_change: change.global,
            source_nll_increase: source.nll - before_source.nll,
            source,
            target,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    /// L2 distance from the pretrained base.
    pub weight_change: f64,
    pub source_nll_increase: f64,
    pub source: EvalMetrics,
    pub target: EvalMetrics,
}

fn create_dir(dir: &Path) -> Result<(), ToyError> {
    fs::create_dir_all(dir).map_err(|source| ToyError::Io { path: dir.to_path_buf(), source })
}

/// Generates data, pretrains the base and materializes the slices under
/// `dir`. Everything is a deterministic function of `cfg`.
pub fn prepare_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Experiment, ToyError> {
    let domains = DomainPairConfig { seed: derive_seed(cfg.seed, &[b"domains"]), ..cfg.domains };
    let pair = make_domain_pair(domains)?;
    let layout = write_corpus(&pair, &dir.join("data"), cfg.doc_size)?;
    let corpus = load_corpus(&layout)?;
    let mix = default_mixture(&pair, cfg.replay_repetitions);
    let slice_seed = derive_seed(cfg.seed, &[b"slices"]);
    let slice_plan = match cfg.slice_mode {
        SliceMode::Iid => plan_iid(&mix, &corpus, cfg.n, slice_seed)?,
        SliceMode::Curriculum => plan_curriculum(&mix, &corpus, cfg.n, slice_seed, cfg.replay_light, cfg.replay_heavy)?,
    };
    let slice_dir = dir.join("slices");
    create_dir(&slice_dir)?;
    slice_plan.save(slice_dir.join("plan.json"))?;
    let mut slices = Vec::with_capacity(cfg.n);
    for i in 1..=cfg.n {
        let manifest = slice_dir.join(manifest_name(i));
        materialize_slice(&slice_plan, i, &corpus, &manifest, None)?;
        slices.push(manifest);
    }

    let init = ToyModel::init(
        cfg.architecture,
        domains.input_dim,
        cfg.hidden_dim,
        domains.n_classes,
        derive_seed(cfg.seed, &[b"init"]),
    )
    .to_checkpoint();
    let base = train(&init, &pair.source_train, &cfg.pretrain, derive_seed(cfg.seed, &[b"pretrain"]))?;
    let base_path = dir.join("base.ckpt");
    save_checkpoint(&base, &base_path)?;

    let eval_sets = BTreeMap::from([
        (SOURCE_EVAL.to_string(), layout.source_eval.clone()),
        (TARGET_EVAL.to_string(), layout.target_eval.clone()),
    ]);
    let plan = BamPlan {
        n: cfg.n,
        k: cfg.k,
        c: cfg.c,
        merge_method: cfg.merge_method,
        angle_scope: cfg.angle_scope,
        slice_order: (1..=cfg.n).collect(),
        slices,
        base: base_path.clone(),
        trainer_config: serde_json::to_value(cfg.optimizer).expect("config serializes"),
        checkpoint_dir: dir.join("run"),
        seed: derive_seed(cfg.seed, &[b"bam"]),
        eval_sets,
    };
    plan.save(dir.join("plan.json")).map_err(|e| ToyError::InvalidConfig(e.to_string()))?;
    Ok(Experiment {
        config: cfg.clone(),
        dir: dir.to_path_buf(),
        pair,
        base,
        base_path,
        slice_plan,
        source_eval: layout.source_eval,
        target_eval: layout.target_eval,
        plan,
    })
}
