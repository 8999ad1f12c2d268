//! Branch-and-merge training loop.
//!
//! Slices are visited in `slice_order`. Each visited slice trains a branch
//! from the current base; the branch buffer is merged, and the merge becomes
//! the new base, whenever the 1-based position `i` satisfies `i % K == 0` or
//! `i == N`. Branches that share a base are trained concurrently, joined,
//! and only then merged.
//!
//! Every step is appended to a JSON-lines ledger in the checkpoint directory.
//! Checkpoint hashes in the ledger make runs resumable and auditable.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::merge::{merge_k, weight_change_norm, AngleScope, MergeError, MergeMethod, MergePlan};
use crate::seed::derive_seed;
use crate::slice::{load_manifest, ManifestEntry, SliceError};

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const FINAL_FILE: &str = "final.ckpt";
pub const LEDGER_SCHEMA_VERSION: u32 = 1;

pub type TrainerError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub nll: f64,
    pub accuracy: f64,
}

/// A training backend. `train` must be a deterministic function of its
/// arguments; distinct branches of one iteration may call it concurrently.
pub trait Trainer: Sync {
    fn train(
        &self,
        base: &Checkpoint,
        slice: &[ManifestEntry],
        config: &serde_json::Value,
        seed: u64,
    ) -> Result<Checkpoint, TrainerError>;

    fn evaluate(&self, ckpt: &Checkpoint, eval_set: &Path) -> Result<EvalMetrics, TrainerError>;
}

#[derive(Debug, Error)]
pub enum BamError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error("training on slice {slice} (position {position}) failed")]
    Trainer {
        position: usize,
        slice: usize,
        #[source]
        source: TrainerError,
    },
    #[error("evaluation on {eval_set} failed")]
    Eval {
        eval_set: String,
        #[source]
        source: TrainerError,
    },
    #[error("a ledger already exists at {0}; pass resume to continue it")]
    LedgerExists(PathBuf),
    #[error("no ledger at {0} to resume from")]
    NoLedger(PathBuf),
    #[error("ledger was written for plan {recorded}, current plan is {current}")]
    PlanMismatch { recorded: String, current: String },
    #[error("hash mismatch for {file}: ledger records {expected}, file has {actual}")]
    HashMismatch { file: PathBuf, expected: String, actual: String },
    #[error("corrupt ledger: {0}")]
    CorruptLedger(String),
    #[error("eval set {0} does not exist")]
    EvalSetMissing(PathBuf),
}

pub type Result<T, E = BamError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BamError + '_ {
    move |source| BamError::Io { path: path.to_path_buf(), source }
}

fn default_c() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BamPlan {
    /// Number of slices N.
    pub n: usize,
    /// Parallelism factor K.
    pub k: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    pub merge_method: MergeMethod,
    #[serde(default)]
    pub angle_scope: AngleScope,
    /// Permutation of 1..=N; empty means natural order.
    #[serde(default)]
    pub slice_order: Vec<usize>,
    /// Manifest path of slice `i` at position `i - 1`.
    pub slices: Vec<PathBuf>,
    /// Starting checkpoint.
    pub base: PathBuf,
    #[serde(default)]
    pub trainer_config: serde_json::Value,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Evaluated after every merge, keyed by a display name.
    #[serde(default)]
    pub eval_sets: BTreeMap<String, PathBuf>,
}

impl BamPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| BamError::InvalidPlan(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("plan serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn order(&self) -> Vec<usize> {
        if self.slice_order.is_empty() {
            (1..=self.n).collect()
        } else {
            self.slice_order.clone()
        }
    }

    pub fn merge_plan(&self) -> MergePlan {
        MergePlan { method: self.merge_method, coefficient: self.c, angle_scope: self.angle_scope }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BamError::InvalidPlan(m));
        if self.n == 0 {
            return bad("N must be at least 1".into());
        }
        if self.k == 0 || self.k > self.n {
            return bad(format!("K must satisfy 1 <= K <= N, got K={} N={}", self.k, self.n));
        }
        if !(0.0..=1.0).contains(&self.c) {
            return bad(format!("merge coefficient {} outside [0, 1]", self.c));
        }
        if self.slices.len() != self.n {
            return bad(format!("plan lists {} slice manifests for N={}", self.slices.len(), self.n));
        }
        let mut order = self.order();
        order.sort_unstable();
        if order != (1..=self.n).collect::<Vec<_>>() {
            return bad(format!("slice_order {:?} is not a permutation of 1..={}", self.slice_order, self.n));
        }
        Ok(())
    }

    /// Hash of the plan with `checkpoint_dir` cleared: two runs of the same
    /// plan into different directories share it.
    pub fn plan_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.checkpoint_dir = PathBuf::new();
        canonical.slice_order = self.order();
        let bytes = serde_json::to_vec(&canonical).expect("plan serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.checkpoint_dir.join(LEDGER_FILE)
    }

    fn with_k(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }
}

/// 1-based positions after which merges fire: `{i : i % K == 0} ∪ {N}`.
pub fn merge_schedule(n: usize, k: usize) -> Vec<usize> {
    (1..=n).filter(|i| i % k == 0 || *i == n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerRecord {
    Start {
        schema_version: u32,
        plan_hash: String,
        n: usize,
        k: usize,
        c: f64,
        merge_method: MergeMethod,
        angle_scope: AngleScope,
        slice_order: Vec<usize>,
        base_hash: String,
        seed: u64,
    },
    Branch {
        iteration: usize,
        position: usize,
        slice: usize,
        branch_index: usize,
        base_hash: String,
        seed: u64,
        checkpoint: String,
        hash: String,
    },
    Merge {
        iteration: usize,
        after_position: usize,
        slices: Vec<usize>,
        operand_hashes: Vec<String>,
        checkpoint: String,
        hash: String,
        weight_change_from_iteration_base: f64,
        weight_change_from_original: f64,
        fallback_count: usize,
        eval: BTreeMap<String, EvalMetrics>,
    },
    Aborted {
        iteration: usize,
        position: usize,
        slice: usize,
        error: String,
    },
    Complete {
        final_hash: String,
        checkpoint: String,
        merges: usize,
    },
}

/// Append-only record of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLedger {
    pub records: Vec<LedgerRecord>,
}

impl RunLedger {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| BamError::CorruptLedger(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self { records })
    }

    pub fn merges(&self) -> impl Iterator<Item = &LedgerRecord> {
        self.records.iter().filter(|r| matches!(r, LedgerRecord::Merge { .. }))
    }

    /// Positions after which merges happened.
    pub fn merge_positions(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LedgerRecord::Merge { after_position, .. } => Some(*after_position),
                _ => None,
            })
            .collect()
    }

    /// Slices trained, in the order they were recorded.
    pub fn trained_slices(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LedgerRecord::Branch { slice, .. } => Some(*slice),
                _ => None,
            })
            .collect()
    }

    pub fn final_hash(&self) -> Option<&str> {
        self.records.iter().rev().find_map(|r| match r {
            LedgerRecord::Complete { final_hash, .. } => Some(final_hash.as_str()),
            _ => None,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.final_hash().is_some()
    }
}

struct LedgerWriter {
    path: PathBuf,
    file: File,
    ledger: RunLedger,
}

impl LedgerWriter {
    fn open(path: PathBuf, ledger: RunLedger) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { path, file, ledger })
    }

    fn append(&mut self, record: LedgerRecord) -> Result<()> {
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.ledger.records.push(record);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue an existing ledger instead of starting a new run.
    pub resume: bool,
    /// Stop once this many merges are recorded in the ledger.
    pub stop_after_merges: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub ledger: RunLedger,
    pub ledger_path: PathBuf,
    pub complete: bool,
}

pub fn branch_seed(plan_seed: u64, iteration: usize, branch_index: usize) -> u64 {
    derive_seed(plan_seed, &[b"branch", &(iteration as u64).to_le_bytes(), &(branch_index as u64).to_le_bytes()])
}

fn branch_file(position: usize) -> String {
    format!("branch_{position:03}.ckpt")
}

fn merge_file(iteration: usize) -> String {
    format!("merge_{iteration:03}.ckpt")
}

fn load_verified(dir: &Path, file: &str, expected: &str) -> Result<Checkpoint> {
    let path = dir.join(file);
    let ckpt = load_checkpoint(&path)?;
    let actual = ckpt.content_hash();
    if actual != expected {
        return Err(BamError::HashMismatch { file: path, expected: expected.to_string(), actual });
    }
    Ok(ckpt)
}

/// A trained branch waiting in the merge buffer.
struct Pending {
    position: usize,
    slice: usize,
    checkpoint: Checkpoint,
    hash: String,
}

struct RunState {
    original: Checkpoint,
    base: Checkpoint,
    base_hash: String,
    merges: usize,
    buffer: Vec<Pending>,
    /// Next position (1-based) to train.
    next_position: usize,
}

/// Rebuilds the run state from a ledger, verifying every referenced file.
fn replay_ledger(plan: &BamPlan, ledger: &RunLedger, original: Checkpoint) -> Result<RunState> {
    let dir = &plan.checkpoint_dir;
    let current = plan.plan_hash();
    match ledger.records.first() {
        Some(LedgerRecord::Start { plan_hash, base_hash, .. }) => {
            if *plan_hash != current {
                return Err(BamError::PlanMismatch { recorded: plan_hash.clone(), current });
            }
            let actual = original.content_hash();
            if *base_hash != actual {
                return Err(BamError::HashMismatch { file: plan.base.clone(), expected: base_hash.clone(), actual });
            }
        }
        _ => return Err(BamError::CorruptLedger("first record is not a start event".into())),
    }

    let mut state = RunState {
        base_hash: original.content_hash(),
        base: original.clone(),
        original,
        merges: 0,
        buffer: Vec::new(),
        next_position: 1,
    };
    for record in &ledger.records[1..] {
        match record {
            LedgerRecord::Branch { position, slice, base_hash, checkpoint, hash, .. } => {
                let ckpt = load_verified(dir, checkpoint, hash)?;
                if *base_hash != state.base_hash {
                    return Err(BamError::CorruptLedger(format!(
                        "branch at position {position} was trained from {base_hash}, expected {}",
                        state.base_hash
                    )));
                }
                if *position != state.next_position {
                    return Err(BamError::CorruptLedger(format!(
                        "branch at position {position}, expected {}",
                        state.next_position
                    )));
                }
                state.buffer.push(Pending { position: *position, slice: *slice, checkpoint: ckpt, hash: hash.clone() });
                state.next_position += 1;
            }
            LedgerRecord::Merge { after_position, checkpoint, hash, .. } => {
                let ckpt = load_verified(dir, checkpoint, hash)?;
                if *after_position + 1 != state.next_position {
                    return Err(BamError::CorruptLedger(format!(
                        "merge after position {after_position} but {} positions were trained",
                        state.next_position - 1
                    )));
                }
                state.base = ckpt;
                state.base_hash = hash.clone();
                state.buffer.clear();
                state.merges += 1;
            }
            LedgerRecord::Aborted { .. } => {}
            LedgerRecord::Complete { final_hash, checkpoint, .. } => {
                load_verified(dir, checkpoint, final_hash)?;
            }
            LedgerRecord::Start { .. } => {
                return Err(BamError::CorruptLedger("duplicate start event".into()));
            }
        }
    }
    Ok(state)
}

fn load_slices(plan: &BamPlan) -> Result<Vec<Vec<ManifestEntry>>> {
    plan.slices.iter().map(|p| Ok(load_manifest(p)?)).collect()
}

fn evaluate_all(plan: &BamPlan, trainer: &dyn Trainer, ckpt: &Checkpoint) -> Result<BTreeMap<String, EvalMetrics>> {
    plan.eval_sets
        .iter()
        .map(|(name, path)| {
            let metrics =
                trainer.evaluate(ckpt, path).map_err(|source| BamError::Eval { eval_set: name.clone(), source })?;
            Ok((name.clone(), metrics))
        })
        .collect()
}

pub fn run_bam<T: Trainer>(plan: &BamPlan, trainer: &T) -> Result<RunOutcome> {
    run_bam_with(plan, trainer, RunOptions::default())
}

/// Continues an interrupted run from its ledger. Completed work is reused
/// after hash verification; a completed run is returned as is.
pub fn resume<T: Trainer>(plan: &BamPlan, trainer: &T) -> Result<RunOutcome> {
    run_bam_with(plan, trainer, RunOptions { resume: true, ..Default::default() })
}

/// Plain sequential training: every slice starts from the previous result.
pub fn run_sequential<T: Trainer>(plan: &BamPlan, trainer: &T) -> Result<RunOutcome> {
    run_bam(&plan.with_k(1), trainer)
}

pub fn run_bam_with<T: Trainer>(plan: &BamPlan, trainer: &T, opts: RunOptions) -> Result<RunOutcome> {
    plan.validate()?;
    let dir = plan.checkpoint_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ledger_path = plan.ledger_path();
    let original = load_checkpoint(&plan.base)?;

    let (mut writer, mut state) = if opts.resume {
        if !ledger_path.exists() {
            return Err(BamError::NoLedger(ledger_path));
        }
        let ledger = RunLedger::load(&ledger_path)?;
        let state = replay_ledger(plan, &ledger, original)?;
        if ledger.is_complete() {
            let final_path = dir.join(FINAL_FILE);
            return Ok(RunOutcome {
                checkpoint: state.base,
                checkpoint_path: final_path,
                ledger,
                ledger_path,
                complete: true,
            });
        }
        (LedgerWriter::open(ledger_path.clone(), ledger)?, state)
    } else {
        if ledger_path.exists() {
            return Err(BamError::LedgerExists(ledger_path));
        }
        let mut writer = LedgerWriter::open(ledger_path.clone(), RunLedger::default())?;
        let base_hash = original.content_hash();
        writer.append(LedgerRecord::Start {
            schema_version: LEDGER_SCHEMA_VERSION,
            plan_hash: plan.plan_hash(),
            n: plan.n,
            k: plan.k,
            c: plan.c,
            merge_method: plan.merge_method,
            angle_scope: plan.angle_scope,
            slice_order: plan.order(),
            base_hash: base_hash.clone(),
            seed: plan.seed,
        })?;
        let state =
            RunState { base: original.clone(), base_hash, original, merges: 0, buffer: Vec::new(), next_position: 1 };
        (writer, state)
    };

    let slices = load_slices(plan)?;
    let order = plan.order();
    let merge_plan = plan.merge_plan();
    let schedule = merge_schedule(plan.n, plan.k);

    for &merge_at in schedule.iter().skip(state.merges) {
        if opts.stop_after_merges.is_some_and(|m| state.merges >= m) {
            let path = dir.join(merge_file(state.merges));
            return Ok(RunOutcome {
                checkpoint: state.base,
                checkpoint_path: path,
                ledger: writer.ledger,
                ledger_path,
                complete: false,
            });
        }
        let iteration = state.merges + 1;
        let group_start = merge_at + 1 - (merge_at - 1) % plan.k - 1;
        let todo: Vec<usize> = (state.next_position..=merge_at).collect();

        // Train the missing branches of this iteration concurrently.
        let base = &state.base;
        let results: Vec<(usize, Result<Checkpoint, TrainerError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = todo
                .iter()
                .map(|&position| {
                    let slice = &slices[order[position - 1] - 1];
                    let seed = branch_seed(plan.seed, iteration, position - group_start);
                    let cfg = &plan.trainer_config;
                    (position, s.spawn(move || trainer.train(base, slice, cfg, seed)))
                })
                .collect();
            handles.into_iter().map(|(p, h)| (p, h.join().unwrap_or_else(|_| Err("trainer panicked".into())))).collect()
        });

        for (position, result) in results {
            let slice = order[position - 1];
            let branch_index = position - group_start;
            match result {
                Ok(ckpt) => {
                    let file = branch_file(position);
                    save_checkpoint(&ckpt, dir.join(&file))?;
                    let hash = ckpt.content_hash();
                    writer.append(LedgerRecord::Branch {
                        iteration,
                        position,
                        slice,
                        branch_index,
                        base_hash: state.base_hash.clone(),
                        seed: branch_seed(plan.seed, iteration, branch_index),
                        checkpoint: file,
                        hash: hash.clone(),
                    })?;
                    state.buffer.push(Pending { position, slice, checkpoint: ckpt, hash });
                    state.next_position = position + 1;
                }
                Err(source) => {
                    writer.append(LedgerRecord::Aborted { iteration, position, slice, error: source.to_string() })?;
                    return Err(BamError::Trainer { position, slice, source });
                }
            }
        }

        let operands: Vec<&Checkpoint> = state.buffer.iter().map(|p| &p.checkpoint).collect();
        let mut merged = merge_k(&operands, Some(&state.base), &merge_plan)?;
        merged.metadata.insert("iteration".into(), iteration.to_string());
        let file = merge_file(iteration);
        save_checkpoint(&merged, dir.join(&file))?;
        let hash = merged.content_hash();
        let from_base = weight_change_norm(&merged, &state.base)?.global;
        let from_original = weight_change_norm(&merged, &state.original)?.global;
        let eval = evaluate_all(plan, trainer, &merged)?;
        let fallback_count =
            merged.metadata.get(crate::merge::keys::FALLBACK_COUNT).and_then(|s| s.parse().ok()).unwrap_or(0);
        writer.append(LedgerRecord::Merge {
            iteration,
            after_position: merge_at,
            slices: state.buffer.iter().map(|p| p.slice).collect(),
            operand_hashes: state.buffer.iter().map(|p| p.hash.clone()).collect(),
            checkpoint: file,
            hash: hash.clone(),
            weight_change_from_iteration_base: from_base,
            weight_change_from_original: from_original,
            fallback_count,
            eval,
        })?;
        log::info!(
            "iteration {iteration}: merged positions {}..={merge_at}, |Δθ| from original = {from_original:.6}",
            state.buffer.first().map_or(merge_at, |p| p.position)
        );
        state.base = merged;
        state.base_hash = hash;
        state.buffer.clear();
        state.merges += 1;
    }

    let final_path = dir.join(FINAL_FILE);
    save_checkpoint(&state.base, &final_path)?;
    writer.append(LedgerRecord::Complete {
        final_hash: state.base_hash.clone(),
        checkpoint: FINAL_FILE.to_string(),
        merges: state.merges,
    })?;
    Ok(RunOutcome {
        checkpoint: state.base,
        checkpoint_path: final_path,
        ledger: writer.ledger,
        ledger_path,
        complete: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineSearchRow {
    pub c: f64,
    pub nll: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineSearchResult {
    pub best_c: f64,
    pub best_nll: f64,
    pub table: Vec<LineSearchRow>,
}

/// Merges `branches` at every coefficient of `grid` and returns the one with
/// the lowest held-out NLL (ties go to the smaller coefficient).
///
/// Linear and slerp searches need exactly two branches, since the
/// coefficient is a pairwise weight.
pub fn line_search_c(
    branches: &[&Checkpoint],
    base: &Checkpoint,
    method: MergeMethod,
    angle_scope: AngleScope,
    grid: &[f64],
    eval_set: &Path,
    trainer: &dyn Trainer,
) -> Result<LineSearchResult> {
    if grid.is_empty() {
        return Err(BamError::InvalidPlan("line-search grid is empty".into()));
    }
    if let Some(c) = grid.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(BamError::InvalidPlan(format!("grid value {c} outside [0, 1]")));
    }
    if method != MergeMethod::ModelStock && branches.len() != 2 {
        return Err(BamError::InvalidPlan(format!(
            "{method} line search needs exactly 2 branches, got {}",
            branches.len()
        )));
    }
    if !eval_set.exists() {
        return Err(BamError::EvalSetMissing(eval_set.to_path_buf()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let mut table = Vec::with_capacity(sorted.len());
    for c in sorted {
        let plan = MergePlan { method, coefficient: c, angle_scope };
        let merged = merge_k(branches, Some(base), &plan)?;
        let m = trainer
            .evaluate(&merged, eval_set)
            .map_err(|source| BamError::Eval { eval_set: eval_set.display().to_string(), source })?;
        table.push(LineSearchRow { c, nll: m.nll, accuracy: m.accuracy });
    }
    let best = table.iter().fold(&table[0], |best, row| if row.nll < best.nll { row } else { best });
    Ok(LineSearchResult { best_c: best.c, best_nll: best.nll, table })
}
