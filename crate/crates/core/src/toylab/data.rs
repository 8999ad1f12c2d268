//! Labelled samples, the synthetic source/target domain pair and its corpus
//! layout on disk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{Architecture, ToyModel};
use super::optim::OptimizerConfig;
use super::train::train_samples;
use super::ToyError;
use crate::seed::{derive_seed, rng};
use crate::slice::{read_jsonl, write_jsonl, CorpusIndex, DatasetSpec, Document, MixtureSpec};

pub const SOURCE_DATASET: &str = "source";
pub const TARGET_DATASET: &str = "target";
pub const DEFAULT_SHIFT: f64 = 1.0;
/// A source-only model must not exceed this accuracy on the target domain.
pub const MAX_CROSS_DOMAIN_ACCURACY: f64 = 0.6;
const SHIFT_ATTEMPTS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>, ToyError> {
    Ok(read_jsonl(path.as_ref())?)
}

pub fn save_samples(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), ToyError> {
    Ok(write_jsonl(path.as_ref(), samples)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainPairConfig {
    pub input_dim: usize,
    pub n_classes: usize,
    /// Samples per domain for training.
    pub train_size: usize,
    /// Samples per domain for held-out evaluation.
    pub eval_size: usize,
    /// 0 leaves the target identical to the source; 1 applies the full
    /// feature permutation plus the class-conditional mean shift.
    pub shift_strength: f64,
    pub class_separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DomainPairConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            n_classes: 4,
            train_size: 4000,
            eval_size: 1000,
            shift_strength: DEFAULT_SHIFT,
            class_separation: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainPair {
    pub config: DomainPairConfig,
    /// Seed actually used, after any regeneration attempts.
    pub effective_seed: u64,
    pub permutation: Vec<usize>,
    pub source_train: Vec<Sample>,
    pub source_eval: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_eval: Vec<Sample>,
    /// Target-eval accuracy of a model fit on the source domain only.
    pub cross_domain_accuracy: f64,
}

fn gaussian(r: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            z * scale
        })
        .collect()
}

struct Generator {
    means: Vec<Vec<f64>>,
    shifts: Vec<Vec<f64>>,
    permutation: Vec<usize>,
    cfg: DomainPairConfig,
}

impl Generator {
    fn new(cfg: DomainPairConfig, seed: u64) -> Self {
        let mut r = rng(derive_seed(seed, &[b"domain-structure"]));
        let means = (0..cfg.n_classes).map(|_| gaussian(&mut r, cfg.input_dim, cfg.class_separation)).collect();
        let shifts = (0..cfg.n_classes).map(|_| gaussian(&mut r, cfg.input_dim, cfg.class_separation)).collect();
        let mut permutation: Vec<usize> = (0..cfg.input_dim).collect();
        permutation.shuffle(&mut r);
        Self { means, shifts, permutation, cfg }
    }

    fn source(&self, r: &mut impl Rng, y: usize) -> Vec<f64> {
        let noise = gaussian(r, self.cfg.input_dim, self.cfg.noise);
        self.means[y].iter().zip(noise).map(|(m, n)| m + n).collect()
    }

    /// Source sample mapped through the blended permutation and shifted.
    fn target(&self, r: &mut impl Rng, y: usize) -> Vec<f64> {
        let x = self.source(r, y);
        let s = self.cfg.shift_strength;
        let blend = s.clamp(0.0, 1.0);
        (0..x.len()).map(|i| (1.0 - blend) * x[i] + blend * x[self.permutation[i]] + s * self.shifts[y][i]).collect()
    }

    fn draw(&self, seed: u64, label: &[u8], n: usize, target: bool) -> Vec<Sample> {
        let mut r = rng(derive_seed(seed, &[label]));
        (0..n)
            .map(|i| {
                let y = i % self.cfg.n_classes;
                let x = if target { self.target(&mut r, y) } else { self.source(&mut r, y) };
                Sample { x, y }
            })
            .collect()
    }
}

/// Fits a logistic model on `train` with a fixed recipe and returns its
/// accuracy on `eval`.
pub fn probe_accuracy(train: &[Sample], eval: &[Sample], n_classes: usize, seed: u64) -> Result<f64, ToyError> {
    let d = train.first().ok_or(ToyError::EmptyData)?.x.len();
    let base = ToyModel::zeros(Architecture::Logistic, d, 0, n_classes);
    let cfg = OptimizerConfig { max_lr: 0.05, total_steps: 300, ..Default::default() };
    let fitted = train_samples(&base, train, &cfg, seed)?;
    Ok(fitted.evaluate(eval)?.accuracy)
}

/// Generates a source/target domain pair. With the default (or a stronger)
/// shift, a source-only probe must score at most 0.6 on target data; the
/// pair is regenerated from a derived seed up to three times otherwise.
pub fn make_domain_pair(cfg: DomainPairConfig) -> Result<SyntheticDomainPair, ToyError> {
    if cfg.n_classes < 2 || cfg.input_dim == 0 {
        return Err(ToyError::InvalidConfig("need input_dim >= 1 and n_classes >= 2".into()));
    }
    let min = 10 * cfg.n_classes;
    if cfg.train_size < min || cfg.eval_size < min {
        return Err(ToyError::InvalidConfig(format!(
            "train_size and eval_size must be at least 10 * n_classes = {min}"
        )));
    }
    let enforce = cfg.shift_strength >= DEFAULT_SHIFT;
    let mut last = 0.0;
    for attempt in 0..SHIFT_ATTEMPTS {
        let seed =
            if attempt == 0 { cfg.seed } else { derive_seed(cfg.seed, &[b"regenerate", &attempt.to_le_bytes()]) };
        let g = Generator::new(cfg, seed);
        let source_train = g.draw(seed, b"source-train", cfg.train_size, false);
        let source_eval = g.draw(seed, b"source-eval", cfg.eval_size, false);
        let target_train = g.draw(seed, b"target-train", cfg.train_size, true);
        let target_eval = g.draw(seed, b"target-eval", cfg.eval_size, true);
        let cross = probe_accuracy(&source_train, &target_eval, cfg.n_classes, seed)?;
        last = cross;
        if !enforce || cross <= MAX_CROSS_DOMAIN_ACCURACY {
            return Ok(SyntheticDomainPair {
                config: cfg,
                effective_seed: seed,
                permutation: g.permutation,
                source_train,
                source_eval,
                target_train,
                target_eval,
                cross_domain_accuracy: cross,
            });
        }
        log::warn!("domain pair attempt {attempt}: cross-domain accuracy {cross:.3} too high, regenerating");
    }
    Err(ToyError::ShiftCheckFailed { accuracy: last, attempts: SHIFT_ATTEMPTS as usize })
}

/// Files written by [`write_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusLayout {
    pub corpus_dir: PathBuf,
    pub source_eval: PathBuf,
    pub target_eval: PathBuf,
    pub documents: usize,
}

/// Writes the training samples as documents of `doc_size` samples each,
/// a corpus index over them and the two eval sets. A document's token
/// count is its number of samples.
pub fn write_corpus(pair: &SyntheticDomainPair, dir: &Path, doc_size: usize) -> Result<CorpusLayout, ToyError> {
    if doc_size == 0 {
        return Err(ToyError::InvalidConfig("doc_size must be positive".into()));
    }
    let docs_dir = dir.join("docs");
    let corpus_dir = dir.join("corpus");
    let eval_dir = dir.join("eval");
    for d in [&docs_dir, &corpus_dir, &eval_dir] {
        fs::create_dir_all(d).map_err(|source| ToyError::Io { path: d.clone(), source })?;
    }
    let mut index = Vec::new();
    for (dataset, samples) in [(SOURCE_DATASET, &pair.source_train), (TARGET_DATASET, &pair.target_train)] {
        for (i, chunk) in samples.chunks(doc_size).enumerate() {
            let id = format!("{i:05}");
            let path = docs_dir.join(format!("{dataset}_{id}.jsonl"));
            save_samples(&path, chunk)?;
            index.push(Document {
                dataset: dataset.to_string(),
                id,
                tokens: chunk.len() as u64,
                path: path.to_string_lossy().into_owned(),
            });
        }
    }
    write_jsonl(&corpus_dir.join("corpus.jsonl"), &index)?;
    let source_eval = eval_dir.join("source_eval.jsonl");
    let target_eval = eval_dir.join("target_eval.jsonl");
    save_samples(&source_eval, &pair.source_eval)?;
    save_samples(&target_eval, &pair.target_eval)?;
    Ok(CorpusLayout { corpus_dir, source_eval, target_eval, documents: index.len() })
}

/// Target data once, source data as replay at `replay_repetitions`.
pub fn default_mixture(pair: &SyntheticDomainPair, replay_repetitions: f64) -> MixtureSpec {
    MixtureSpec::new(vec![
        DatasetSpec::new(TARGET_DATASET, pair.target_train.len() as u64, 1.0).tagged("target"),
        DatasetSpec::new(SOURCE_DATASET, pair.source_train.len() as u64, replay_repetitions).tagged("source").replay(),
    ])
}

/// Loads the corpus index written by [`write_corpus`].
pub fn load_corpus(layout: &CorpusLayout) -> Result<CorpusIndex, ToyError> {
    Ok(CorpusIndex::load_dir(&layout.corpus_dir)?)
}
