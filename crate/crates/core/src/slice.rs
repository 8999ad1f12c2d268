//! Weighted training mixtures and their partition into data slices.
//!
//! A mixture lists datasets with a repetition factor each. Repetitions are
//! materialized as duplicate document instances (a fractional part becomes a
//! seeded subsample), so a plan partitions a finite multiset and token
//! accounting is exact. Plans come in two flavours:
//!
//! * i.i.d.: all instances are shuffled and dealt round-robin;
//! * curriculum: even-numbered slices (1-based) carry a heavier share of
//!   replay data than odd-numbered ones.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng};

pub const DEFAULT_REPLAY_LIGHT: f64 = 0.06;
pub const DEFAULT_REPLAY_HEAVY: f64 = 0.28;

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("mixture has no dataset with positive effective tokens")]
    EmptyMixture,
    #[error("invalid dataset {name:?}: {reason}")]
    InvalidDataset { name: String, reason: String },
    #[error("requested {n} slices but only {available} document instances exist")]
    TooManySlices { n: usize, available: usize },
    #[error("slice count must be positive{0}")]
    BadSliceCount(&'static str),
    #[error("replay fractions must satisfy 0 <= light < heavy <= 1 (light={light}, heavy={heavy})")]
    InvalidFractions { light: f64, heavy: f64 },
    #[error("insufficient replay data: need at least {needed} tokens, have {available}")]
    InsufficientReplay { needed: u64, available: u64 },
    #[error("dataset {0:?} has no documents in the corpus")]
    MissingDocuments(String),
    #[error("document {dataset}/{id} is not in the corpus")]
    MissingDocument { dataset: String, id: String },
    #[error("duplicate document {dataset}/{id} in corpus")]
    DuplicateDocument { dataset: String, id: String },
    #[error("slice index {index} is outside 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("slice {0} contains no documents")]
    EmptySlice(usize),
}

pub type Result<T, E = SliceError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SliceError + '_ {
    move |source| SliceError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, e: impl fmt::Display) -> SliceError {
    SliceError::Parse { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default)]
    pub domain_tag: String,
    /// Unique tokens in the dataset.
    pub token_count: u64,
    pub repetitions: f64,
    #[serde(default)]
    pub is_replay: bool,
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, token_count: u64, repetitions: f64) -> Self {
        Self { name: name.into(), domain_tag: String::new(), token_count, repetitions, is_replay: false }
    }

    pub fn replay(mut self) -> Self {
        self.is_replay = true;
        self
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.domain_tag = tag.into();
        self
    }

    pub fn effective_tokens(&self) -> f64 {
        self.token_count as f64 * self.repetitions
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub datasets: Vec<DatasetSpec>,
}

impl MixtureSpec {
    pub fn new(datasets: Vec<DatasetSpec>) -> Self {
        Self { datasets }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| parse_err(path, e))
    }

    pub fn total_effective_tokens(&self) -> f64 {
        self.datasets.iter().map(DatasetSpec::effective_tokens).sum()
    }

    pub fn get(&self, name: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            let invalid =
                |reason: &str| SliceError::InvalidDataset { name: d.name.clone(), reason: reason.to_string() };
            if !seen.insert(d.name.as_str()) {
                return Err(invalid("listed twice"));
            }
            if !(d.repetitions.is_finite() && d.repetitions > 0.0) {
                return Err(invalid("repetitions must be a positive finite number"));
            }
        }
        Ok(())
    }
}

/// Sampling probability of each dataset: its effective tokens over the
/// mixture total.
pub fn compute_probabilities(mix: &MixtureSpec) -> Result<BTreeMap<String, f64>> {
    mix.validate()?;
    let total = mix.total_effective_tokens();
    if total <= 0.0 {
        return Err(SliceError::EmptyMixture);
    }
    Ok(mix.datasets.iter().map(|d| (d.name.clone(), d.effective_tokens() / total)).collect())
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub dataset: String,
    pub id: String,
    pub tokens: u64,
    pub path: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusIndex {
    documents: Vec<Document>,
    by_key: HashMap<(String, String), usize>,
}

impl CorpusIndex {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        let mut by_key = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if by_key.insert((d.dataset.clone(), d.id.clone()), i).is_some() {
                return Err(SliceError::DuplicateDocument { dataset: d.dataset.clone(), id: d.id.clone() });
            }
        }
        Ok(Self { documents, by_key })
    }

    /// Reads every `*.jsonl` file of `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let mut documents = Vec::new();
        for file in files {
            documents.extend(read_jsonl::<Document>(&file)?);
        }
        Self::from_documents(documents)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, dataset: &str, id: &str) -> Option<&Document> {
        self.by_key.get(&(dataset.to_string(), id.to_string())).map(|&i| &self.documents[i])
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| parse_err(path, e))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    Iid,
    Curriculum,
}

impl FromStr for SliceMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iid" => Ok(SliceMode::Iid),
            "curriculum" => Ok(SliceMode::Curriculum),
            other => Err(format!("unknown slice mode {other:?}")),
        }
    }
}

/// One repetition instance of a corpus document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRef {
    pub dataset: String,
    pub id: String,
    pub instance: u32,
    pub tokens: u64,
    pub is_replay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    /// 1-based.
    pub index: usize,
    pub documents: Vec<DocRef>,
    pub token_budget: u64,
    pub replay_tokens: u64,
    pub replay_fraction: f64,
}

impl SliceSpec {
    fn from_docs(index: usize, documents: Vec<DocRef>) -> Self {
        let token_budget = documents.iter().map(|d| d.tokens).sum();
        let replay_tokens = documents.iter().filter(|d| d.is_replay).map(|d| d.tokens).sum();
        let replay_fraction = if token_budget == 0 { 0.0 } else { replay_tokens as f64 / token_budget as f64 };
        Self { index, documents, token_budget, replay_tokens, replay_fraction }
    }

    /// Tokens per dataset in this slice.
    pub fn dataset_tokens(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for d in &self.documents {
            *out.entry(d.dataset.clone()).or_insert(0) += d.tokens;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePlan {
    pub n_slices: usize,
    pub mode: SliceMode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_light: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_heavy: Option<f64>,
    pub slices: Vec<SliceSpec>,
    /// Replay instances left over when the corpus holds more replay data
    /// than the requested fractions can absorb.
    #[serde(default)]
    pub unused: Vec<DocRef>,
}

impl SlicePlan {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| parse_err(path, e))?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| parse_err(path, e))
    }

    pub fn slice(&self, index: usize) -> Result<&SliceSpec> {
        if index == 0 || index > self.slices.len() {
            return Err(SliceError::IndexOutOfRange { index, n: self.slices.len() });
        }
        Ok(&self.slices[index - 1])
    }
}

/// Expands the mixture's repetition factors into document instances, in
/// mixture order and corpus order within a dataset.
pub fn materialize_instances(mix: &MixtureSpec, corpus: &CorpusIndex, seed: u64) -> Result<Vec<DocRef>> {
    mix.validate()?;
    let mut out = Vec::new();
    for spec in &mix.datasets {
        let docs: Vec<&Document> = corpus.documents().iter().filter(|d| d.dataset == spec.name).collect();
        if docs.is_empty() {
            if spec.effective_tokens() > 0.0 {
                return Err(SliceError::MissingDocuments(spec.name.clone()));
            }
            continue;
        }
        let make = |d: &Document, instance: u32| DocRef {
            dataset: d.dataset.clone(),
            id: d.id.clone(),
            instance,
            tokens: d.tokens,
            is_replay: spec.is_replay,
        };
        let full = spec.repetitions.floor() as u32;
        for instance in 0..full {
            out.extend(docs.iter().map(|d| make(d, instance)));
        }
        let frac = spec.repetitions - full as f64;
        let take = (frac * docs.len() as f64).round() as usize;
        if take > 0 {
            let mut picks: Vec<usize> = (0..docs.len()).collect();
            let mut r = rng(derive_seed(seed, &[b"subsample", spec.name.as_bytes()]));
            picks.shuffle(&mut r);
            picks.truncate(take);
            picks.sort_unstable();
            out.extend(picks.into_iter().map(|i| make(docs[i], full)));
        }
    }
    Ok(out)
}

/// Shuffles every document instance and deals the stream into `n` slices
/// of near-equal token count.
pub fn plan_iid(mix: &MixtureSpec, corpus: &CorpusIndex, n: usize, seed: u64) -> Result<SlicePlan> {
    plan_iid_weighted(mix, corpus, &vec![1.0; n], seed)
}

/// As [`plan_iid`], with slice `i` receiving a `weights[i] / Σ weights`
/// share of the tokens.
pub fn plan_iid_weighted(mix: &MixtureSpec, corpus: &CorpusIndex, weights: &[f64], seed: u64) -> Result<SlicePlan> {
    let n = weights.len();
    if n == 0 {
        return Err(SliceError::BadSliceCount(""));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(SliceError::BadSliceCount(" with positive finite budget weights"));
    }
    let mut instances = materialize_instances(mix, corpus, seed)?;
    if n > instances.len() {
        return Err(SliceError::TooManySlices { n, available: instances.len() });
    }
    instances.shuffle(&mut rng(derive_seed(seed, &[b"iid"])));
    let total: u64 = instances.iter().map(|d| d.tokens).sum();
    let weight_sum: f64 = weights.iter().sum();
    let budget: Vec<f64> = weights.iter().map(|w| total as f64 * w / weight_sum).collect();
    let mut buckets: Vec<Vec<DocRef>> = vec![Vec::new(); n];
    let mut filled = vec![0u64; n];
    for d in instances {
        let i = neediest(&budget, &filled).unwrap_or_else(|| least_over(&budget, &filled));
        filled[i] += d.tokens;
        buckets[i].push(d);
    }
    Ok(SlicePlan {
        n_slices: n,
        mode: SliceMode::Iid,
        seed,
        replay_light: None,
        replay_heavy: None,
        slices: buckets.into_iter().enumerate().map(|(i, docs)| SliceSpec::from_docs(i + 1, docs)).collect(),
        unused: Vec::new(),
    })
}

/// Index of the slice least above its budget, lowest index on ties.
fn least_over(targets: &[f64], filled: &[u64]) -> usize {
    (0..targets.len())
        .min_by(|&a, &b| (filled[a] as f64 - targets[a]).total_cmp(&(filled[b] as f64 - targets[b])))
        .expect("at least one slice")
}

/// Index of the slice with the largest positive deficit, lowest index on
/// ties.
fn neediest(targets: &[f64], filled: &[u64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&t, &f)) in targets.iter().zip(filled).enumerate() {
        let deficit = t - f as f64;
        if deficit > 0.0 && best.is_none_or(|(_, d)| deficit > d) {
            best = Some((i, deficit));
        }
    }
    best.map(|(i, _)| i)
}

/// Curriculum slicing: odd slices (1-based) carry `light` replay, even
/// slices `heavy` replay, as fractions of slice tokens.
///
/// Target-language instances are split between odd and even slices so that
/// the available replay data covers both fractions; when there is more replay
/// data than the fractions can absorb, target data is split evenly and the
/// surplus replay instances are reported in [`SlicePlan::unused`].
pub fn plan_curriculum(
    mix: &MixtureSpec,
    corpus: &CorpusIndex,
    n: usize,
    seed: u64,
    light: f64,
    heavy: f64,
) -> Result<SlicePlan> {
    if n == 0 {
        return Err(SliceError::BadSliceCount(""));
    }
    if !n.is_multiple_of(2) {
        return Err(SliceError::BadSliceCount(" and even for curriculum slicing"));
    }
    if !(0.0 <= light && light < heavy && heavy <= 1.0) {
        return Err(SliceError::InvalidFractions { light, heavy });
    }
    let instances = materialize_instances(mix, corpus, seed)?;
    if n > instances.len() {
        return Err(SliceError::TooManySlices { n, available: instances.len() });
    }
    let (mut replay, mut target): (Vec<DocRef>, Vec<DocRef>) = instances.into_iter().partition(|d| d.is_replay);
    target.shuffle(&mut rng(derive_seed(seed, &[b"curriculum-target"])));
    replay.shuffle(&mut rng(derive_seed(seed, &[b"curriculum-replay"])));

    let target_total: u64 = target.iter().map(|d| d.tokens).sum();
    let replay_total: u64 = replay.iter().map(|d| d.tokens).sum();
    let half = (n / 2) as f64;
    // Target tokens per odd/even pair, and replay tokens per pair.
    let pair_target = target_total as f64 / half;
    let pair_replay = replay_total as f64 / half;
    let ratio_light = light / (1.0 - light);

    let needed_light = (target_total as f64 * ratio_light).ceil() as u64;
    if heavy < 1.0 && replay_total < needed_light {
        return Err(SliceError::InsufficientReplay { needed: needed_light, available: replay_total });
    }

    // Per-slice target budgets and replay ratios (replay tokens per target token).
    let (odd_target, even_target, even_replay_fixed) = if heavy >= 1.0 {
        // Even slices are pure replay; they take what odd slices leave.
        let odd_need = pair_target * ratio_light;
        if pair_replay < odd_need {
            return Err(SliceError::InsufficientReplay { needed: needed_light, available: replay_total });
        }
        (pair_target, 0.0, Some(pair_replay - odd_need))
    } else {
        let ratio_heavy = heavy / (1.0 - heavy);
        // Odd slices hold at least half of the target data.
        let even = (pair_replay - pair_target * ratio_light) / (ratio_heavy - ratio_light);
        if even <= pair_target / 2.0 {
            (pair_target - even, even, None)
        } else {
            (pair_target / 2.0, pair_target / 2.0, None)
        }
    };

    let is_even = |i: usize| (i + 1).is_multiple_of(2);
    let target_budget: Vec<f64> = (0..n).map(|i| if is_even(i) { even_target } else { odd_target }).collect();
    let mut buckets: Vec<Vec<DocRef>> = vec![Vec::new(); n];
    let mut filled = vec![0u64; n];
    for d in target {
        // Rounding can leave every deficit at zero for the last few
        // documents; those go to the slice furthest below its budget.
        let i = neediest(&target_budget, &filled).unwrap_or_else(|| least_over(&target_budget, &filled));
        filled[i] += d.tokens;
        buckets[i].push(d);
    }

    let replay_budget: Vec<f64> = (0..n)
        .map(|i| match (is_even(i), even_replay_fixed) {
            (true, Some(fixed)) => fixed,
            (true, None) => filled[i] as f64 * heavy / (1.0 - heavy),
            (false, _) => filled[i] as f64 * ratio_light,
        })
        .collect();
    let mut replay_filled = vec![0u64; n];
    let mut unused = Vec::new();
    for d in replay {
        match neediest(&replay_budget, &replay_filled) {
            Some(i) => {
                replay_filled[i] += d.tokens;
                buckets[i].push(d);
            }
            None => unused.push(d),
        }
    }

    let slices = buckets
        .into_iter()
        .enumerate()
        .map(|(i, mut docs)| {
            docs.shuffle(&mut rng(derive_seed(seed, &[b"curriculum-order", &(i as u64).to_le_bytes()])));
            SliceSpec::from_docs(i + 1, docs)
        })
        .collect();
    Ok(SlicePlan {
        n_slices: n,
        mode: SliceMode::Curriculum,
        seed,
        replay_light: Some(light),
        replay_heavy: Some(heavy),
        slices,
        unused,
    })
}

/// One line of a slice manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dataset: String,
    pub id: String,
    #[serde(default)]
    pub instance: u32,
    pub tokens: u64,
    pub path: String,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    read_jsonl(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaterializeReport {
    pub index: usize,
    pub documents: usize,
    pub tokens: u64,
    pub manifest: PathBuf,
}

/// Writes the manifest of slice `index` and, when `concat` is given, the
/// concatenated contents of its documents (newline separated).
pub fn materialize_slice(
    plan: &SlicePlan,
    index: usize,
    corpus: &CorpusIndex,
    manifest: &Path,
    concat: Option<&Path>,
) -> Result<MaterializeReport> {
    let spec = plan.slice(index)?;
    if spec.documents.is_empty() {
        return Err(SliceError::EmptySlice(index));
    }
    let entries = spec
        .documents
        .iter()
        .map(|d| {
            let doc = corpus
                .get(&d.dataset, &d.id)
                .ok_or_else(|| SliceError::MissingDocument { dataset: d.dataset.clone(), id: d.id.clone() })?;
            Ok(ManifestEntry {
                dataset: d.dataset.clone(),
                id: d.id.clone(),
                instance: d.instance,
                tokens: doc.tokens,
                path: doc.path.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(manifest, &entries)?;

    if let Some(concat) = concat {
        let file = File::create(concat).map_err(io_err(concat))?;
        let mut w = BufWriter::new(file);
        for e in &entries {
            let src = Path::new(&e.path);
            let bytes = fs::read(src).map_err(io_err(src))?;
            w.write_all(&bytes).map_err(io_err(concat))?;
            if !bytes.ends_with(b"\n") {
                w.write_all(b"\n").map_err(io_err(concat))?;
            }
        }
        w.flush().map_err(io_err(concat))?;
    }
    Ok(MaterializeReport {
        index,
        documents: entries.len(),
        tokens: entries.iter().map(|e| e.tokens).sum(),
        manifest: manifest.to_path_buf(),
    })
}

/// Canonical manifest file name for slice `index`.
pub fn manifest_name(index: usize) -> String {
    format!("slice_{index:02}.jsonl")
}
