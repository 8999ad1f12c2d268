//! Task-vector algebra and the Linear, Slerp and Model Stock merge kernels.
//!
//! All kernels accumulate in f64 and round to the operands' dtype once, at
//! the end. Reductions run in lexicographic tensor order and ascending
//! element index, so identical inputs give bit-identical outputs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{validate_compatible, Checkpoint, CheckpointError, Tensor};

/// Below this angle (radians) slerp falls back to linear interpolation.
pub const MIN_ANGLE: f64 = 1e-6;
/// Task vectors with a smaller L2 norm are treated as zero.
pub const MIN_NORM: f64 = 1e-12;
/// Lower clamp offset for the Model Stock mean cosine, keeping
/// `1 + (K-1)cos` strictly positive.
const MODEL_STOCK_COS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("incompatible checkpoints: {0}")]
    Incompatible(#[from] CheckpointError),
    #[error("merge coefficient {0} is outside [0, 1]")]
    CoefficientOutOfRange(f64),
    #[error("{method} needs at least {need} operands, got {got}")]
    TooFewOperands { method: MergeMethod, need: usize, got: usize },
    #[error("{0} requires a base checkpoint")]
    MissingBase(MergeMethod),
    #[error("task vector was computed against base {expected}, got {actual}")]
    BaseMismatch { expected: String, actual: String },
}

pub type Result<T, E = MergeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Linear,
    Slerp,
    #[serde(alias = "model-stock")]
    ModelStock,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Linear => "linear",
            MergeMethod::Slerp => "slerp",
            MergeMethod::ModelStock => "model_stock",
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(MergeMethod::Linear),
            "slerp" => Ok(MergeMethod::Slerp),
            "model_stock" | "model-stock" => Ok(MergeMethod::ModelStock),
            other => Err(format!("unknown merge method {other:?}")),
        }
    }
}

/// Whether the slerp angle is measured per tensor or over the whole
/// concatenated parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleScope {
    #[default]
    #[serde(alias = "per-tensor")]
    PerTensor,
    Global,
}

impl AngleScope {
    pub fn as_str(self) -> &'static str {
        match self {
            AngleScope::PerTensor => "per_tensor",
            AngleScope::Global => "global",
        }
    }
}

impl FromStr for AngleScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_tensor" | "per-tensor" => Ok(AngleScope::PerTensor),
            "global" => Ok(AngleScope::Global),
            other => Err(format!("unknown angle scope {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub method: MergeMethod,
    #[serde(default = "default_coefficient")]
    pub coefficient: f64,
    #[serde(default)]
    pub angle_scope: AngleScope,
}

fn default_coefficient() -> f64 {
    0.5
}

impl MergePlan {
    pub fn new(method: MergeMethod) -> Self {
        Self { method, coefficient: 0.5, angle_scope: AngleScope::PerTensor }
    }

    pub fn with_coefficient(mut self, c: f64) -> Self {
        self.coefficient = c;
        self
    }

    pub fn with_angle_scope(mut self, scope: AngleScope) -> Self {
        self.angle_scope = scope;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    /// A task vector is (numerically) zero.
    NearZero,
    /// The two task vectors point the same way.
    Collinear,
    /// The task vectors point in opposite directions; no unique arc exists.
    AntiParallel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FallbackEvent {
    pub tensor: String,
    pub reason: FallbackReason,
}

/// Metadata keys written on merge outputs.
pub mod keys {
    pub const METHOD: &str = "method";
    pub const COEFFICIENT: &str = "c";
    pub const OPERAND_HASHES: &str = "operand_hashes";
    pub const BASE_HASH: &str = "base_hash";
    pub const ANGLE_SCOPE: &str = "angle_scope";
    pub const FALLBACK_COUNT: &str = "fallback_count";
    pub const FALLBACK_TENSORS: &str = "fallback_tensors";
    pub const WARNINGS: &str = "warnings";
    pub const COMPOSITION: &str = "composition";
}

/// Reads the fallback tensor list recorded by a merge.
pub fn recorded_fallbacks(ckpt: &Checkpoint) -> Vec<String> {
    ckpt.metadata.get(keys::FALLBACK_TENSORS).and_then(|s| serde_json::from_str(s).ok()).unwrap_or_default()
}

/// Per-tensor differences against a base checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub base_ref: String,
    pub deltas: BTreeMap<String, Tensor>,
}

pub fn task_vector(theta_i: &Checkpoint, theta_base: &Checkpoint) -> Result<TaskVector> {
    validate_compatible(theta_i, theta_base)?;
    let deltas = theta_i
        .tensors()
        .map(|(name, t)| {
            let b = theta_base.get(name).expect("validated");
            let values = (0..t.numel()).map(|i| t.get(i) - b.get(i)).collect();
            let delta = Tensor::from_f64_values(t.shape().to_vec(), t.dtype(), values).expect("same shape");
            (name.clone(), delta)
        })
        .collect();
    Ok(TaskVector { base_ref: theta_base.content_hash(), deltas })
}

impl TaskVector {
    /// Applies the deltas to `base`. The base must be the one the vector was
    /// computed against.
    pub fn reconstruct(&self, base: &Checkpoint) -> Result<Checkpoint> {
        let actual = base.content_hash();
        if actual != self.base_ref {
            return Err(MergeError::BaseMismatch { expected: self.base_ref.clone(), actual });
        }
        let deltas = self.to_checkpoint();
        validate_compatible(&deltas, base)?;
        let tensors = base.tensors().map(|(name, b)| {
            let d = &self.deltas[name];
            let values = (0..b.numel()).map(|i| b.get(i) + d.get(i)).collect();
            (name.clone(), Tensor::from_f64_values(b.shape().to_vec(), b.dtype(), values).expect("same shape"))
        });
        Ok(Checkpoint::from_tensors(tensors)?)
    }

    pub fn norm(&self) -> f64 {
        self.deltas.values().map(|t| (0..t.numel()).map(|i| t.get(i) * t.get(i)).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// The deltas as a checkpoint, tagged with the base reference.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_tensors(self.deltas.clone()).expect("names already validated");
        ckpt.metadata.insert("kind".into(), "task_vector".into());
        ckpt.metadata.insert("base_ref".into(), self.base_ref.clone());
        ckpt
    }
}

fn check_coefficient(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(MergeError::CoefficientOutOfRange(c))
    }
}

type Values = Vec<Vec<f64>>;

fn to_values(ckpt: &Checkpoint) -> Values {
    ckpt.tensors().map(|(_, t)| t.to_f64_vec()).collect()
}

/// Rounds f64 accumulators back to a checkpoint shaped like `reference`.
fn from_values(reference: &Checkpoint, values: Values) -> Checkpoint {
    let tensors = reference.tensors().zip(values).map(|((name, t), v)| {
        let tensor = Tensor::from_f64_values(t.shape().to_vec(), t.dtype(), v).expect("shape preserved");
        (name.clone(), tensor)
    });
    Checkpoint::from_tensors(tensors).expect("names already validated")
}

fn lerp_values(a: &Values, b: &Values, c: f64) -> Values {
    a.iter().zip(b).map(|(ta, tb)| ta.iter().zip(tb).map(|(&x, &y)| (1.0 - c) * x + c * y).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn delta(theta: &[f64], base: &[f64]) -> Vec<f64> {
    theta.iter().zip(base).map(|(x, b)| x - b).collect()
}

/// Interpolation weights for one angle group, or the reason to fall back.
fn slerp_weights(dot12: f64, sq1: f64, sq2: f64, c: f64) -> std::result::Result<(f64, f64), FallbackReason> {
    let (n1, n2) = (sq1.sqrt(), sq2.sqrt());
    if n1 < MIN_NORM || n2 < MIN_NORM {
        return Err(FallbackReason::NearZero);
    }
    let cos = (dot12 / (n1 * n2)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < MIN_ANGLE {
        return Err(FallbackReason::Collinear);
    }
    if PI - theta < MIN_ANGLE {
        return Err(FallbackReason::AntiParallel);
    }
    let s = theta.sin();
    Ok((((1.0 - c) * theta).sin() / s, (c * theta).sin() / s))
}

/// Slerp over f64 accumulators. Falls back to linear interpolation of the
/// same operands for degenerate groups.
fn slerp_values(
    names: &[String],
    a: &Values,
    b: &Values,
    base: &Values,
    c: f64,
    scope: AngleScope,
    events: &mut Vec<FallbackEvent>,
) -> Values {
    let tau1: Values = a.iter().zip(base).map(|(x, b)| delta(x, b)).collect();
    let tau2: Values = b.iter().zip(base).map(|(x, b)| delta(x, b)).collect();

    let weights: Vec<std::result::Result<(f64, f64), FallbackReason>> = match scope {
        AngleScope::PerTensor => {
            tau1.iter().zip(&tau2).map(|(t1, t2)| slerp_weights(dot(t1, t2), dot(t1, t1), dot(t2, t2), c)).collect()
        }
        AngleScope::Global => {
            let (mut d12, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for (t1, t2) in tau1.iter().zip(&tau2) {
                d12 += dot(t1, t2);
                s1 += dot(t1, t1);
                s2 += dot(t2, t2);
            }
            vec![slerp_weights(d12, s1, s2, c); names.len()]
        }
    };

    names
        .iter()
        .enumerate()
        .map(|(i, name)| match weights[i] {
            Ok((w1, w2)) => base[i]
                .iter()
                .zip(tau1[i].iter().zip(&tau2[i]))
                .map(|(&b, (&t1, &t2))| b + (w1 * t1 + w2 * t2))
                .collect(),
            Err(reason) => {
                events.push(FallbackEvent { tensor: name.clone(), reason });
                a[i].iter().zip(&b[i]).map(|(&x, &y)| (1.0 - c) * x + c * y).collect()
            }
        })
        .collect()
}

fn hashes(operands: &[&Checkpoint]) -> Vec<String> {
    operands.iter().map(|c| c.content_hash()).collect()
}

struct Provenance<'a> {
    method: MergeMethod,
    coefficient: Option<f64>,
    operands: &'a [&'a Checkpoint],
    base: Option<&'a Checkpoint>,
    scope: Option<AngleScope>,
    events: &'a [FallbackEvent],
}

fn annotate(mut out: Checkpoint, p: Provenance<'_>) -> Checkpoint {
    let md = &mut out.metadata;
    md.insert("producer".into(), "bam-core merge".into());
    md.insert(keys::METHOD.into(), p.method.as_str().into());
    if let Some(c) = p.coefficient {
        md.insert(keys::COEFFICIENT.into(), c.to_string());
    }
    md.insert(keys::OPERAND_HASHES.into(), serde_json::to_string(&hashes(p.operands)).expect("strings serialize"));
    if let Some(base) = p.base {
        md.insert(keys::BASE_HASH.into(), base.content_hash());
    }
    if let Some(scope) = p.scope {
        md.insert(keys::ANGLE_SCOPE.into(), scope.as_str().into());
    }
    let mut tensors: Vec<&str> = p.events.iter().map(|e| e.tensor.as_str()).collect();
    tensors.dedup();
    md.insert(keys::FALLBACK_COUNT.into(), p.events.len().to_string());
    md.insert(keys::FALLBACK_TENSORS.into(), serde_json::to_string(&tensors).expect("strings serialize"));
    let warnings: Vec<String> = p
        .events
        .iter()
        .filter(|e| e.reason == FallbackReason::AntiParallel)
        .map(|e| format!("anti-parallel task vectors in {:?}; used linear interpolation", e.tensor))
        .collect();
    if !warnings.is_empty() {
        md.insert(keys::WARNINGS.into(), serde_json::to_string(&warnings).expect("strings serialize"));
    }
    out
}

/// `(1-c)·a + c·b`, tensor-wise.
pub fn merge_linear(a: &Checkpoint, b: &Checkpoint, c: f64) -> Result<Checkpoint> {
    check_coefficient(c)?;
    validate_compatible(a, b)?;
    let out = from_values(a, lerp_values(&to_values(a), &to_values(b), c));
    Ok(annotate(
        out,
        Provenance {
            method: MergeMethod::Linear,
            coefficient: Some(c),
            operands: &[a, b],
            base: None,
            scope: None,
            events: &[],
        },
    ))
}

/// Spherical interpolation of the task vectors `a - base` and `b - base`.
pub fn merge_slerp(a: &Checkpoint, b: &Checkpoint, base: &Checkpoint, c: f64, scope: AngleScope) -> Result<Checkpoint> {
    check_coefficient(c)?;
    validate_compatible(a, b)?;
    validate_compatible(a, base)?;
    let names: Vec<String> = a.names().cloned().collect();
    let mut events = Vec::new();
    let values = slerp_values(&names, &to_values(a), &to_values(b), &to_values(base), c, scope, &mut events);
    if !events.is_empty() {
        log::debug!("slerp fell back to linear for {} tensor(s)", events.len());
    }
    Ok(annotate(
        from_values(a, values),
        Provenance {
            method: MergeMethod::Slerp,
            coefficient: Some(c),
            operands: &[a, b],
            base: Some(base),
            scope: Some(scope),
            events: &events,
        },
    ))
}

/// Operands sorted by content hash; makes symmetric reductions bitwise
/// independent of the order operands were supplied in.
fn canonical_order<'a>(operands: &[&'a Checkpoint]) -> Vec<&'a Checkpoint> {
    let mut keyed: Vec<(String, &Checkpoint)> = operands.iter().map(|c| (c.content_hash(), *c)).collect();
    keyed.sort_by(|x, y| x.0.cmp(&y.0));
    keyed.into_iter().map(|(_, c)| c).collect()
}

fn validate_all(operands: &[&Checkpoint], base: Option<&Checkpoint>) -> Result<()> {
    let first = operands[0];
    for op in &operands[1..] {
        validate_compatible(first, op)?;
    }
    if let Some(base) = base {
        validate_compatible(first, base)?;
    }
    Ok(())
}

/// The Model Stock ratio `t = K·cos / (1 + (K-1)·cos)` for a mean pairwise
/// cosine, after clamping into its valid range.
pub fn model_stock_ratio(k: usize, mean_cos: f64) -> f64 {
    let k = k as f64;
    let lower = -1.0 / (k - 1.0) + MODEL_STOCK_COS_EPS;
    let cos = mean_cos.clamp(lower, 1.0);
    k * cos / (1.0 + (k - 1.0) * cos)
}

/// Layer-wise Model Stock: moves from `base` toward the mean task vector by
/// a ratio derived from the mean pairwise cosine of the task vectors.
pub fn merge_model_stock(operands: &[&Checkpoint], base: &Checkpoint) -> Result<Checkpoint> {
    if operands.len() < 2 {
        return Err(MergeError::TooFewOperands { method: MergeMethod::ModelStock, need: 2, got: operands.len() });
    }
    validate_all(operands, Some(base))?;
    let ordered = canonical_order(operands);
    let k = ordered.len();
    let base_values = to_values(base);
    let operand_values: Vec<Values> = ordered.iter().map(|c| to_values(c)).collect();
    let names: Vec<String> = base.names().cloned().collect();
    let mut events = Vec::new();

    let out: Values = names
        .iter()
        .enumerate()
        .map(|(t, name)| {
            let taus: Vec<Vec<f64>> = operand_values.iter().map(|v| delta(&v[t], &base_values[t])).collect();
            let norms: Vec<f64> = taus.iter().map(|x| dot(x, x).sqrt()).collect();
            let mut cos_sum = 0.0;
            let mut degenerate = false;
            for i in 0..k {
                for j in i + 1..k {
                    if norms[i] < MIN_NORM || norms[j] < MIN_NORM {
                        degenerate = true;
                    } else {
                        cos_sum += (dot(&taus[i], &taus[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                    }
                }
            }
            if degenerate {
                events.push(FallbackEvent { tensor: name.clone(), reason: FallbackReason::NearZero });
            }
            let pairs = (k * (k - 1) / 2) as f64;
            let ratio = model_stock_ratio(k, cos_sum / pairs);
            let len = base_values[t].len();
            (0..len)
                .map(|e| {
                    let mean = taus.iter().map(|x| x[e]).sum::<f64>() / k as f64;
                    base_values[t][e] + ratio * mean
                })
                .collect()
        })
        .collect();

    Ok(annotate(
        from_values(base, out),
        Provenance {
            method: MergeMethod::ModelStock,
            coefficient: None,
            operands,
            base: Some(base),
            scope: None,
            events: &events,
        },
    ))
}

/// Uniform mean of the operands, anchored at `base` when one is given.
fn uniform_linear(operands: &[&Checkpoint], base: Option<&Checkpoint>) -> Values {
    let ordered = canonical_order(operands);
    let k = ordered.len() as f64;
    let values: Vec<Values> = ordered.iter().map(|c| to_values(c)).collect();
    match base {
        Some(base) => to_values(base)
            .into_iter()
            .enumerate()
            .map(|(t, b)| {
                b.iter().enumerate().map(|(e, &x)| x + values.iter().map(|v| v[t][e] - x).sum::<f64>() / k).collect()
            })
            .collect(),
        None => (0..values[0].len())
            .map(|t| (0..values[0][t].len()).map(|e| values.iter().map(|v| v[t][e]).sum::<f64>() / k).collect())
            .collect(),
    }
}

/// Balanced left-to-right pairwise slerp at c = 0.5: `((1⊕2)⊕(3⊕4))`.
fn hierarchical_slerp(
    names: &[String],
    operands: &[Values],
    base: &Values,
    scope: AngleScope,
    events: &mut Vec<FallbackEvent>,
) -> Values {
    match operands.len() {
        1 => operands[0].clone(),
        n => {
            let (left, right) = operands.split_at(n.div_ceil(2));
            let l = hierarchical_slerp(names, left, base, scope, events);
            let r = hierarchical_slerp(names, right, base, scope, events);
            slerp_values(names, &l, &r, base, 0.5, scope, events)
        }
    }
}

fn composition_tree(n: usize, offset: usize) -> String {
    if n == 1 {
        return (offset + 1).to_string();
    }
    let left = n.div_ceil(2);
    format!("({}⊕{})", composition_tree(left, offset), composition_tree(n - left, offset + left))
}

/// Merges K branch checkpoints according to `plan`.
///
/// * one operand is returned unchanged;
/// * linear with two operands interpolates at the plan coefficient, more
///   operands are averaged uniformly;
/// * slerp with two operands uses the plan coefficient, more operands are
///   combined by hierarchical pairwise slerp at 0.5;
/// * model stock delegates to [`merge_model_stock`].
pub fn merge_k(operands: &[&Checkpoint], base: Option<&Checkpoint>, plan: &MergePlan) -> Result<Checkpoint> {
    check_coefficient(plan.coefficient)?;
    match operands.len() {
        0 => return Err(MergeError::TooFewOperands { method: plan.method, need: 1, got: 0 }),
        1 => return Ok(operands[0].clone()),
        _ => {}
    }
    match plan.method {
        MergeMethod::Linear if operands.len() == 2 => merge_linear(operands[0], operands[1], plan.coefficient),
        MergeMethod::Linear => {
            validate_all(operands, base)?;
            let out = from_values(operands[0], uniform_linear(operands, base));
            Ok(annotate(
                out,
                Provenance { method: MergeMethod::Linear, coefficient: None, operands, base, scope: None, events: &[] },
            )
            .with_metadata(keys::COMPOSITION, "uniform"))
        }
        MergeMethod::Slerp => {
            let base = base.ok_or(MergeError::MissingBase(MergeMethod::Slerp))?;
            if operands.len() == 2 {
                return merge_slerp(operands[0], operands[1], base, plan.coefficient, plan.angle_scope);
            }
            validate_all(operands, Some(base))?;
            let names: Vec<String> = base.names().cloned().collect();
            let values: Vec<Values> = operands.iter().map(|c| to_values(c)).collect();
            let mut events = Vec::new();
            let out = hierarchical_slerp(&names, &values, &to_values(base), plan.angle_scope, &mut events);
            Ok(annotate(
                from_values(base, out),
                Provenance {
                    method: MergeMethod::Slerp,
                    coefficient: Some(0.5),
                    operands,
                    base: Some(base),
                    scope: Some(plan.angle_scope),
                    events: &events,
                },
            )
            .with_metadata(keys::COMPOSITION, composition_tree(operands.len(), 0)))
        }
        MergeMethod::ModelStock => {
            let base = base.ok_or(MergeError::MissingBase(MergeMethod::ModelStock))?;
            merge_model_stock(operands, base)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightChange {
    pub global: f64,
    pub per_tensor: BTreeMap<String, f64>,
}

/// L2 norm of `after - before`, globally and per tensor.
pub fn weight_change_norm(after: &Checkpoint, before: &Checkpoint) -> Result<WeightChange> {
    validate_compatible(after, before)?;
    let mut total = 0.0;
    let mut per_tensor = BTreeMap::new();
    for (name, a) in after.tensors() {
        let b = before.get(name).expect("validated");
        let sq: f64 = (0..a.numel()).map(|i| (a.get(i) - b.get(i)).powi(2)).sum();
        total += sq;
        per_tensor.insert(name.clone(), sq.sqrt());
    }
    Ok(WeightChange { global: total.sqrt(), per_tensor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::DType;
    use proptest::prelude::*;

    fn ck1(name: &str, v: Vec<f64>) -> Checkpoint {
        let n = v.len();
        Checkpoint::from_tensors([(name, Tensor::f64(vec![n], v).unwrap())]).unwrap()
    }

    fn values(c: &Checkpoint, name: &str) -> Vec<f64> {
        c.get(name).unwrap().to_f64_vec()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn task_vector_arithmetic() {
        let base = ck1("w", vec![1.0, 2.0]);
        let theta = ck1("w", vec![3.0, 5.0]);
        let tv = task_vector(&theta, &base).unwrap();
        assert_eq!(tv.deltas["w"].to_f64_vec(), vec![2.0, 3.0]);
        assert_eq!(tv.base_ref, base.content_hash());
        assert_eq!(tv.reconstruct(&base).unwrap().content_hash(), theta.content_hash());
        assert_eq!(tv.norm(), 13f64.sqrt());

        let zero = task_vector(&base, &base).unwrap();
        assert!(zero.deltas["w"].to_f64_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn task_vector_rejects_mismatch_and_wrong_base() {
        let base = ck1("w", vec![1.0, 2.0]);
        assert!(matches!(task_vector(&ck1("w", vec![1.0, 2.0, 3.0]), &base), Err(MergeError::Incompatible(_))));
        let tv = task_vector(&ck1("w", vec![0.0, 0.0]), &base).unwrap();
        assert!(matches!(tv.reconstruct(&ck1("w", vec![9.0, 9.0])), Err(MergeError::BaseMismatch { .. })));
    }

    #[test]
    fn linear_endpoints_and_midpoint() {
        let a = ck1("w", vec![0.0, 0.0]);
        let b = ck1("w", vec![2.0, 4.0]);
        assert_eq!(values(&merge_linear(&a, &b, 0.0).unwrap(), "w"), vec![0.0, 0.0]);
        assert_eq!(values(&merge_linear(&a, &b, 1.0).unwrap(), "w"), vec![2.0, 4.0]);
        let mid = merge_linear(&a, &b, 0.5).unwrap();
        assert_eq!(values(&mid, "w"), vec![1.0, 2.0]);
        assert_eq!(mid.metadata[keys::METHOD], "linear");
        assert_eq!(mid.metadata[keys::COEFFICIENT], "0.5");
        for c in [0.0, 0.3, 0.9] {
            assert_eq!(values(&merge_linear(&b, &b, c).unwrap(), "w"), vec![2.0, 4.0]);
        }
    }

    #[test]
    fn coefficient_range_enforced() {
        let a = ck1("w", vec![0.0]);
        assert!(matches!(merge_linear(&a, &a, 1.5), Err(MergeError::CoefficientOutOfRange(_))));
        assert!(matches!(
            merge_slerp(&a, &a, &a, -0.1, AngleScope::PerTensor),
            Err(MergeError::CoefficientOutOfRange(_))
        ));
    }

    #[test]
    fn slerp_orthogonal_unit_vectors() {
        let base = ck1("w", vec![0.0, 0.0]);
        let a = ck1("w", vec![1.0, 0.0]);
        let b = ck1("w", vec![0.0, 1.0]);
        let out = merge_slerp(&a, &b, &base, 0.5, AngleScope::PerTensor).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_close(&values(&out, "w"), &[h, h], 1e-12);
        assert_eq!(out.metadata[keys::FALLBACK_COUNT], "0");
        assert_eq!(out.metadata[keys::ANGLE_SCOPE], "per_tensor");
    }

    #[test]
    fn slerp_endpoints() {
        let base = ck1("w", vec![0.5, -1.0, 2.0]);
        let a = ck1("w", vec![1.0, 0.0, 2.5]);
        let b = ck1("w", vec![0.0, 1.0, 1.0]);
        for scope in [AngleScope::PerTensor, AngleScope::Global] {
            assert_close(&values(&merge_slerp(&a, &b, &base, 0.0, scope).unwrap(), "w"), &values(&a, "w"), 1e-12);
            assert_close(&values(&merge_slerp(&a, &b, &base, 1.0, scope).unwrap(), "w"), &values(&b, "w"), 1e-12);
        }
    }

    #[test]
    fn slerp_collinear_falls_back_to_linear() {
        let base = ck1("w", vec![1.0, 1.0, 1.0]);
        let b = ck1("w", vec![2.0, 3.0, 1.5]);
        let a = ck1("w", vec![3.0, 5.0, 2.0]);
        let out = merge_slerp(&a, &b, &base, 0.3, AngleScope::PerTensor).unwrap();
        let lin = merge_linear(&a, &b, 0.3).unwrap();
        assert_eq!(values(&out, "w"), values(&lin, "w"));
        assert_eq!(recorded_fallbacks(&out), vec!["w".to_string()]);
    }

    #[test]
    fn slerp_antiparallel_warns() {
        let base = ck1("w", vec![0.0, 0.0]);
        let a = ck1("w", vec![1.0, 0.0]);
        let b = ck1("w", vec![-2.0, 0.0]);
        let out = merge_slerp(&a, &b, &base, 0.5, AngleScope::Global).unwrap();
        assert_eq!(values(&out, "w"), vec![-0.5, 0.0]);
        assert!(out.metadata[keys::WARNINGS].contains("anti-parallel"));
    }

    #[test]
    fn slerp_zero_task_vector_falls_back() {
        let base = ck1("w", vec![1.0, 2.0]);
        let b = ck1("w", vec![3.0, 2.0]);
        let out = merge_slerp(&base, &b, &base, 0.25, AngleScope::PerTensor).unwrap();
        assert_eq!(values(&out, "w"), values(&merge_linear(&base, &b, 0.25).unwrap(), "w"));
        assert_eq!(out.metadata[keys::FALLBACK_COUNT], "1");
    }

    #[test]
    fn slerp_scope_changes_angle() {
        // Two tensors whose per-tensor angles differ from the global angle.
        let mk = |x: [f64; 2], y: [f64; 2]| {
            Checkpoint::from_tensors([
                ("x", Tensor::f64(vec![2], x.to_vec()).unwrap()),
                ("y", Tensor::f64(vec![2], y.to_vec()).unwrap()),
            ])
            .unwrap()
        };
        let base = mk([0.0, 0.0], [0.0, 0.0]);
        let a = mk([1.0, 0.0], [1.0, 0.0]);
        let b = mk([0.0, 1.0], [1.0, 1.0]);
        let per = merge_slerp(&a, &b, &base, 0.5, AngleScope::PerTensor).unwrap();
        let glob = merge_slerp(&a, &b, &base, 0.5, AngleScope::Global).unwrap();
        assert_ne!(values(&per, "x"), values(&glob, "x"));
        assert_eq!(glob.metadata[keys::ANGLE_SCOPE], "global");
    }

    #[test]
    fn model_stock_examples() {
        let base = ck1("w", vec![0.0, 0.0]);
        let a = ck1("w", vec![1.0, 0.0]);
        let b = ck1("w", vec![0.0, 1.0]);
        assert_close(&values(&merge_model_stock(&[&a, &b], &base).unwrap(), "w"), &[0.0, 0.0], 1e-15);

        let same = merge_model_stock(&[&a, &a, &a], &base).unwrap();
        assert_close(&values(&same, "w"), &[1.0, 0.0], 1e-12);

        let zero = merge_model_stock(&[&base, &base], &base).unwrap();
        assert_eq!(values(&zero, "w"), vec![0.0, 0.0]);

        assert!(matches!(merge_model_stock(&[&a], &base), Err(MergeError::TooFewOperands { .. })));
    }

    /// Direct scalar evaluation of the ratio formula, element by element.
    fn model_stock_oracle(ops: &[Vec<f64>], base: &[f64]) -> Vec<f64> {
        let k = ops.len();
        let tau: Vec<Vec<f64>> = ops.iter().map(|o| o.iter().zip(base).map(|(x, b)| x - b).collect()).collect();
        let mut cos = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let mut d = 0.0;
                let mut ni = 0.0;
                let mut nj = 0.0;
                for (x, y) in tau[i].iter().zip(&tau[j]) {
                    d += x * y;
                    ni += x * x;
                    nj += y * y;
                }
                cos.push(d / (ni.sqrt() * nj.sqrt()));
            }
        }
        let c = cos.iter().sum::<f64>() / cos.len() as f64;
        let t = k as f64 * c / (1.0 + (k as f64 - 1.0) * c);
        (0..base.len()).map(|e| base[e] + t * tau.iter().map(|v| v[e]).sum::<f64>() / k as f64).collect()
    }

    #[test]
    fn model_stock_matches_scalar_oracle() {
        let base = vec![0.1, -0.2, 0.3, 0.0];
        let ops = [vec![1.0, 0.5, 0.3, 0.2], vec![0.8, 0.1, 0.6, -0.1], vec![1.2, 0.4, 0.2, 0.3]];
        let cks: Vec<Checkpoint> = ops.iter().map(|o| ck1("w", o.clone())).collect();
        let refs: Vec<&Checkpoint> = cks.iter().collect();
        let out = merge_model_stock(&refs, &ck1("w", base.clone())).unwrap();
        assert_close(&values(&out, "w"), &model_stock_oracle(&ops, &base), 1e-12);
    }

    #[test]
    fn merge_k_cases() {
        let base = ck1("w", vec![0.0]);
        let a = ck1("w", vec![2.0]);
        let b = ck1("w", vec![4.0]);
        let plan = MergePlan::new(MergeMethod::Linear);
        assert_eq!(values(&merge_k(&[&a, &b], Some(&base), &plan).unwrap(), "w"), vec![3.0]);
        assert!(matches!(merge_k(&[], Some(&base), &plan), Err(MergeError::TooFewOperands { .. })));
        assert_eq!(merge_k(&[&a], None, &plan).unwrap(), a);
        assert!(matches!(
            merge_k(&[&a, &b], None, &MergePlan::new(MergeMethod::Slerp)),
            Err(MergeError::MissingBase(MergeMethod::Slerp))
        ));

        let op = ck1("w", vec![1.0, -2.0, 0.5]);
        let base3 = ck1("w", vec![0.0, 0.0, 0.0]);
        for method in [MergeMethod::Linear, MergeMethod::Slerp, MergeMethod::ModelStock] {
            let out = merge_k(&[&op, &op, &op, &op], Some(&base3), &MergePlan::new(method)).unwrap();
            assert_close(&values(&out, "w"), &values(&op, "w"), 1e-12);
        }
    }

    #[test]
    fn hierarchical_slerp_matches_manual_tree() {
        let base = ck1("w", vec![0.0, 0.0, 0.0]);
        let ops: Vec<Checkpoint> = [[1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.0, 0.4, 1.0], [0.5, 0.5, 0.5]]
            .iter()
            .map(|v| ck1("w", v.to_vec()))
            .collect();
        let refs: Vec<&Checkpoint> = ops.iter().collect();
        let out = merge_k(&refs, Some(&base), &MergePlan::new(MergeMethod::Slerp)).unwrap();
        let s = AngleScope::PerTensor;
        let l = merge_slerp(&ops[0], &ops[1], &base, 0.5, s).unwrap();
        let r = merge_slerp(&ops[2], &ops[3], &base, 0.5, s).unwrap();
        let manual = merge_slerp(&l, &r, &base, 0.5, s).unwrap();
        assert_close(&values(&out, "w"), &values(&manual, "w"), 1e-12);
        assert_eq!(out.metadata[keys::COMPOSITION], "((1⊕2)⊕(3⊕4))");
        assert_eq!(composition_tree(3, 0), "((1⊕2)⊕3)");
    }

    #[test]
    fn weight_change_examples() {
        let a = ck1("w", vec![1.0, 1.0]);
        assert_eq!(weight_change_norm(&a, &a).unwrap().global, 0.0);
        let b = ck1("w", vec![4.0, 5.0]);
        let wc = weight_change_norm(&b, &a).unwrap();
        assert_eq!(wc.global, 5.0);
        assert_eq!(wc.per_tensor["w"], 5.0);
    }

    #[test]
    fn f32_outputs_stay_f32() {
        let a = Checkpoint::from_tensors([("w", Tensor::f32(vec![2], vec![0.1, 0.2]).unwrap())]).unwrap();
        let b = Checkpoint::from_tensors([("w", Tensor::f32(vec![2], vec![0.3, 0.7]).unwrap())]).unwrap();
        let out = merge_linear(&a, &b, 0.0).unwrap();
        assert_eq!(out.get("w").unwrap().dtype(), DType::F32);
        assert_eq!(out.get("w").unwrap(), a.get("w").unwrap());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 4)
    }

    proptest! {
        #[test]
        fn linear_and_slerp_symmetric_at_half(a in vec_strategy(), b in vec_strategy(), base in vec_strategy()) {
            let (a, b, base) = (ck1("w", a), ck1("w", b), ck1("w", base));
            prop_assert_eq!(
                values(&merge_linear(&a, &b, 0.5).unwrap(), "w"),
                values(&merge_linear(&b, &a, 0.5).unwrap(), "w")
            );
            let ab = values(&merge_slerp(&a, &b, &base, 0.5, AngleScope::PerTensor).unwrap(), "w");
            let ba = values(&merge_slerp(&b, &a, &base, 0.5, AngleScope::PerTensor).unwrap(), "w");
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn uniform_merges_ignore_operand_order(
            ops in prop::collection::vec(vec_strategy(), 3..6),
            base in vec_strategy(),
            seed in any::<u64>(),
        ) {
            let cks: Vec<Checkpoint> = ops.into_iter().map(|v| ck1("w", v)).collect();
            let base = ck1("w", base);
            let mut shuffled: Vec<&Checkpoint> = cks.iter().collect();
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            let refs: Vec<&Checkpoint> = cks.iter().collect();
            for method in [MergeMethod::Linear, MergeMethod::ModelStock] {
                let plan = MergePlan::new(method);
                let x = merge_k(&refs, Some(&base), &plan).unwrap();
                let y = merge_k(&shuffled, Some(&base), &plan).unwrap();
                prop_assert_eq!(x.content_hash(), y.content_hash());
            }
        }
    }
}
