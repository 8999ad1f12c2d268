//! Multinomial logistic regression and one-hidden-layer tanh MLP, with
//! hand-written cross-entropy gradients.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::ToyError;
use crate::checkpoint::{Checkpoint, Tensor};
pub use crate::orchestrator::EvalMetrics;
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Logistic,
    Mlp,
}

/// Parameters live in one flat vector. Logistic layout: `w0 [C×D]`, `b0 [C]`.
/// MLP layout: `w0 [H×D]`, `b0 [H]`, `w1 [C×H]`, `b1 [C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub params: Vec<f64>,
}

struct Layout {
    w0: (usize, usize),
    b0: (usize, usize),
    w1: (usize, usize),
    b1: (usize, usize),
}

impl ToyModel {
    pub fn zeros(architecture: Architecture, input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        let mut m = Self {
            architecture,
            input_dim,
            hidden_dim: if architecture == Architecture::Logistic { 0 } else { hidden_dim },
            n_classes,
            params: Vec::new(),
        };
        m.params = vec![0.0; m.n_params()];
        m
    }

    /// Gaussian init with std `1/sqrt(fan_in)` for weights, zero biases.
    pub fn init(architecture: Architecture, input_dim: usize, hidden_dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut m = Self::zeros(architecture, input_dim, hidden_dim, n_classes);
        let mut r = rng(seed);
        let l = m.layout();
        let fill = |params: &mut [f64], fan_in: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            params.iter_mut().for_each(|p| *p = normal.sample(r));
        };
        fill(&mut m.params[l.w0.0..l.w0.1], input_dim, &mut r);
        if architecture == Architecture::Mlp {
            fill(&mut m.params[l.w1.0..l.w1.1], hidden_dim, &mut r);
        }
        m
    }

    pub fn n_params(&self) -> usize {
        let l = self.layout();
        l.b1.1.max(l.b0.1)
    }

    fn layout(&self) -> Layout {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        match self.architecture {
            Architecture::Logistic => Layout { w0: (0, c * d), b0: (c * d, c * d + c), w1: (0, 0), b1: (0, 0) },
            Architecture::Mlp => {
                let w0 = (0, h * d);
                let b0 = (w0.1, w0.1 + h);
                let w1 = (b0.1, b0.1 + c * h);
                let b1 = (w1.1, w1.1 + c);
                Layout { w0, b0, w1, b1 }
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let l = self.layout();
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        let slice = |r: (usize, usize)| self.params[r.0..r.1].to_vec();
        let mut tensors = Vec::new();
        match self.architecture {
            Architecture::Logistic => {
                tensors.push(("w0", Tensor::f64(vec![c, d], slice(l.w0))));
                tensors.push(("b0", Tensor::f64(vec![c], slice(l.b0))));
            }
            Architecture::Mlp => {
                tensors.push(("w0", Tensor::f64(vec![h, d], slice(l.w0))));
                tensors.push(("b0", Tensor::f64(vec![h], slice(l.b0))));
                tensors.push(("w1", Tensor::f64(vec![c, h], slice(l.w1))));
                tensors.push(("b1", Tensor::f64(vec![c], slice(l.b1))));
            }
        }
        let tensors = tensors.into_iter().map(|(n, t)| (n, t.expect("layout sizes agree")));
        let mut ckpt = Checkpoint::from_tensors(tensors).expect("fixed names");
        let arch = match self.architecture {
            Architecture::Logistic => "logistic",
            Architecture::Mlp => "mlp",
        };
        ckpt.metadata.insert("architecture".into(), arch.into());
        ckpt.metadata.insert("input_dim".into(), d.to_string());
        ckpt.metadata.insert("hidden_dim".into(), h.to_string());
        ckpt.metadata.insert("n_classes".into(), c.to_string());
        ckpt
    }

    /// Rebuilds a model from its checkpoint; architecture and dimensions are
    /// inferred from tensor names and shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ToyError> {
        let invalid = |msg: String| ToyError::InvalidModel(msg);
        let get = |name: &str| ckpt.get(name).ok_or_else(|| invalid(format!("missing tensor {name:?}")));
        let matrix = |name: &str| -> Result<(usize, usize), ToyError> {
            match get(name)?.shape() {
                [r, c] => Ok((*r, *c)),
                s => Err(invalid(format!("{name} must be 2-D, got shape {s:?}"))),
            }
        };
        let vector = |name: &str, len: usize| -> Result<(), ToyError> {
            match get(name)?.shape() {
                [n] if *n == len => Ok(()),
                s => Err(invalid(format!("{name} must have shape [{len}], got {s:?}"))),
            }
        };
        let (rows0, d) = matrix("w0")?;
        vector("b0", rows0)?;
        let mut model = if ckpt.get("w1").is_some() {
            let (c, h) = matrix("w1")?;
            if h != rows0 {
                return Err(invalid(format!("w1 expects {h} hidden units, w0 has {rows0}")));
            }
            vector("b1", c)?;
            if ckpt.len() != 4 {
                return Err(invalid("MLP checkpoints hold exactly w0, b0, w1, b1".into()));
            }
            Self::zeros(Architecture::Mlp, d, h, c)
        } else {
            if ckpt.len() != 2 {
                return Err(invalid("logistic checkpoints hold exactly w0, b0".into()));
            }
            Self::zeros(Architecture::Logistic, d, 0, rows0)
        };
        let l = model.layout();
        let mut copy = |name: &str, r: (usize, usize)| {
            let t = ckpt.get(name).expect("checked above");
            for (i, p) in model.params[r.0..r.1].iter_mut().enumerate() {
                *p = t.get(i);
            }
        };
        copy("w0", l.w0);
        copy("b0", l.b0);
        if model.architecture == Architecture::Mlp {
            copy("w1", l.w1);
            copy("b1", l.b1);
        }
        Ok(model)
    }

    fn check_sample(&self, s: &Sample) -> Result<(), ToyError> {
        if s.x.len() != self.input_dim {
            return Err(ToyError::DimensionMismatch { expected: self.input_dim, got: s.x.len() });
        }
        if s.y >= self.n_classes {
            return Err(ToyError::InvalidModel(format!("label {} outside 0..{}", s.y, self.n_classes)));
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64], out: &mut Vec<f64>) {
        let l = self.layout();
        let (d, h) = (self.input_dim, self.hidden_dim);
        let w0 = &self.params[l.w0.0..l.w0.1];
        let b0 = &self.params[l.b0.0..l.b0.1];
        out.clear();
        out.extend((0..h).map(|j| {
            let row = &w0[j * d..(j + 1) * d];
            (b0[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
        }));
    }

    /// Output logits; `hidden` receives the MLP activations.
    fn logits(&self, x: &[f64], hidden: &mut Vec<f64>) -> Vec<f64> {
        let l = self.layout();
        let c = self.n_classes;
        let (input, w, b) = match self.architecture {
            Architecture::Logistic => (x, &self.params[l.w0.0..l.w0.1], &self.params[l.b0.0..l.b0.1]),
            Architecture::Mlp => {
                self.hidden(x, hidden);
                (hidden.as_slice(), &self.params[l.w1.0..l.w1.1], &self.params[l.b1.0..l.b1.1])
            }
        };
        let k = input.len();
        (0..c).map(|i| b[i] + w[i * k..(i + 1) * k].iter().zip(input).map(|(a, v)| a * v).sum::<f64>()).collect()
    }

    pub fn predict_log_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut h = Vec::new();
        log_softmax(&self.logits(x, &mut h))
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to
    /// [`ToyModel::params`].
    pub fn loss_and_grad(&self, batch: &[&Sample]) -> Result<(f64, Vec<f64>), ToyError> {
        if batch.is_empty() {
            return Err(ToyError::EmptyData);
        }
        let l = self.layout();
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let mut hidden = Vec::with_capacity(h);
        let scale = 1.0 / batch.len() as f64;
        for s in batch {
            self.check_sample(s)?;
            let logp = log_softmax(&self.logits(&s.x, &mut hidden));
            loss -= logp[s.y];
            // dL/dlogits = softmax - onehot
            let dlogits: Vec<f64> =
                logp.iter().enumerate().map(|(i, lp)| (lp.exp() - if i == s.y { 1.0 } else { 0.0 }) * scale).collect();
            match self.architecture {
                Architecture::Logistic => {
                    for i in 0..c {
                        let row = &mut grad[l.w0.0 + i * d..l.w0.0 + (i + 1) * d];
                        row.iter_mut().zip(&s.x).for_each(|(g, v)| *g += dlogits[i] * v);
                        grad[l.b0.0 + i] += dlogits[i];
                    }
                }
                Architecture::Mlp => {
                    let w1 = &self.params[l.w1.0..l.w1.1];
                    let mut dh = vec![0.0; h];
                    for i in 0..c {
                        for j in 0..h {
                            grad[l.w1.0 + i * h + j] += dlogits[i] * hidden[j];
                            dh[j] += w1[i * h + j] * dlogits[i];
                        }
                        grad[l.b1.0 + i] += dlogits[i];
                    }
                    for j in 0..h {
                        let dz = dh[j] * (1.0 - hidden[j] * hidden[j]);
                        let row = &mut grad[l.w0.0 + j * d..l.w0.0 + (j + 1) * d];
                        row.iter_mut().zip(&s.x).for_each(|(g, v)| *g += dz * v);
                        grad[l.b0.0 + j] += dz;
                    }
                }
            }
        }
        Ok((loss * scale, grad))
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalMetrics, ToyError> {
        if samples.is_empty() {
            return Err(ToyError::EmptyData);
        }
        let mut nll = 0.0;
        let mut correct = 0usize;
        let mut hidden = Vec::new();
        for s in samples {
            self.check_sample(s)?;
            let logp = log_softmax(&self.logits(&s.x, &mut hidden));
            nll -= logp[s.y];
            // Ties resolve to the lowest class index.
            let best = logp.iter().enumerate().fold(0, |best, (i, &v)| if v > logp[best] { i } else { best });
            correct += usize::from(best == s.y);
        }
        let n = samples.len() as f64;
        Ok(EvalMetrics { nll: nll / n, accuracy: correct as f64 / n })
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Evaluates a checkpoint on a labelled sample set.
pub fn evaluate(ckpt: &Checkpoint, samples: &[Sample]) -> Result<EvalMetrics, ToyError> {
    ToyModel::from_checkpoint(ckpt)?.evaluate(samples)
}
