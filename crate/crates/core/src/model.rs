//! Toy dual-encoder prompt classifier.
//!
//! Prompts are additive offsets applied before re-normalization: the image
//! embedding is `normalize(x + v1)` and the text embedding of class `c` is
//! `normalize(e_c + v2)`. The posterior is a softmax of cosine similarity
//! over temperature. Only `v1` and `v2` are trainable; class embeddings and
//! raw features are frozen.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, norm, DiscreteDistribution, FeatureVector, SampleSet};

/// Unit-norm tolerance for class embeddings.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Below this norm an offset is considered to cancel its base vector.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// Default temperature (CLIP's customary value).
pub const DEFAULT_TAU: f64 = 0.07;

/// Default SGD learning rate.
pub const DEFAULT_LR: f64 = 0.0025;

/// Learnable visual (`v1`) and textual (`v2`) offsets. Serializes as the
/// checkpoint object `{"v1": [...], "v2": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub v1: FeatureVector,
    pub v2: FeatureVector,
}

impl PromptParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            v1: FeatureVector::zeros(d),
            v2: FeatureVector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.v1.dim()
    }

    fn check(&self) -> Result<()> {
        if self.v1.dim() != self.v2.dim() {
            return Err(Error::DimensionMismatch(self.v1.dim(), self.v2.dim()));
        }
        Ok(())
    }
}

/// Gradient with respect to `(v1, v2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGrad {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl PromptGrad {
    pub fn zeros(d: usize) -> Self {
        Self {
            v1: vec![0.0; d],
            v2: vec![0.0; d],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PromptGrad, scale: f64) {
        for (a, b) in self.v1.iter_mut().zip(&other.v1) {
            *a += scale * b;
        }
        for (a, b) in self.v2.iter_mut().zip(&other.v2) {
            *a += scale * b;
        }
    }

    /// Flattened `[v1, v2]`.
    pub fn flat(&self) -> Vec<f64> {
        self.v1.iter().chain(&self.v2).copied().collect()
    }
}

/// Frozen text-side class embeddings plus the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    embeddings: BTreeMap<usize, FeatureVector>,
    tau: f64,
}

impl ClassBank {
    pub fn new(embeddings: BTreeMap<usize, FeatureVector>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParams(format!(
                "tau must be positive, got {tau}"
            )));
        }
        let mut dim = None;
        for (id, e) in &embeddings {
            if *dim.get_or_insert(e.dim()) != e.dim() {
                return Err(Error::DimensionMismatch(dim.unwrap(), e.dim()));
            }
            if (e.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidParams(format!(
                    "embedding of class {id} is not unit norm"
                )));
            }
        }
        Ok(Self { embeddings, tau })
    }

    /// Normalizes every embedding first.
    pub fn from_raw(embeddings: BTreeMap<usize, FeatureVector>, tau: f64) -> Result<Self> {
        let normalized = embeddings
            .into_iter()
            .map(|(id, e)| e.normalized().map(|n| (id, n)))
            .collect::<Result<_>>()?;
        Self::new(normalized, tau)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Same embeddings, different temperature.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(self.embeddings.clone(), tau)
    }

    pub fn get(&self, class_id: usize) -> Result<&FeatureVector> {
        self.embeddings
            .get(&class_id)
            .ok_or(Error::UnknownClass(class_id))
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.embeddings.keys().copied().collect()
    }

    pub fn embeddings(&self) -> &BTreeMap<usize, FeatureVector> {
        &self.embeddings
    }
}

/// `x / ‖x‖` together with `‖x‖`; errors below [`DEGENERATE_NORM`].
fn unit_with_norm(x: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    let n = norm(&x);
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::DegenerateSum);
    }
    Ok((x.into_iter().map(|v| v / n).collect(), n))
}

/// Pulls a gradient on `u = w/‖w‖` back to `w`: `(g − u(u·g)) / ‖w‖`.
fn unit_backward(unit: &[f64], n: f64, dl_dunit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, dl_dunit);
    unit.iter()
        .zip(dl_dunit)
        .map(|(u, g)| (g - u * proj) / n)
        .collect()
}

fn add_vec(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn text_embedding(
    class_id: usize,
    params: &PromptParams,
    bank: &ClassBank,
) -> Result<FeatureVector> {
    let base = bank.get(class_id)?;
    let (u, _) = unit_with_norm(add_vec(base.as_slice(), params.v2.as_slice())?)?;
    FeatureVector::new(u)
}

pub fn image_embedding(x: &FeatureVector, params: &PromptParams) -> Result<FeatureVector> {
    let (u, _) = unit_with_norm(add_vec(x.as_slice(), params.v1.as_slice())?)?;
    FeatureVector::new(u)
}

/// Text embeddings of a class set, cached with their pre-normalization norms.
#[derive(Debug, Clone)]
pub(crate) struct TextTable {
    slot: HashMap<usize, usize>,
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl TextTable {
    pub fn new(params: &PromptParams, bank: &ClassBank, class_set: &[usize]) -> Result<Self> {
        if class_set.is_empty() {
            return Err(Error::InvalidParams("empty class set".into()));
        }
        let mut units = Vec::with_capacity(class_set.len());
        let mut norms = Vec::with_capacity(class_set.len());
        let mut slot = HashMap::new();
        for (k, &c) in class_set.iter().enumerate() {
            let (u, n) = unit_with_norm(add_vec(bank.get(c)?.as_slice(), params.v2.as_slice())?)?;
            units.push(u);
            norms.push(n);
            slot.insert(c, k);
        }
        Ok(Self { slot, units, norms })
    }

    pub fn slot_of(&self, class_id: usize) -> Option<usize> {
        self.slot.get(&class_id).copied()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    /// Accumulates `dL/dv2` from per-class gradients on the unit embeddings.
    pub fn backward(&self, dl_dunits: &[Vec<f64>], grad_v2: &mut [f64]) {
        for ((u, &n), g) in self.units.iter().zip(&self.norms).zip(dl_dunits) {
            for (acc, v) in grad_v2.iter_mut().zip(unit_backward(u, n, g)) {
                *acc += v;
            }
        }
    }
}

/// Forward pass of a batch of features against a [`TextTable`].
#[derive(Debug, Clone)]
pub(crate) struct BatchForward {
    pub images: Vec<Vec<f64>>,
    norms: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
    /// Log-probabilities, computed with log-sum-exp.
    pub log_probs: Vec<Vec<f64>>,
}

impl BatchForward {
    pub fn new<F: AsRef<[f64]>>(
        features: &[F],
        params: &PromptParams,
        texts: &TextTable,
        tau: f64,
    ) -> Result<Self> {
        let mut images = Vec::with_capacity(features.len());
        let mut norms = Vec::with_capacity(features.len());
        let mut probs = Vec::with_capacity(features.len());
        let mut log_probs = Vec::with_capacity(features.len());
        for x in features {
            let (f, n) = unit_with_norm(add_vec(x.as_ref(), params.v1.as_slice())?)?;
            let logits: Vec<f64> = texts.units.iter().map(|g| dot(&f, g) / tau).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            let lp: Vec<f64> = logits.iter().map(|s| s - lse).collect();
            let mut p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= total);
            images.push(f);
            norms.push(n);
            probs.push(p);
            log_probs.push(lp);
        }
        Ok(Self {
            images,
            norms,
            probs,
            log_probs,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    /// Elementwise mean of the per-sample posteriors.
    pub fn mean_probs(&self) -> Vec<f64> {
        let k = self.probs.first().map_or(0, Vec::len);
        let mut acc = vec![0.0; k];
        for p in &self.probs {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        let n = self.probs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Softmax Jacobian: logit gradients from probability gradients.
    pub fn logits_from_prob_grads(&self, dl_dprobs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.probs
            .iter()
            .zip(dl_dprobs)
            .map(|(p, g)| {
                let inner = dot(p, g);
                p.iter().zip(g).map(|(pi, gi)| pi * (gi - inner)).collect()
            })
            .collect()
    }

    /// Backpropagates logit gradients (and optional direct gradients on the
    /// image embeddings) into `grad.v1` and the per-class text accumulators.
    pub fn backward(
        &self,
        texts: &TextTable,
        tau: f64,
        dl_dlogits: &[Vec<f64>],
        dl_dimages: Option<&[Vec<f64>]>,
        grad_v1: &mut [f64],
        dl_dtexts: &mut [Vec<f64>],
    ) {
        let d = grad_v1.len();
        for (i, f) in self.images.iter().enumerate() {
            let mut dl_df = match dl_dimages {
                Some(g) => g[i].clone(),
                None => vec![0.0; d],
            };
            for (k, g) in texts.units.iter().enumerate() {
                let s = dl_dlogits[i][k] / tau;
                if s == 0.0 {
                    continue;
                }
                for j in 0..d {
                    dl_df[j] += s * g[j];
                    dl_dtexts[k][j] += s * f[j];
                }
            }
            for (acc, v) in grad_v1
                .iter_mut()
                .zip(unit_backward(f, self.norms[i], &dl_df))
            {
                *acc += v;
            }
        }
    }
}

fn label_slots(batch: &SampleSet, texts: &TextTable) -> Result<Vec<usize>> {
    batch
        .samples()
        .iter()
        .map(|s| {
            texts
                .slot_of(s.class_id)
                .ok_or(Error::LabelOutsideClassSet(s.class_id))
        })
        .collect()
}

/// Softmax over `class_set` of `sim(image_embedding(x), text_embedding(c)) / τ`.
pub fn posterior(
    x: &FeatureVector,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<DiscreteDistribution> {
    params.check()?;
    let texts = TextTable::new(params, bank, class_set)?;
    let fwd = BatchForward::new(&[x.as_slice()], params, &texts, bank.tau)?;
    DiscreteDistribution::new(fwd.probs.into_iter().next().expect("one sample"))
}

/// Highest-similarity class (first in `class_set` order on ties). Does not
/// depend on the temperature.
pub fn predict(
    x: &FeatureVector,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<usize> {
    let texts = TextTable::new(params, bank, class_set)?;
    let f = image_embedding(x, params)?;
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, g) in texts.units.iter().enumerate() {
        let s = dot(f.as_slice(), g);
        if s > best_sim {
            best_sim = s;
            best = k;
        }
    }
    Ok(class_set[best])
}

/// Mean negative log posterior of the true labels.
pub fn ce_loss(
    batch: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<f64> {
    Ok(ce_forward(batch, params, bank, class_set)?.0)
}

pub(crate) fn ce_forward(
    batch: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<(f64, TextTable, BatchForward, Vec<usize>)> {
    params.check()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let texts = TextTable::new(params, bank, class_set)?;
    let labels = label_slots(batch, &texts)?;
    let fwd = BatchForward::new(&batch.features(), params, &texts, bank.tau)?;
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| fwd.log_probs[i][y])
        .sum::<f64>()
        / batch.len() as f64;
    Ok((loss, texts, fwd, labels))
}

/// `dL_CE/dlogits = (p − onehot(y)) / B`.
pub(crate) fn ce_logit_grads(fwd: &BatchForward, labels: &[usize]) -> Vec<Vec<f64>> {
    let b = labels.len() as f64;
    fwd.probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.iter()
                .enumerate()
                .map(|(k, &pk)| (pk - if k == y { 1.0 } else { 0.0 }) / b)
                .collect()
        })
        .collect()
}

/// Analytic gradient of [`ce_loss`] with respect to `v1` and `v2`.
pub fn grad_ce(
    batch: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<PromptGrad> {
    Ok(ce_with_grad(batch, params, bank, class_set)?.1)
}

/// Loss, gradient and the forward state they were computed from. Every
/// training path goes through here so CE updates are bit-identical.
pub(crate) fn ce_with_grad(
    batch: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<(f64, PromptGrad, TextTable, BatchForward)> {
    let (loss, texts, fwd, labels) = ce_forward(batch, params, bank, class_set)?;
    let d = params.dim();
    let mut grad = PromptGrad::zeros(d);
    let mut dl_dtexts = vec![vec![0.0; d]; texts.len()];
    fwd.backward(
        &texts,
        bank.tau,
        &ce_logit_grads(&fwd, &labels),
        None,
        &mut grad.v1,
        &mut dl_dtexts,
    );
    texts.backward(&dl_dtexts, &mut grad.v2);
    Ok((loss, grad, texts, fwd))
}

/// `params − lr · grad`.
pub fn sgd_step(params: &PromptParams, grad: &PromptGrad, lr: f64) -> Result<PromptParams> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidLearningRate(lr));
    }
    let d = params.dim();
    if grad.v1.len() != d || grad.v2.len() != d {
        return Err(Error::DimensionMismatch(
            d,
            grad.v1.len().min(grad.v2.len()),
        ));
    }
    let step = |v: &FeatureVector, g: &[f64]| {
        FeatureVector::new(
            v.as_slice()
                .iter()
                .zip(g)
                .map(|(a, b)| a - lr * b)
                .collect(),
        )
    };
    Ok(PromptParams {
        v1: step(&params.v1, &grad.v1)?,
        v2: step(&params.v2, &grad.v2)?,
    })
}
