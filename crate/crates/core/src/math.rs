//! Distribution distances, kernels and the shared value types.
//!
//! Everything here is a pure function over immutable values. The
//! tolerances are fixed library constants:
//!
//! | Constant | Value | Used for |
//! |----------|-------|----------|
//! | [`SUM_TOLERANCE`] | 1e-9 | probability vectors summing to one |
//! | [`IDENTITY_TOLERANCE`] | 1e-12 | identity / rounding checks |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `Σ p_i = 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Rounding slack for identities such as `KL(p, p) = 0`.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

/// Probability vector over the alphabet `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution(
                "empty probability vector".into(),
            ));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("entry {i} = {p}")));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sum = {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights must be nonnegative with positive sum, got sum = {sum}"
            )));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDistribution("empty alphabet".into()));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }
}

impl<'de> Deserialize<'de> for DiscreteDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(d)?;
        Self::new(probs).map_err(serde::de::Error::custom)
    }
}

/// Finite real vector of dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Unit-length copy.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }
}

impl<'de> Deserialize<'de> for FeatureVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Self::new(values).map_err(serde::de::Error::custom)
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seen,
    GeneratedUnseen,
    GeneratedSeen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub feature: FeatureVector,
    pub class_id: usize,
    pub provenance: Provenance,
}

/// Labelled features sharing one dimension.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleSet {
    samples: Vec<Sample>,
}

impl SampleSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let d = first.feature.dim();
            for s in &samples {
                if s.feature.dim() != d {
                    return Err(Error::DimensionMismatch(d, s.feature.dim()));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature dimension, or `None` for an empty set.
    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.feature.dim())
    }

    /// Sorted distinct class ids.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.feature.as_slice()).collect()
    }

    /// Concatenation; fails if dimensions disagree.
    pub fn concat(&self, other: &SampleSet) -> Result<SampleSet> {
        let mut all = self.samples.clone();
        all.extend(other.samples.iter().cloned());
        SampleSet::new(all)
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(a, b));
    }
    Ok(())
}

/// `KL(p‖q) = Σ_{p_i > 0} p_i ln(p_i / q_i)` in nats.
///
/// Zero-mass entries of `p` are skipped rather than evaluated.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    kl_divergence_raw(p.probs(), q.probs())
}

pub(crate) fn kl_divergence_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims(p.len(), q.len())?;
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation {
                index: i,
                p_val: pi,
            });
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc)
}

/// Relative frequencies of the observed indices.
pub fn empirical_distribution(
    samples: &[usize],
    alphabet_size: usize,
) -> Result<DiscreteDistribution> {
    if alphabet_size == 0 {
        return Err(Error::InvalidParams(
            "alphabet_size must be at least 1".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut counts = vec![0usize; alphabet_size];
    for &s in samples {
        if s >= alphabet_size {
            return Err(Error::IndexOutOfRange {
                index: s,
                size: alphabet_size,
            });
        }
        counts[s] += 1;
    }
    let m = samples.len() as f64;
    DiscreteDistribution::new(counts.into_iter().map(|c| c as f64 / m).collect())
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    cosine_raw(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `exp(-‖x - y‖² / (2σ²))`.
pub fn gaussian_kernel(x: &FeatureVector, y: &FeatureVector, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_dims(x.dim(), y.dim())?;
    Ok(kernel_raw(x.as_slice(), y.as_slice(), sigma))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::NonPositiveSigma(sigma));
    }
    Ok(())
}

#[inline]
pub(crate) fn kernel_raw(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp()
}

/// Biased squared MMD between two equally sized batches, diagonal terms
/// included:
///
/// `(1/n²)ΣΣK(x_i,x_j) + (1/n²)ΣΣK(y_i,y_j) − (2/n²)ΣΣK(x_i,y_j)`.
pub fn mmd(x: &[FeatureVector], y: &[FeatureVector], sigma: f64) -> Result<f64> {
    let xs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
    let ys: Vec<&[f64]> = y.iter().map(|v| v.as_slice()).collect();
    mmd_raw(&xs, &ys, sigma)
}

pub(crate) fn mmd_raw<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    x: &[A],
    y: &[B],
    sigma: f64,
) -> Result<f64> {
    check_sigma(sigma)?;
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let d = x[0].as_ref().len();
    for v in x
        .iter()
        .map(AsRef::as_ref)
        .chain(y.iter().map(AsRef::as_ref))
    {
        check_dims(d, v.len())?;
    }
    let n = x.len();
    // Cross-terms are summed once per unordered pair for the within-batch
    // sums; K is symmetric and K(a, a) = 1.
    let within = |s: &[&[f64]]| {
        let mut acc = n as f64;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += 2.0 * kernel_raw(s[i], s[j], sigma);
            }
        }
        acc
    };
    let xs: Vec<&[f64]> = x.iter().map(AsRef::as_ref).collect();
    let ys: Vec<&[f64]> = y.iter().map(AsRef::as_ref).collect();
    let kxx = within(&xs);
    let kyy = within(&ys);
    // Row-major and column-major sums of the cross matrix swap roles when
    // the arguments swap, so their average keeps mmd(x, y) == mmd(y, x)
    // bit for bit.
    let cross: Vec<f64> = xs
        .iter()
        .flat_map(|a| ys.iter().map(|b| kernel_raw(a, b, sigma)))
        .collect();
    let by_rows: f64 = cross.iter().sum();
    let mut by_cols = 0.0;
    for j in 0..n {
        for i in 0..n {
            by_cols += cross[i * n + j];
        }
    }
    let kxy = 0.5 * (by_rows + by_cols);
    let n2 = (n * n) as f64;
    Ok((kxx + kyy - 2.0 * kxy) / n2)
}

/// MMD between the first `min(|x|, |y|)` items of each side.
pub(crate) fn truncated_mmd<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    x: &[A],
    y: &[B],
    sigma: f64,
) -> Result<f64> {
    let n = x.len().min(y.len());
    mmd_raw(&x[..n], &y[..n], sigma)
}
