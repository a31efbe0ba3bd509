//! Feature-space stand-in for the caption → summary → text-to-image chain.
//!
//! A "caption" is the residual between a seen sample and its class
//! embedding. Filtering keeps the `k1` samples most similar to the class
//! embedding; summarization reduces their residuals to `k2` weighted
//! descriptors; "image generation" draws `base + residual + noise`. The
//! mapping is a modelling construction and is only meant to preserve the
//! information flow (class identity plus seen-domain statistics).

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    cosine_raw, sq_dist, FeatureVector, Provenance, Sample, SampleSet, SUM_TOLERANCE,
};
use crate::rng;

/// One summarized domain: a feature-space offset and its share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub residual: FeatureVector,
    pub weight: f64,
}

/// Everything needed to synthesize samples for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub class_name: String,
    pub class_id: usize,
    /// Class embedding mapped into feature space.
    pub base: FeatureVector,
    pub descriptors: Vec<DomainDescriptor>,
    pub noise_sigma: f64,
    /// Seen classes produce `GeneratedSeen`, others `GeneratedUnseen`.
    pub seen_class: bool,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.descriptors.is_empty() {
            return Err(Error::InvalidParams(format!(
                "{}: no descriptors",
                self.class_name
            )));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidParams(format!(
                "{}: noise_sigma must be positive, got {}",
                self.class_name, self.noise_sigma
            )));
        }
        let d = self.base.dim();
        let mut total = 0.0;
        for desc in &self.descriptors {
            if desc.residual.dim() != d {
                return Err(Error::DimensionMismatch(d, desc.residual.dim()));
            }
            if !(desc.weight > 0.0 && desc.weight <= 1.0) {
                return Err(Error::InvalidParams(format!(
                    "descriptor weight {} outside (0, 1]",
                    desc.weight
                )));
            }
            total += desc.weight;
        }
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidParams(format!(
                "descriptor weights sum to {total}"
            )));
        }
        Ok(())
    }

    fn provenance(&self) -> Provenance {
        if self.seen_class {
            Provenance::GeneratedSeen
        } else {
            Provenance::GeneratedUnseen
        }
    }
}

/// Source of synthetic samples. Only [`ResidualGenerator`] ships; a real
/// text-to-image backend would implement the same trait.
pub trait SampleGenerator {
    fn generate(&self, spec: &GeneratorSpec, n: usize, seed: u64) -> Result<SampleSet>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ResidualGenerator;

impl SampleGenerator for ResidualGenerator {
    fn generate(&self, spec: &GeneratorSpec, n: usize, seed: u64) -> Result<SampleSet> {
        synthesize(spec, n, seed)
    }
}

/// Single zero-offset descriptor: generation from the class embedding alone.
pub fn plain_descriptors(d: usize) -> Vec<DomainDescriptor> {
    vec![DomainDescriptor {
        residual: FeatureVector::zeros(d),
        weight: 1.0,
    }]
}

/// Per-class domain descriptors from seen data.
///
/// For each class the samples are ranked by cosine similarity to the class
/// embedding (stable for ties) and the top `k1` kept. Their residuals are
/// reduced to at most `k2` descriptors: greedy farthest-point seeding from
/// the best-ranked residual, one nearest-seed assignment, then cluster means.
/// Weight is the fraction of residuals in the cluster; descriptors are
/// ordered by weight, then seed order. Seeds that end up with no members
/// (duplicate residuals) are dropped.
pub fn extract_domain_info(
    seen_samples: &SampleSet,
    class_embeddings: &BTreeMap<usize, FeatureVector>,
    k1: usize,
    k2: usize,
) -> Result<BTreeMap<usize, Vec<DomainDescriptor>>> {
    if k2 < 1 || k1 < k2 {
        return Err(Error::InvalidParams(format!(
            "need k1 >= k2 >= 1, got k1 = {k1}, k2 = {k2}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for s in seen_samples.samples() {
        by_class
            .entry(s.class_id)
            .or_default()
            .push(s.feature.as_slice());
    }
    let mut out = BTreeMap::new();
    for (class, feats) in by_class {
        let emb = class_embeddings
            .get(&class)
            .ok_or_else(|| Error::MissingEmbedding(class.to_string()))?
            .as_slice();
        if feats.len() < k1 {
            return Err(Error::InsufficientSamples {
                class: class.to_string(),
                have: feats.len(),
                need: k1,
            });
        }
        let mut scored: Vec<(usize, f64)> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| cosine_raw(f, emb).map(|c| (i, c)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let residuals: Vec<Vec<f64>> = scored[..k1]
            .iter()
            .map(|&(i, _)| feats[i].iter().zip(emb).map(|(f, e)| f - e).collect())
            .collect();
        out.insert(class, summarize_residuals(&residuals, k2)?);
    }
    Ok(out)
}

fn summarize_residuals(residuals: &[Vec<f64>], k2: usize) -> Result<Vec<DomainDescriptor>> {
    let n = residuals.len();
    let mut seeds = vec![0usize];
    let mut nearest: Vec<f64> = residuals
        .iter()
        .map(|r| sq_dist(r, &residuals[0]))
        .collect();
    while seeds.len() < k2.min(n) {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        seeds.push(best);
        for (i, r) in residuals.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, &residuals[best]));
        }
    }

    let d = residuals[0].len();
    let mut sums = vec![vec![0.0; d]; seeds.len()];
    let mut counts = vec![0usize; seeds.len()];
    for r in residuals {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, &s) in seeds.iter().enumerate() {
            let dist = sq_dist(r, &residuals[s]);
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        counts[best] += 1;
        for (acc, v) in sums[best].iter_mut().zip(r) {
            *acc += v;
        }
    }

    let mut clusters: Vec<(usize, usize, Vec<f64>)> = sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (_, c))| *c > 0)
        .map(|(k, (s, c))| (k, c, s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    clusters.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    clusters
        .into_iter()
        .map(|(_, c, mean)| {
            Ok(DomainDescriptor {
                residual: FeatureVector::new(mean)?,
                weight: c as f64 / n as f64,
            })
        })
        .collect()
}

/// Descriptors of the seen class whose embedding is most cosine-similar to
/// `target` (ties to the lower class id).
pub fn inherit_descriptors(
    target: &FeatureVector,
    seen_embeddings: &BTreeMap<usize, FeatureVector>,
    descriptors: &BTreeMap<usize, Vec<DomainDescriptor>>,
) -> Result<(usize, Vec<DomainDescriptor>)> {
    let mut best: Option<(usize, f64)> = None;
    for (&id, emb) in seen_embeddings {
        if !descriptors.contains_key(&id) {
            continue;
        }
        let c = cosine_raw(target.as_slice(), emb.as_slice())?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((id, c));
        }
    }
    let (id, _) = best.ok_or(Error::EmptyList)?;
    Ok((id, descriptors[&id].clone()))
}

/// A class as seen by the generator: id, name and unit embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedClass {
    pub id: usize,
    pub name: String,
    pub embedding: FeatureVector,
}

/// Generator specs for predicted unseen classes and for the seen classes.
///
/// With `use_domain` the seen classes get descriptors extracted from
/// `train` and each unseen class inherits those of its nearest seen class;
/// otherwise every class gets [`plain_descriptors`].
#[allow(clippy::too_many_arguments)]
pub fn class_specs(
    seen: &[NamedClass],
    unseen: &[NamedClass],
    train: &SampleSet,
    use_domain: bool,
    k1: usize,
    k2: usize,
    noise_sigma: f64,
) -> Result<(Vec<GeneratorSpec>, Vec<GeneratorSpec>)> {
    let d = seen.first().ok_or(Error::EmptyList)?.embedding.dim();
    let seen_emb: BTreeMap<usize, FeatureVector> =
        seen.iter().map(|c| (c.id, c.embedding.clone())).collect();
    let descriptors = if use_domain {
        extract_domain_info(train, &seen_emb, k1, k2)?
    } else {
        seen.iter().map(|c| (c.id, plain_descriptors(d))).collect()
    };
    let spec =
        |c: &NamedClass, descriptors: Vec<DomainDescriptor>, seen_class: bool| GeneratorSpec {
            class_name: c.name.clone(),
            class_id: c.id,
            base: c.embedding.clone(),
            descriptors,
            noise_sigma,
            seen_class,
        };
    let unseen_specs = unseen
        .iter()
        .map(|c| {
            inherit_descriptors(&c.embedding, &seen_emb, &descriptors)
                .map(|(_, d)| spec(c, d, false))
        })
        .collect::<Result<Vec<_>>>()?;
    let seen_specs = seen
        .iter()
        .map(|c| {
            descriptors
                .get(&c.id)
                .cloned()
                .ok_or_else(|| Error::InsufficientSamples {
                    class: c.name.clone(),
                    have: 0,
                    need: k1,
                })
                .map(|d| spec(c, d, true))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((unseen_specs, seen_specs))
}

/// `n` samples of `base + residual + N(0, σ²I)`, the descriptor for each
/// sample drawn in proportion to its weight from a stream seeded by `seed`.
pub fn synthesize(spec: &GeneratorSpec, n: usize, seed: u64) -> Result<SampleSet> {
    if n < 1 {
        return Err(Error::InvalidParams("n must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = rng::stream(seed, "synthesize", 0);
    let picker = WeightedIndex::new(spec.descriptors.iter().map(|d| d.weight))
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    let provenance = spec.provenance();
    let base = spec.base.as_slice();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let desc = &spec.descriptors[picker.sample(&mut rng)];
        let feature: Vec<f64> = base
            .iter()
            .zip(desc.residual.as_slice())
            .map(|(b, r)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                b + r + spec.noise_sigma * z
            })
            .collect();
        samples.push(Sample {
            feature: FeatureVector::new(feature)?,
            class_id: spec.class_id,
            provenance,
        });
    }
    SampleSet::new(samples)
}

/// Extra seen-class data: `n_per_class` samples for each spec, each class on
/// its own derived stream, provenance `GeneratedSeen`.
pub fn synthesize_seen_extra(
    seen_classes: &[GeneratorSpec],
    n_per_class: usize,
    seed: u64,
) -> Result<SampleSet> {
    synthesize_many(seen_classes, n_per_class, seed, true, "synthesize.seen")
}

/// Generated unseen-class data, one derived stream per spec.
pub fn synthesize_unseen(
    specs: &[GeneratorSpec],
    n_per_class: usize,
    seed: u64,
) -> Result<SampleSet> {
    synthesize_many(specs, n_per_class, seed, false, "synthesize.unseen")
}

fn synthesize_many(
    specs: &[GeneratorSpec],
    n: usize,
    seed: u64,
    seen: bool,
    stream: &str,
) -> Result<SampleSet> {
    let mut all = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let spec = GeneratorSpec {
            seen_class: seen,
            ..spec.clone()
        };
        let set = synthesize(&spec, n, rng::derive_seed(seed, stream, i as u64))?;
        all.extend(set.samples().iter().cloned());
    }
    SampleSet::new(all)
}
