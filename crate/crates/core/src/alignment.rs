//! KL/MMD distribution alignment and the sparse training schedule.
//!
//! Seen mini-batches are trained with cross-entropy every iteration. Their
//! mean posteriors and image embeddings are accumulated, and every `period`
//! iterations the accumulated seen posterior is aligned with the closest
//! generated-unseen batches (KL) while the current seen batch is pulled
//! towards the closest generated-seen batches in embedding space (MMD).
//! Only the current batch and the generated batches carry gradient; earlier
//! accumulator entries are stored values.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    kernel_raw, kl_divergence, kl_divergence_raw, mmd_raw, DiscreteDistribution, FeatureVector,
    SampleSet,
};
use crate::model::{
    ce_with_grad, sgd_step, BatchForward, ClassBank, PromptGrad, PromptParams, TextTable,
    DEFAULT_LR,
};
use crate::rng::stream;

/// Seen-side values stored between alignment steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccumulatorState {
    stored_seen_posteriors: Vec<DiscreteDistribution>,
    stored_seen_embeddings: Vec<Vec<FeatureVector>>,
}

impl AccumulatorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, posterior: DiscreteDistribution, embeddings: Vec<FeatureVector>) {
        self.stored_seen_posteriors.push(posterior);
        self.stored_seen_embeddings.push(embeddings);
    }

    pub fn len(&self) -> usize {
        self.stored_seen_posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored_seen_posteriors.is_empty()
    }

    pub fn posteriors(&self) -> &[DiscreteDistribution] {
        &self.stored_seen_posteriors
    }

    pub fn embeddings(&self) -> &[Vec<FeatureVector>] {
        &self.stored_seen_embeddings
    }

    pub fn clear(&mut self) {
        self.stored_seen_posteriors.clear();
        self.stored_seen_embeddings.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub alpha: f64,
    pub beta: f64,
    pub period: usize,
    pub k3: usize,
    pub mmd_sigma: f64,
    pub lr: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            period: 8,
            k3: 1,
            mmd_sigma: 1.0,
            lr: DEFAULT_LR,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParams(msg.to_string()));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if self.period == 0 || self.k3 == 0 {
            return bad("period and k3 must be at least 1");
        }
        if !(self.mmd_sigma > 0.0) {
            return Err(Error::NonPositiveSigma(self.mmd_sigma));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidLearningRate(self.lr));
        }
        Ok(())
    }
}

/// Mean of the per-sample posteriors of a batch.
pub fn batch_posterior(
    batch: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<DiscreteDistribution> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let texts = TextTable::new(params, bank, class_set)?;
    let fwd = BatchForward::new(&batch.features(), params, &texts, bank.tau())?;
    DiscreteDistribution::new(fwd.mean_probs())
}

/// `KL(p_seen ‖ p_gen)`.
pub fn kl_align_loss(p_seen: &DiscreteDistribution, p_gen: &DiscreteDistribution) -> Result<f64> {
    kl_divergence(p_seen, p_gen)
}

/// `Σ p_s ln p_s − KL(p_s ‖ p_g)`, which equals `Σ p_s ln p_g`.
pub fn elbo_estimate(p_seen: &DiscreteDistribution, p_gen: &DiscreteDistribution) -> Result<f64> {
    let kl = kl_divergence(p_seen, p_gen)?;
    let neg_entropy: f64 = p_seen
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum();
    Ok(neg_entropy - kl)
}

/// Indices of the `min(k3, len)` smallest values, ascending; ties go to the
/// lower index.
pub fn select_topk_smallest(values: &[f64], k3: usize) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    if k3 == 0 {
        return Err(Error::InvalidParams("k3 must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k3);
    Ok(idx)
}

/// One training iteration. `l_kl` and `l_mmd` are null unless alignment fired.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub l_ce: f64,
    pub l_kl: Option<f64>,
    pub l_mmd: Option<f64>,
    pub l_total: f64,
    pub aligned: bool,
    #[serde(skip)]
    pub accumulator_after: usize,
    #[serde(skip)]
    pub params_after: PromptParams,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochMetrics {
    pub iterations: Vec<IterationRecord>,
}

impl EpochMetrics {
    pub fn trigger_iterations(&self) -> Vec<usize> {
        self.iterations
            .iter()
            .filter(|r| r.aligned)
            .map(|r| r.iter)
            .collect()
    }

    /// One JSON object per line, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        self.iterations
            .iter()
            .map(|r| serde_json::to_string(r).expect("finite metrics") + "\n")
            .collect()
    }
}

/// Everything an alignment trigger looks at.
#[derive(Debug, Clone, Copy)]
pub struct TriggerBatches<'a> {
    /// The seen batch of the trigger iteration.
    pub current: &'a SampleSet,
    /// Mean posteriors of the earlier seen batches since the last trigger.
    pub earlier_posteriors: &'a [DiscreteDistribution],
    pub gen_unseen: &'a [SampleSet],
    pub gen_seen: &'a [SampleSet],
}

/// Losses and gradients at a trigger iteration. The total gradient only
/// includes alignment terms whose weight is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerOutcome {
    pub l_ce: f64,
    pub l_kl: f64,
    pub l_mmd: f64,
    pub l_total: f64,
    pub kl_selected: Vec<usize>,
    pub mmd_selected: Vec<usize>,
    pub grad_ce: PromptGrad,
    pub grad_kl: PromptGrad,
    pub grad_mmd: PromptGrad,
    pub grad_total: PromptGrad,
    pub current_posterior: DiscreteDistribution,
}

fn forward_all(
    batches: &[SampleSet],
    params: &PromptParams,
    texts: &TextTable,
    tau: f64,
) -> Result<Vec<BatchForward>> {
    batches
        .par_iter()
        .map(|b| {
            if b.is_empty() {
                return Err(Error::EmptyBatch);
            }
            BatchForward::new(&b.features(), params, texts, tau)
        })
        .collect()
}

/// Gradient of the biased MMD with respect to both batches.
fn mmd_grads(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    sigma: f64,
    weight: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = x.len();
    let d = x[0].len();
    let s2 = sigma * sigma;
    let scale = weight / (n * n) as f64;
    let side = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .map(|ai| {
                let mut g = vec![0.0; d];
                for aj in a {
                    let k = kernel_raw(ai, aj, sigma);
                    for t in 0..d {
                        g[t] -= 2.0 * k * (ai[t] - aj[t]) / s2;
                    }
                }
                for bj in b {
                    let k = kernel_raw(ai, bj, sigma);
                    for t in 0..d {
                        g[t] += 2.0 * k * (ai[t] - bj[t]) / s2;
                    }
                }
                g.iter_mut().for_each(|v| *v *= scale);
                g
            })
            .collect()
    };
    (side(x, y), side(y, x))
}

/// Losses and analytic gradients at an alignment trigger.
pub fn trigger_step(
    batches: TriggerBatches<'_>,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
    cfg: &AlignConfig,
) -> Result<TriggerOutcome> {
    cfg.validate()?;
    if batches.gen_unseen.is_empty() || batches.gen_seen.is_empty() {
        return Err(Error::EmptyGenerated);
    }
    let tau = bank.tau();
    let d = params.dim();
    let k = class_set.len();
    for p in batches.earlier_posteriors {
        if p.len() != k {
            return Err(Error::DimensionMismatch(k, p.len()));
        }
    }
    let (l_ce, grad_ce, texts, cur) = ce_with_grad(batches.current, params, bank, class_set)?;
    let p_cur = cur.mean_probs();

    let n_stored = (batches.earlier_posteriors.len() + 1) as f64;
    let mut p_seen = p_cur.clone();
    for p in batches.earlier_posteriors {
        for (a, v) in p_seen.iter_mut().zip(p.probs()) {
            *a += v;
        }
    }
    p_seen.iter_mut().for_each(|v| *v /= n_stored);

    // KL towards generated-unseen batches.
    let unseen = forward_all(batches.gen_unseen, params, &texts, tau)?;
    let p_gen: Vec<Vec<f64>> = unseen.iter().map(BatchForward::mean_probs).collect();
    let kls = p_gen
        .iter()
        .map(|q| kl_divergence_raw(&p_seen, q))
        .collect::<Result<Vec<_>>>()?;
    let kl_selected = select_topk_smallest(&kls, cfg.k3)?;
    let w = 1.0 / kl_selected.len() as f64;
    let l_kl = kl_selected.iter().map(|&j| kls[j]).sum::<f64>() * w;

    let mut grad_kl = PromptGrad::zeros(d);
    let mut dl_dtexts = vec![vec![0.0; d]; texts.len()];
    let mut dl_dpseen = vec![0.0; k];
    for &j in &kl_selected {
        let q = &p_gen[j];
        for c in 0..k {
            if p_seen[c] > 0.0 {
                dl_dpseen[c] += w * ((p_seen[c] / q[c]).ln() + 1.0);
            }
        }
        let b = unseen[j].len() as f64;
        let dl_dq: Vec<f64> = (0..k).map(|c| -w * p_seen[c] / q[c] / b).collect();
        let per_sample = vec![dl_dq; unseen[j].len()];
        let logits = unseen[j].logits_from_prob_grads(&per_sample);
        unseen[j].backward(&texts, tau, &logits, None, &mut grad_kl.v1, &mut dl_dtexts);
    }
    let b_cur = cur.len() as f64;
    let dl_dpcur: Vec<f64> = dl_dpseen.iter().map(|g| g / (n_stored * b_cur)).collect();
    let logits = cur.logits_from_prob_grads(&vec![dl_dpcur; cur.len()]);
    cur.backward(&texts, tau, &logits, None, &mut grad_kl.v1, &mut dl_dtexts);
    texts.backward(&dl_dtexts, &mut grad_kl.v2);

    // MMD towards generated-seen batches in image-embedding space.
    let seen_side = forward_all(batches.gen_seen, params, &texts, tau)?;
    let mmds = seen_side
        .iter()
        .map(|g| {
            let n = cur.len().min(g.len());
            mmd_raw(&cur.images[..n], &g.images[..n], cfg.mmd_sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let mmd_selected = select_topk_smallest(&mmds, cfg.k3)?;
    let w = 1.0 / mmd_selected.len() as f64;
    let l_mmd = mmd_selected.iter().map(|&j| mmds[j]).sum::<f64>() * w;

    let mut grad_mmd = PromptGrad::zeros(d);
    let mut unused_texts = vec![vec![0.0; d]; texts.len()];
    let mut dl_dcur = vec![vec![0.0; d]; cur.len()];
    for &j in &mmd_selected {
        let g = &seen_side[j];
        let n = cur.len().min(g.len());
        let (gx, gy) = mmd_grads(&cur.images[..n], &g.images[..n], cfg.mmd_sigma, w);
        for (acc, v) in dl_dcur.iter_mut().zip(gx) {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        let mut dl_dgen = gy;
        dl_dgen.resize(g.len(), vec![0.0; d]);
        let zero = vec![vec![0.0; k]; g.len()];
        g.backward(
            &texts,
            tau,
            &zero,
            Some(&dl_dgen),
            &mut grad_mmd.v1,
            &mut unused_texts,
        );
    }
    let zero = vec![vec![0.0; k]; cur.len()];
    cur.backward(
        &texts,
        tau,
        &zero,
        Some(&dl_dcur),
        &mut grad_mmd.v1,
        &mut unused_texts,
    );

    let mut grad_total = grad_ce.clone();
    if cfg.alpha != 0.0 {
        grad_total.add_scaled(&grad_kl, cfg.alpha);
    }
    if cfg.beta != 0.0 {
        grad_total.add_scaled(&grad_mmd, cfg.beta);
    }
    Ok(TriggerOutcome {
        l_ce,
        l_kl,
        l_mmd,
        l_total: l_ce + cfg.alpha * l_kl + cfg.beta * l_mmd,
        kl_selected,
        mmd_selected,
        grad_ce,
        grad_kl,
        grad_mmd,
        grad_total,
        current_posterior: DiscreteDistribution::new(p_cur)?,
    })
}

/// Shuffles `set` with a named stream and cuts it into batches.
pub fn shuffled_batches(
    set: &SampleSet,
    batch_size: usize,
    seed: u64,
    name: &str,
) -> Result<Vec<SampleSet>> {
    if batch_size == 0 {
        return Err(Error::InvalidParams("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut stream(seed, name, 0));
    Ok(order.chunks(batch_size).map(|c| set.select(c)).collect())
}

fn check_disjoint(seen: &SampleSet, gen_unseen: &SampleSet) -> Result<()> {
    let seen_ids: BTreeSet<usize> = seen.class_ids().into_iter().collect();
    let overlap: BTreeSet<usize> = gen_unseen
        .class_ids()
        .into_iter()
        .filter(|c| seen_ids.contains(c))
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::DisjointnessViolation(overlap.into_iter().collect()))
    }
}

fn embeddings_of(fwd: &BatchForward) -> Result<Vec<FeatureVector>> {
    fwd.images
        .iter()
        .map(|f| FeatureVector::new(f.clone()))
        .collect()
}

/// One epoch of sparse alignment training.
///
/// Seen batches are visited in an order drawn from `seed`; the generated
/// sets are batched with their own streams so they never shift the seen
/// order. Accumulator entries left over after the last trigger are dropped.
#[allow(clippy::too_many_arguments)]
pub fn sparse_train_epoch(
    seen: &SampleSet,
    gen_unseen: &SampleSet,
    gen_seen: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
    cfg: &AlignConfig,
    batch_size: usize,
    seed: u64,
) -> Result<(PromptParams, EpochMetrics)> {
    cfg.validate()?;
    if seen.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_disjoint(seen, gen_unseen)?;
    let seen_batches = shuffled_batches(seen, batch_size, seed, "train.seen")?;
    let unseen_batches = shuffled_batches(gen_unseen, batch_size, seed, "train.gen_unseen")?;
    let gen_seen_batches = shuffled_batches(gen_seen, batch_size, seed, "train.gen_seen")?;

    let mut params = params.clone();
    let mut acc = AccumulatorState::new();
    let mut metrics = EpochMetrics::default();
    for (i0, batch) in seen_batches.iter().enumerate() {
        let iter = i0 + 1;
        let record = if iter % cfg.period == 0 {
            let out = trigger_step(
                TriggerBatches {
                    current: batch,
                    earlier_posteriors: acc.posteriors(),
                    gen_unseen: &unseen_batches,
                    gen_seen: &gen_seen_batches,
                },
                &params,
                bank,
                class_set,
                cfg,
            )?;
            params = sgd_step(&params, &out.grad_total, cfg.lr)?;
            acc.clear();
            IterationRecord {
                iter,
                l_ce: out.l_ce,
                l_kl: Some(out.l_kl),
                l_mmd: Some(out.l_mmd),
                l_total: out.l_total,
                aligned: true,
                accumulator_after: acc.len(),
                params_after: params.clone(),
            }
        } else {
            let (l_ce, grad, _, fwd) = ce_with_grad(batch, &params, bank, class_set)?;
            acc.push(
                DiscreteDistribution::new(fwd.mean_probs())?,
                embeddings_of(&fwd)?,
            );
            params = sgd_step(&params, &grad, cfg.lr)?;
            IterationRecord {
                iter,
                l_ce,
                l_kl: None,
                l_mmd: None,
                l_total: l_ce,
                aligned: false,
                accumulator_after: acc.len(),
                params_after: params.clone(),
            }
        };
        metrics.iterations.push(record);
    }
    Ok((params, metrics))
}

/// Cross-entropy-only epoch over the same seen batch order as
/// [`sparse_train_epoch`] with the same seed.
pub fn ce_train_epoch(
    seen: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(PromptParams, EpochMetrics)> {
    if seen.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut params = params.clone();
    let mut metrics = EpochMetrics::default();
    for (i0, batch) in shuffled_batches(seen, batch_size, seed, "train.seen")?
        .iter()
        .enumerate()
    {
        let (l_ce, grad, _, _) = ce_with_grad(batch, &params, bank, class_set)?;
        params = sgd_step(&params, &grad, lr)?;
        metrics.iterations.push(IterationRecord {
            iter: i0 + 1,
            l_ce,
            l_kl: None,
            l_mmd: None,
            l_total: l_ce,
            aligned: false,
            accumulator_after: 0,
            params_after: params.clone(),
        });
    }
    Ok((params, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentDiagnostics {
    pub elbo: f64,
    /// Per class: ln of the normalized product posterior minus the ELBO.
    pub log_posterior_product_gap: Vec<f64>,
}

/// ELBO estimate between a seen and a generated batch, and how far each
/// class's log product posterior sits from it. No sign is asserted.
pub fn alignment_diagnostics(
    seen_batch: &SampleSet,
    gen_batch: &SampleSet,
    params: &PromptParams,
    bank: &ClassBank,
    class_set: &[usize],
) -> Result<AlignmentDiagnostics> {
    let p_s = batch_posterior(seen_batch, params, bank, class_set)?;
    let p_u = batch_posterior(gen_batch, params, bank, class_set)?;
    diagnostics_from_posteriors(&p_s, &p_u)
}

pub fn diagnostics_from_posteriors(
    p_s: &DiscreteDistribution,
    p_u: &DiscreteDistribution,
) -> Result<AlignmentDiagnostics> {
    let elbo = elbo_estimate(p_s, p_u)?;
    let prod: Vec<f64> = p_s
        .probs()
        .iter()
        .zip(p_u.probs())
        .map(|(a, b)| a * b)
        .collect();
    let z: f64 = prod.iter().sum();
    if !(z > 0.0) {
        return Err(Error::DegenerateSum);
    }
    let gap = prod.iter().map(|v| (v / z).ln() - elbo).collect();
    Ok(AlignmentDiagnostics {
        elbo,
        log_posterior_product_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Provenance, Sample};
    use crate::model::ce_loss;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn dist(p: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(p.to_vec()).unwrap()
    }

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn elbo_examples() {
        let h = dist(&[0.5, 0.5]);
        assert!((elbo_estimate(&h, &h).unwrap() + std::f64::consts::LN_2).abs() < 1e-5);
        assert!(
            (elbo_estimate(&dist(&[1.0, 0.0]), &h).unwrap() + std::f64::consts::LN_2).abs() < 1e-5
        );
    }

    #[test]
    fn kl_align_examples() {
        let v = kl_align_loss(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        assert!((v - 0.143841).abs() < 1e-6);
        assert_eq!(
            kl_align_loss(&dist(&[0.5, 0.5]), &dist(&[0.5, 0.5])).unwrap(),
            0.0
        );
        assert!(kl_align_loss(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk_smallest(&[3.0, 1.0, 2.0], 1).unwrap(), vec![1]);
        assert_eq!(select_topk_smallest(&[1.0, 1.0], 1).unwrap(), vec![0]);
        assert_eq!(
            select_topk_smallest(&[3.0, 1.0, 2.0], 5).unwrap(),
            vec![1, 2, 0]
        );
        assert_eq!(select_topk_smallest(&[], 1), Err(Error::EmptyList));
    }

    #[test]
    fn diagnostics_examples() {
        let u = dist(&[0.5, 0.5]);
        let d = diagnostics_from_posteriors(&u, &u).unwrap();
        assert!((d.elbo + std::f64::consts::LN_2).abs() < 1e-5);
        // product posterior stays uniform, so each gap is ln 0.5 + ln 2
        for g in &d.log_posterior_product_gap {
            assert!(g.abs() < 1e-12);
        }
        let p = dist(&[0.2, 0.8]);
        let d = diagnostics_from_posteriors(&p, &p).unwrap();
        let elbo = 0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln();
        let z = 0.04 + 0.64;
        assert!((d.log_posterior_product_gap[0] - ((0.04f64 / z).ln() - elbo)).abs() < 1e-12);
        assert_eq!(d, diagnostics_from_posteriors(&p, &p).unwrap());
    }

    fn sample(v: Vec<f64>, c: usize, provenance: Provenance) -> Sample {
        Sample {
            feature: FeatureVector::new(v).unwrap(),
            class_id: c,
            provenance,
        }
    }

    struct Fixture {
        bank: ClassBank,
        class_set: Vec<usize>,
        seen: SampleSet,
        gen_unseen: SampleSet,
        gen_seen: SampleSet,
    }

    /// Classes 0..3 are seen, 3..5 unseen; features are the class direction
    /// plus noise.
    fn fixture(seed: u64, per_class: usize) -> Fixture {
        let mut rng = crate::rng::stream(seed, "test.fixture", 0);
        let d = 6;
        let emb: BTreeMap<usize, FeatureVector> = (0..5)
            .map(|c| {
                (
                    c,
                    fv(&(0..d)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<_>>()),
                )
            })
            .collect();
        let bank = ClassBank::from_raw(emb, 0.2).unwrap();
        let draw =
            |classes: std::ops::Range<usize>, prov: Provenance, rng: &mut crate::rng::StreamRng| {
                let mut out = Vec::new();
                for c in classes {
                    for _ in 0..per_class {
                        let base = bank.get(c).unwrap().as_slice();
                        out.push(sample(
                            base.iter()
                                .map(|b| b + rng.random_range(-0.3..0.3))
                                .collect(),
                            c,
                            prov,
                        ));
                    }
                }
                SampleSet::new(out).unwrap()
            };
        let seen = draw(0..3, Provenance::Seen, &mut rng);
        let gen_unseen = draw(3..5, Provenance::GeneratedUnseen, &mut rng);
        let gen_seen = draw(0..3, Provenance::GeneratedSeen, &mut rng);
        Fixture {
            bank,
            class_set: (0..5).collect(),
            seen,
            gen_unseen,
            gen_seen,
        }
    }

    #[test]
    fn schedule_fires_every_period_and_clears() {
        let f = fixture(1, 16);
        // 48 seen samples, batch 3 -> 16 batches
        let cfg = AlignConfig::default();
        let (_, m) = sparse_train_epoch(
            &f.seen,
            &f.gen_unseen,
            &f.gen_seen,
            &PromptParams::zeros(6),
            &f.bank,
            &f.class_set,
            &cfg,
            3,
            9,
        )
        .unwrap();
        assert_eq!(m.iterations.len(), 16);
        assert_eq!(m.trigger_iterations(), vec![8, 16]);
        for r in &m.iterations {
            if r.aligned {
                assert_eq!(r.accumulator_after, 0);
                assert!(r.l_kl.unwrap() >= 0.0 && r.l_mmd.unwrap() >= -1e-12);
            } else {
                assert_eq!(r.accumulator_after, r.iter % 8);
            }
        }
    }

    #[test]
    fn zero_weights_match_ce_training_bit_for_bit() {
        let f = fixture(2, 16);
        let cfg = AlignConfig {
            alpha: 0.0,
            beta: 0.0,
            ..AlignConfig::default()
        };
        let p0 = PromptParams::zeros(6);
        let (pa, ma) = sparse_train_epoch(
            &f.seen,
            &f.gen_unseen,
            &f.gen_seen,
            &p0,
            &f.bank,
            &f.class_set,
            &cfg,
            3,
            4,
        )
        .unwrap();
        let (pb, mb) = ce_train_epoch(&f.seen, &p0, &f.bank, &f.class_set, cfg.lr, 3, 4).unwrap();
        assert_eq!(pa, pb);
        for (a, b) in ma.iterations.iter().zip(&mb.iterations) {
            assert_eq!(a.params_after, b.params_after);
        }
        assert!(ma.iterations[7].aligned && ma.iterations[7].l_kl.is_some());
    }

    #[test]
    fn disjointness_and_empty_generated() {
        let f = fixture(3, 4);
        let cfg = AlignConfig::default();
        let p0 = PromptParams::zeros(6);
        assert_eq!(
            sparse_train_epoch(
                &f.seen,
                &f.gen_seen,
                &f.gen_seen,
                &p0,
                &f.bank,
                &f.class_set,
                &cfg,
                1,
                0
            )
            .unwrap_err(),
            Error::DisjointnessViolation(vec![0, 1, 2])
        );
        assert_eq!(
            sparse_train_epoch(
                &f.seen,
                &SampleSet::empty(),
                &f.gen_seen,
                &p0,
                &f.bank,
                &f.class_set,
                &cfg,
                1,
                0
            )
            .unwrap_err(),
            Error::EmptyGenerated
        );
    }

    fn perturbed(p: &PromptParams, idx: usize, h: f64) -> PromptParams {
        let d = p.dim();
        let mut v1 = p.v1.as_slice().to_vec();
        let mut v2 = p.v2.as_slice().to_vec();
        if idx < d {
            v1[idx] += h;
        } else {
            v2[idx - d] += h;
        }
        PromptParams {
            v1: fv(&v1),
            v2: fv(&v2),
        }
    }

    #[test]
    fn trigger_gradients_match_central_differences() {
        let f = fixture(4, 6);
        let mut rng = crate::rng::stream(4, "test.points", 0);
        let cfg = AlignConfig {
            k3: 2,
            ..AlignConfig::default()
        };
        let seen = shuffled_batches(&f.seen, 4, 1, "s").unwrap();
        let unseen = shuffled_batches(&f.gen_unseen, 4, 1, "u").unwrap();
        let gen_seen = shuffled_batches(&f.gen_seen, 5, 1, "g").unwrap();
        let p_init = PromptParams::zeros(6);
        let earlier: Vec<_> = seen[1..4]
            .iter()
            .map(|b| batch_posterior(b, &p_init, &f.bank, &f.class_set).unwrap())
            .collect();
        let batches = TriggerBatches {
            current: &seen[0],
            earlier_posteriors: &earlier,
            gen_unseen: &unseen,
            gen_seen: &gen_seen,
        };
        let h = 1e-5;
        for _ in 0..5 {
            let mut r = || {
                fv(&(0..6)
                    .map(|_| rng.random_range(-0.3..0.3))
                    .collect::<Vec<_>>())
            };
            let p = PromptParams { v1: r(), v2: r() };
            let out = trigger_step(batches, &p, &f.bank, &f.class_set, &cfg).unwrap();
            let losses = |q: &PromptParams| {
                let o = trigger_step(batches, q, &f.bank, &f.class_set, &cfg).unwrap();
                [o.l_ce, o.l_kl, o.l_mmd, o.l_total]
            };
            assert!(
                (out.l_ce - ce_loss(&seen[0], &p, &f.bank, &f.class_set).unwrap()).abs() < 1e-12
            );
            let grads = [
                out.grad_ce.flat(),
                out.grad_kl.flat(),
                out.grad_mmd.flat(),
                out.grad_total.flat(),
            ];
            for (idx, _) in grads[0].iter().enumerate().take(12) {
                let up = losses(&perturbed(&p, idx, h));
                let down = losses(&perturbed(&p, idx, -h));
                for t in 0..4 {
                    let fd = (up[t] - down[t]) / (2.0 * h);
                    let an = grads[t][idx];
                    let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        rel <= 1e-4 || (an - fd).abs() < 1e-9,
                        "term {t} idx {idx}: {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn metrics_json_lines() {
        let f = fixture(5, 8);
        let (_, m) = sparse_train_epoch(
            &f.seen,
            &f.gen_unseen,
            &f.gen_seen,
            &PromptParams::zeros(6),
            &f.bank,
            &f.class_set,
            &AlignConfig::default(),
            3,
            0,
        )
        .unwrap();
        let text = m.to_json_lines();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].contains("\"l_kl\":null") && lines[0].contains("\"aligned\":false"));
        let last: serde_json::Value = serde_json::from_str(lines[7]).unwrap();
        assert_eq!(last["aligned"], true);
        assert_eq!(last.as_object().unwrap().len(), 6);
    }
}
