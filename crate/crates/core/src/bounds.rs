//! Closed-form distribution-estimation bounds and Monte Carlo harnesses
//! that count how often they are violated.
//!
//! Two statements are checked:
//!
//! * the joint bound: with probability `1 - δ` over `m` samples drawn from
//!   `O`, for every `E`,
//!   `d(E, O) − d(E, S) ≤ √(d(E,S)/(2m−1)) + √((ln(1/δ) + 2.5 ln m + 8)/(2m−1))`,
//!   where `S` is the empirical distribution and `d` is KL;
//! * the posterior bound on the restricted KL between the empirical label
//!   distribution over a predicted class subset `Y_e` and the true label
//!   distribution: `√((ln(1/p(Y_e)) + ln(1/δ))/(2m)) − ln(|Y_e|/|Y_u|)`.
//!
//! The posterior statement is written with the KL arguments in the
//! (empirical ‖ true) order. Its headline form swaps the arguments; the
//! harness follows the construction whose derivation is spelled out, and the
//! restricted sum is evaluated as-is (it may be negative when `p(Y_e) < 1`).

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::kl_divergence_raw;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointBoundParams {
    /// KL distance between the generated and the seen joint distribution.
    pub d_es: f64,
    /// Seen-sample count.
    pub m: u64,
    pub delta: f64,
}

impl JointBoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_es >= 0.0) || !self.d_es.is_finite() {
            return Err(Error::InvalidParams(format!(
                "d_es must be finite and >= 0, got {}",
                self.d_es
            )));
        }
        if self.m < 1 {
            return Err(Error::InvalidParams("m must be at least 1".into()));
        }
        check_delta(self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorBoundParams {
    /// Probability mass of the predicted class set.
    pub p_ye: f64,
    pub m: u64,
    pub delta: f64,
    /// `|Y_e|`
    pub n_ye: u64,
    /// `|Y_u|`
    pub n_yu: u64,
}

impl PosteriorBoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_ye > 0.0 && self.p_ye <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "p_ye must lie in (0, 1], got {}",
                self.p_ye
            )));
        }
        if self.m < 1 {
            return Err(Error::InvalidParams("m must be at least 1".into()));
        }
        if self.n_ye < 1 || self.n_ye > self.n_yu {
            return Err(Error::InvalidParams(format!(
                "need 1 <= n_ye <= n_yu, got n_ye = {}, n_yu = {}",
                self.n_ye, self.n_yu
            )));
        }
        check_delta(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParams(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

/// Outcome of a Monte Carlo bound check. Serializes to exactly the seven
/// public report fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub trials: u64,
    pub violations: u64,
    pub violation_rate: f64,
    pub delta: f64,
    pub mean_lhs: f64,
    pub mean_bound: f64,
    pub seed: u64,
    /// Joint harness only: rate at which `d(E, O)` itself exceeds the
    /// right-hand side (the form without the additive `d(E, S)` term).
    /// Diagnostic, never a gate.
    #[serde(skip)]
    pub unshifted_violation_rate: Option<f64>,
}

impl BoundCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn passes(&self) -> bool {
        self.violation_rate <= self.delta
    }
}

fn confidence_term(m: f64, delta: f64) -> f64 {
    ((1.0 / delta).ln() + 2.5 * m.ln() + 8.0) / (2.0 * m - 1.0)
}

fn joint_rhs(d_es: f64, m: f64, delta: f64) -> f64 {
    (d_es / (2.0 * m - 1.0)).sqrt() + confidence_term(m, delta).sqrt()
}

/// `√(d_es/(2m−1)) + √((ln(1/δ) + (5/2) ln m + 8)/(2m−1))`: bound on the
/// distance between the generated and the unseen joint distribution.
pub fn joint_bound(params: &JointBoundParams) -> Result<f64> {
    params.validate()?;
    Ok(joint_rhs(params.d_es, params.m as f64, params.delta))
}

/// `d_es + joint_bound(params)`: bound on the distance between the generated
/// and the open-environment joint distribution. Requires `d_es ≤ 2m`.
pub fn open_joint_bound(params: &JointBoundParams) -> Result<f64> {
    params.validate()?;
    if params.d_es > 2.0 * params.m as f64 {
        return Err(Error::ConstraintViolated(format!(
            "d_es = {} exceeds 2m = {}",
            params.d_es,
            2 * params.m
        )));
    }
    Ok(params.d_es + joint_rhs(params.d_es, params.m as f64, params.delta))
}

/// `√((ln(1/p_ye) + ln(1/δ))/(2m)) − ln(n_ye/n_yu)`.
pub fn posterior_bound(params: &PosteriorBoundParams) -> Result<f64> {
    params.validate()?;
    let m = params.m as f64;
    let head = (((1.0 / params.p_ye).ln() + (1.0 / params.delta).ln()) / (2.0 * m)).sqrt();
    Ok(head - (params.n_ye as f64 / params.n_yu as f64).ln())
}

/// Symmetric Dirichlet(1) draw.
fn dirichlet_uniform<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Inverse-CDF categorical draw; the last index absorbs rounding.
fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, Copy)]
struct TrialOutcome {
    lhs: f64,
    bound: f64,
    violated: bool,
    unshifted_violated: bool,
}

fn aggregate(
    outcomes: &[TrialOutcome],
    delta: f64,
    seed: u64,
    with_unshifted: bool,
) -> BoundCheckReport {
    let trials = outcomes.len() as u64;
    let n = outcomes.len() as f64;
    // Sequential fold in trial-index order keeps the sums bit-reproducible.
    let (mut lhs, mut bound, mut viol, mut unshifted) = (0.0, 0.0, 0u64, 0u64);
    for o in outcomes {
        lhs += o.lhs;
        bound += o.bound;
        viol += u64::from(o.violated);
        unshifted += u64::from(o.unshifted_violated);
    }
    BoundCheckReport {
        trials,
        violations: viol,
        violation_rate: viol as f64 / n,
        delta,
        mean_lhs: lhs / n,
        mean_bound: bound / n,
        seed,
        unshifted_violation_rate: with_unshifted.then(|| unshifted as f64 / n),
    }
}

/// Monte Carlo check of the joint bound in its additive form.
///
/// Per trial: `O ~ Dirichlet(1)`; `m` iid draws from `O` give the empirical
/// `S`; `S̃` is its add-one smoothing; `E = (1−ε)S̃ + εD` with a fresh
/// `D ~ Dirichlet(1)`. The left side is `max(0, d(E,O) − d(E,S̃))` and the
/// right side is `joint_bound(d(E,S̃), m, δ)`.
pub fn verify_joint_bound(
    alphabet_size: usize,
    m: u64,
    delta: f64,
    trials: u64,
    epsilon_perturb: f64,
    seed: u64,
) -> Result<BoundCheckReport> {
    if alphabet_size < 1 {
        return Err(Error::InvalidParams(
            "alphabet_size must be at least 1".into(),
        ));
    }
    if trials < 1 {
        return Err(Error::InvalidParams("trials must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&epsilon_perturb) {
        return Err(Error::InvalidParams(format!(
            "epsilon must lie in [0, 1), got {epsilon_perturb}"
        )));
    }
    JointBoundParams {
        d_es: 0.0,
        m,
        delta,
    }
    .validate()?;
    if (1.0 / delta).ln() > 2.0 * m as f64 {
        return Err(Error::InvalidParams("need ln(1/delta) <= 2m".into()));
    }

    let k = alphabet_size;
    let mf = m as f64;
    let run = |t: u64| -> TrialOutcome {
        let mut rng = rng::stream(seed, "bounds.joint", t);
        let truth = dirichlet_uniform(&mut rng, k);
        let mut counts = vec![0u64; k];
        for _ in 0..m {
            counts[categorical(&mut rng, &truth)] += 1;
        }
        let denom = mf + k as f64;
        let smoothed: Vec<f64> = counts.iter().map(|&c| (c as f64 + 1.0) / denom).collect();
        let perturb = dirichlet_uniform(&mut rng, k);
        let generated: Vec<f64> = smoothed
            .iter()
            .zip(&perturb)
            .map(|(s, d)| (1.0 - epsilon_perturb) * s + epsilon_perturb * d)
            .collect();
        // Dirichlet draws are strictly positive and S̃ has full support.
        let d_eo = kl_divergence_raw(&generated, &truth).expect("full support");
        let d_es = kl_divergence_raw(&generated, &smoothed).expect("full support");
        let lhs = (d_eo - d_es).max(0.0);
        let bound = joint_rhs(d_es, mf, delta);
        TrialOutcome {
            lhs,
            bound,
            violated: lhs > bound,
            unshifted_violated: d_eo > bound,
        }
    };
    let outcomes: Vec<TrialOutcome> = (0..trials).into_par_iter().map(run).collect();
    Ok(aggregate(&outcomes, delta, seed, true))
}

/// Monte Carlo check of the posterior bound.
///
/// Per trial: `p* ~ Dirichlet(1)` over `n_yu` classes; `Y_e` is the `n_ye`
/// classes of largest mass (ties to the lower index); `m` labels are drawn
/// from `p*` conditioned on `Y_e`; the left side is
/// `Σ_{y ∈ Y_e} p̂(y) ln(p̂(y)/p*(y))`.
pub fn verify_posterior_bound(
    n_yu: usize,
    n_ye: usize,
    m: u64,
    delta: f64,
    trials: u64,
    seed: u64,
) -> Result<BoundCheckReport> {
    if trials < 1 {
        return Err(Error::InvalidParams("trials must be at least 1".into()));
    }
    PosteriorBoundParams {
        p_ye: 1.0,
        m,
        delta,
        n_ye: n_ye as u64,
        n_yu: n_yu as u64,
    }
    .validate()?;

    let run = |t: u64| -> TrialOutcome {
        let mut rng = rng::stream(seed, "bounds.posterior", t);
        let truth = dirichlet_uniform(&mut rng, n_yu);
        let mut order: Vec<usize> = (0..n_yu).collect();
        order.sort_by(|&a, &b| truth[b].total_cmp(&truth[a]).then(a.cmp(&b)));
        let predicted = &order[..n_ye];
        let p_ye: f64 = predicted.iter().map(|&y| truth[y]).sum();
        let conditional: Vec<f64> = predicted.iter().map(|&y| truth[y] / p_ye).collect();
        let mut counts = vec![0u64; n_ye];
        for _ in 0..m {
            counts[categorical(&mut rng, &conditional)] += 1;
        }
        let mut lhs = 0.0;
        for (slot, &y) in predicted.iter().enumerate() {
            if counts[slot] == 0 {
                continue;
            }
            let p_hat = counts[slot] as f64 / m as f64;
            lhs += p_hat * (p_hat / truth[y]).ln();
        }
        // p_ye can round a hair above 1 when Y_e is everything.
        let bound = posterior_bound(&PosteriorBoundParams {
            p_ye: p_ye.min(1.0),
            m,
            delta,
            n_ye: n_ye as u64,
            n_yu: n_yu as u64,
        })
        .expect("validated above");
        TrialOutcome {
            lhs,
            bound,
            violated: lhs > bound,
            unshifted_violated: false,
        }
    };
    let outcomes: Vec<TrialOutcome> = (0..trials).into_par_iter().map(run).collect();
    Ok(aggregate(&outcomes, delta, seed, false))
}
