//! Exact verification layer.
//!
//! On tiny populations every staggered rollout can be enumerated together
//! with its probability, which gives exact expectations and variances of the
//! estimators. Alongside sit the closed-form linear-model variance bounds, the
//! constrained minimum-variance weight solve and the two numeric lemmas on
//! bracket ratios and inverse binomial moments.

mod suite;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::design::{falling_ratio, DesignKind, TARGET_GAP_TOLERANCE};
use crate::error::{Error, Result};
use crate::estimators::lagrange_weights;
use crate::graph::{generate_configuration_model, Graph};
use crate::outcomes::{CoefficientModel, OutcomeModel, Subset};
use crate::seed::rng_from_seed;

pub use suite::{run_verification_suite, Check};

pub const MAX_BRD_ENUMERATION_N: usize = 8;
pub const MAX_BRD_ENUMERATION_T: usize = 3;
pub const MAX_CRD_ENUMERATION_N: usize = 7;
pub const MAX_CRD_ENUMERATION_SIZE: u64 = 1_000_000;
pub const MAX_INVERSE_BINOMIAL_N: usize = 10_000;

/// One equally-structured outcome of a rollout: `first_stage[i]` is the stage
/// at which `i` becomes treated (`T + 1` for never).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub probability: f64,
    pub first_stage: Vec<usize>,
}

impl RolloutOutcome {
    pub fn stage(&self, t: usize) -> Vec<bool> {
        self.first_stage.iter().map(|&f| f <= t).collect()
    }

    /// Whether every member of `subset` is treated at stage `t`.
    pub fn all_treated(&self, subset: &[usize], t: usize) -> bool {
        subset.iter().all(|&j| self.first_stage[j] <= t)
    }
}

/// Every bucket pattern of a Bernoulli rollout with targets `p`: individual
/// `i` lands in bucket `b` (first treated at stage `b`) with probability
/// `p_b - p_{b-1}`, or is never treated with probability `1 - p_T`.
/// Zero-probability buckets are skipped.
pub fn enumerate_brd(p: &[f64], n: usize) -> Result<Vec<RolloutOutcome>> {
    if p.is_empty()
        || p.iter().any(|v| !(0.0..=1.0).contains(v))
        || p.windows(2).any(|w| w[1] < w[0])
    {
        return Err(Error::invalid(format!("invalid BRD targets {p:?}")));
    }
    let horizon = p.len() - 1;
    if n == 0 || n > MAX_BRD_ENUMERATION_N || horizon > MAX_BRD_ENUMERATION_T {
        return Err(Error::Capacity(format!(
            "BRD enumeration supports 1 <= n <= {MAX_BRD_ENUMERATION_N} and T <= {MAX_BRD_ENUMERATION_T}, got n = {n}, T = {horizon}"
        )));
    }
    let mut buckets: Vec<(usize, f64)> = Vec::with_capacity(horizon + 2);
    for b in 0..=horizon + 1 {
        let lo = if b == 0 { 0.0 } else { p[b - 1] };
        let hi = if b <= horizon { p[b] } else { 1.0 };
        if hi - lo > 0.0 {
            buckets.push((b, hi - lo));
        }
    }
    let m = buckets.len();
    let total = m.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    let mut digits = vec![0usize; n];
    for _ in 0..total {
        let probability = digits.iter().map(|&d| buckets[d].1).product();
        let first_stage = digits.iter().map(|&d| buckets[d].0).collect();
        out.push(RolloutOutcome {
            probability,
            first_stage,
        });
        for d in digits.iter_mut() {
            *d += 1;
            if *d < m {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// Every nested subset sequence of a completely randomized rollout with
/// counts `k`, each with probability `1 / Π_t C(n - k_{t-1}, k_t - k_{t-1})`.
pub fn enumerate_crd(k: &[usize], n: usize) -> Result<Vec<RolloutOutcome>> {
    if k.is_empty() || k.windows(2).any(|w| w[1] < w[0]) || k[k.len() - 1] > n {
        return Err(Error::invalid(format!(
            "invalid CRD targets {k:?} for n = {n}"
        )));
    }
    if n == 0 || n > MAX_CRD_ENUMERATION_N {
        return Err(Error::Capacity(format!(
            "CRD enumeration supports 1 <= n <= {MAX_CRD_ENUMERATION_N}, got {n}"
        )));
    }
    let mut size = 1u64;
    let mut prev = 0;
    for &kt in k {
        size = size.saturating_mul(binomial(n - prev, kt - prev));
        prev = kt;
    }
    if size > MAX_CRD_ENUMERATION_SIZE {
        return Err(Error::Capacity(format!(
            "CRD enumeration of {size} sequences exceeds {MAX_CRD_ENUMERATION_SIZE}"
        )));
    }
    let probability = 1.0 / size as f64;
    let never = k.len();
    let mut out = Vec::with_capacity(size as usize);
    let mut first = vec![never; n];
    crd_recurse(k, 0, 0, &mut first, probability, &mut out);
    Ok(out)
}

fn crd_recurse(
    k: &[usize],
    t: usize,
    treated: usize,
    first: &mut Vec<usize>,
    probability: f64,
    out: &mut Vec<RolloutOutcome>,
) {
    if t == k.len() {
        out.push(RolloutOutcome {
            probability,
            first_stage: first.clone(),
        });
        return;
    }
    let n = first.len();
    let never = k.len();
    let add = k[t] - treated;
    let free: Vec<usize> = (0..n).filter(|&i| first[i] == never).collect();
    for mask in 0u32..(1u32 << free.len()) {
        if mask.count_ones() as usize != add {
            continue;
        }
        for (b, &i) in free.iter().enumerate() {
            if mask >> b & 1 == 1 {
                first[i] = t;
            }
        }
        crd_recurse(k, t + 1, k[t], first, probability, out);
        for (b, &i) in free.iter().enumerate() {
            if mask >> b & 1 == 1 {
                first[i] = never;
            }
        }
    }
}

/// Which interpolation nodes the Bernoulli PI estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsMode {
    /// The design probabilities `p`.
    Targets,
    /// Realized treated fractions `k̂ / n`.
    Realized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDescriptor {
    pub n: usize,
    pub horizon: usize,
    pub design: DesignKind,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationReport {
    pub expectation: f64,
    /// Variance of the noiseless estimator.
    pub variance: f64,
    /// `E[Σ_t γ_t²]`, the factor multiplying `σ² / n` in the noise variance.
    pub mean_weight_square: f64,
    pub instance: InstanceDescriptor,
    pub enumeration_size: usize,
}

impl EnumerationReport {
    /// Variance including iid `N(0, σ²)` observation noise.
    pub fn variance_with_noise(&self, sigma: f64) -> f64 {
        self.variance + sigma * sigma * self.mean_weight_square / self.instance.n as f64
    }
}

fn moments(
    model: &(impl OutcomeModel + ?Sized),
    outcomes: &[RolloutOutcome],
    horizon: usize,
    weights_for: impl Fn(&RolloutOutcome) -> Result<Vec<f64>>,
    instance: InstanceDescriptor,
) -> Result<EnumerationReport> {
    let mut values = Vec::with_capacity(outcomes.len());
    let mut mean_weight_square = 0.0;
    for o in outcomes {
        let gamma = weights_for(o)?;
        let mut value = 0.0;
        for (t, g) in gamma.iter().enumerate().take(horizon + 1) {
            if *g != 0.0 {
                value += g * model.mean_outcome(&o.stage(t))?;
            }
        }
        mean_weight_square += o.probability * gamma.iter().map(|g| g * g).sum::<f64>();
        values.push(value);
    }
    let expectation: f64 = outcomes
        .iter()
        .zip(&values)
        .map(|(o, v)| o.probability * v)
        .sum();
    let variance: f64 = outcomes
        .iter()
        .zip(&values)
        .map(|(o, v)| o.probability * (v - expectation).powi(2))
        .sum();
    Ok(EnumerationReport {
        expectation,
        variance,
        mean_weight_square,
        instance,
        enumeration_size: outcomes.len(),
    })
}

/// Exact mean and variance of the Bernoulli PI estimator (noiseless) by
/// enumerating every bucket pattern.
pub fn exact_moments_brd<M: OutcomeModel + ?Sized>(
    model: &M,
    p: &[f64],
    mode: WeightsMode,
) -> Result<EnumerationReport> {
    let n = model.n();
    let outcomes = enumerate_brd(p, n)?;
    let horizon = p.len() - 1;
    let fixed = lagrange_weights(p)?.weights;
    let instance = InstanceDescriptor {
        n,
        horizon,
        design: DesignKind::Bernoulli,
        targets: p.to_vec(),
    };
    moments(
        model,
        &outcomes,
        horizon,
        |o| match mode {
            WeightsMode::Targets => Ok(fixed.clone()),
            WeightsMode::Realized => {
                let x: Vec<f64> = (0..=horizon)
                    .map(|t| o.first_stage.iter().filter(|&&f| f <= t).count() as f64 / n as f64)
                    .collect();
                Ok(lagrange_weights(&x)?.weights)
            }
        },
        instance,
    )
}

/// Exact mean and variance of the CRD PI estimator at targets `k / n`.
pub fn exact_moments_crd<M: OutcomeModel + ?Sized>(
    model: &M,
    k: &[usize],
) -> Result<EnumerationReport> {
    let n = model.n();
    let outcomes = enumerate_crd(k, n)?;
    let horizon = k.len() - 1;
    let x: Vec<f64> = k.iter().map(|&kt| kt as f64 / n as f64).collect();
    let fixed = lagrange_weights(&x)?.weights;
    let instance = InstanceDescriptor {
        n,
        horizon,
        design: DesignKind::Complete,
        targets: x,
    };
    moments(model, &outcomes, horizon, |_| Ok(fixed.clone()), instance)
}

/// Two-stage design starting from nobody treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearDesign {
    /// BRD(0, p)
    Bernoulli { p: f64 },
    /// CRD(0, k)
    Complete { k: usize },
}

/// Closed-form variance bound for the PI estimator on a linear model:
/// `(1-p)/(np) L_max² + 2σ²/(np²)` under BRD(0, p) and
/// `(n-k)/((n-1)k) L_max² + 2σ²n/k²` under CRD(0, k).
pub fn linear_variance_bound(
    model: &CoefficientModel,
    design: LinearDesign,
    sigma: f64,
) -> Result<f64> {
    if model.beta() != 1 {
        return Err(Error::invalid(format!(
            "variance bound needs a linear model, got beta = {}",
            model.beta()
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let n = model.n() as f64;
    let l2 = model.l_max().powi(2);
    match design {
        LinearDesign::Bernoulli { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("p = {p} outside (0, 1]")));
            }
            Ok((1.0 - p) / (n * p) * l2 + 2.0 * sigma * sigma / (n * p * p))
        }
        LinearDesign::Complete { k } => {
            if k == 0 || k > model.n() {
                return Err(Error::invalid(format!("k = {k} outside [1, n]")));
            }
            let kf = k as f64;
            let network = if k == model.n() {
                0.0
            } else {
                (n - kf) / ((n - 1.0) * kf) * l2
            };
            Ok(network + 2.0 * sigma * sigma * n / (kf * kf))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub alphas: Vec<f64>,
    /// Multiplier of `Σ α_t = 0`.
    pub lambda: f64,
    /// Multiplier of `Σ α_t p_t = 1`.
    pub mu: f64,
    pub objective: f64,
}

/// `Σ_{t,t'} α_t α_t' (p_{min(t,t')} - p_t p_t')`, the design-dependent factor
/// of the linear-model variance under a Bernoulli rollout.
pub fn variance_factor(alphas: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for t in 0..p.len() {
        for s in 0..p.len() {
            total += alphas[t] * alphas[s] * (p[t.min(s)] - p[t] * p[s]);
        }
    }
    total
}

/// Minimum-variance unbiased stage weights for a linear model under a
/// Bernoulli rollout with strictly increasing `p`: minimises
/// `network_factor · variance_factor(α, p)` subject to `Σ α_t = 0` and
/// `Σ α_t p_t = 1` by solving the KKT system directly.
pub fn optimal_weights(p: &[f64], network_factor: f64) -> Result<WeightSolution> {
    if p.len() < 2 {
        return Err(Error::invalid("optimal weights need at least two stages"));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!(
            "probabilities {p:?} outside [0, 1]"
        )));
    }
    if p.windows(2).any(|w| w[1] - w[0] < TARGET_GAP_TOLERANCE) {
        return Err(Error::invalid(format!(
            "KKT system is singular: probabilities {p:?} are not strictly increasing"
        )));
    }
    if !(network_factor > 0.0) || !network_factor.is_finite() {
        return Err(Error::invalid(format!(
            "network factor must be positive, got {network_factor}"
        )));
    }
    let m = p.len();
    let dim = m + 2;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    for t in 0..m {
        for s in 0..m {
            kkt[(t, s)] = 2.0 * network_factor * (p[t.min(s)] - p[t] * p[s]);
        }
        kkt[(t, m)] = 1.0;
        kkt[(t, m + 1)] = -p[t];
        kkt[(m, t)] = 1.0;
        kkt[(m + 1, t)] = p[t];
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs[m + 1] = 1.0;
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::invalid("KKT system is singular"))?;
    let alphas: Vec<f64> = sol.iter().take(m).copied().collect();
    let objective = network_factor * variance_factor(&alphas, p);
    Ok(WeightSolution {
        lambda: sol[m],
        mu: sol[m + 1],
        alphas,
        objective,
    })
}

/// `|[(pn-a)/(n-a)]^b / [pn/n]^b - 1|`.
pub fn bracket_ratio_check(n: usize, p: f64, a: usize, b: usize) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("p = {p} outside (0, 1]")));
    }
    let nf = n as f64;
    let pn = p * nf;
    if !(pn > (a + b) as f64) {
        return Err(Error::invalid(format!(
            "need pn > a + b, got pn = {pn}, a = {a}, b = {b}"
        )));
    }
    let shifted = falling_ratio(pn - a as f64, nf - a as f64, b);
    let base = falling_ratio(pn, nf, b);
    Ok((shifted / base - 1.0).abs())
}

/// `E[1/X^β; X > 0]` for `X ~ Binomial(n, p)` by exact summation of the pmf
/// (computed in log space).
pub fn inverse_binomial_moment(n: usize, p: f64, beta: u32) -> Result<f64> {
    if n > MAX_INVERSE_BINOMIAL_N {
        return Err(Error::Capacity(format!(
            "exact summation supports n <= {MAX_INVERSE_BINOMIAL_N}, got {n}"
        )));
    }
    if beta < 1 {
        return Err(Error::invalid("beta must be at least 1"));
    }
    if !(p > 0.0 && p <= 1.0) || (n as f64) * p < 1.0 {
        return Err(Error::invalid(format!(
            "need p in (0, 1] and np >= 1, got n = {n}, p = {p}"
        )));
    }
    let nf = n as f64;
    if p == 1.0 {
        return Ok(nf.powi(-(beta as i32)));
    }
    let (ln_p, ln_q) = (p.ln(), (1.0 - p).ln());
    let mut ln_choose = 0.0;
    let mut total = 0.0;
    for x in 1..=n {
        let xf = x as f64;
        ln_choose += (nf - xf + 1.0).ln() - xf.ln();
        let ln_pmf = ln_choose + xf * ln_p + (nf - xf) * ln_q;
        total += (ln_pmf - beta as f64 * xf.ln()).exp();
    }
    Ok(total)
}

/// Random coefficient model on a configuration-model graph: every subset of
/// each in-neighbourhood with at most `beta` elements gets a coefficient drawn
/// from `U[-1, 1]` (baseline from `U[0, 1]`).
pub fn random_coefficient_model(n: usize, beta: usize, seed: u64) -> Result<CoefficientModel> {
    let graph = generate_configuration_model(n, 2.5, seed)?;
    random_coefficients_on(graph, beta, seed ^ 0x5eed)
}

pub fn random_coefficients_on(graph: Graph, beta: usize, seed: u64) -> Result<CoefficientModel> {
    let mut rng = rng_from_seed(seed);
    let mut coefficients = Vec::with_capacity(graph.n());
    for i in 0..graph.n() {
        let nbrs = graph.in_neighbors(i);
        let mut map = BTreeMap::new();
        for mask in 0usize..(1 << nbrs.len()) {
            let size = mask.count_ones() as usize;
            if size > beta {
                continue;
            }
            let subset: Subset = (0..nbrs.len())
                .filter(|b| mask >> b & 1 == 1)
                .map(|b| nbrs[b])
                .collect();
            let c = if size == 0 {
                rng.random::<f64>()
            } else {
                rng.random_range(-1.0..1.0)
            };
            map.insert(subset, c);
        }
        coefficients.push(map);
    }
    CoefficientModel::new(graph, beta, coefficients)
}

#[cfg(test)]
mod tests;
