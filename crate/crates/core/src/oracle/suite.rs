//! The `verify` report: every exact identity the oracle can check on its own.

use std::fmt;

use rand::Rng;

use super::*;
use crate::design::{bracket, brd_ladder, crd_ladder};
use crate::estimators::lagrange_basis;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    /// Passes when `value <= tolerance`.
    fn at_most(name: &'static str, value: f64, tolerance: f64) -> Self {
        Check {
            name,
            passed: value <= tolerance,
            value,
            tolerance,
        }
    }

    /// Passes when `value >= tolerance`.
    fn at_least(name: &'static str, value: f64, tolerance: f64) -> Self {
        Check {
            name,
            passed: value >= tolerance,
            value,
            tolerance,
        }
    }

    fn failed(name: &'static str, tolerance: f64) -> Self {
        Check {
            name,
            passed: false,
            value: f64::NAN,
            tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {} {:e} {:e}",
            self.name, self.value, self.tolerance
        )
    }
}

fn or_fail(name: &'static str, tolerance: f64, r: Result<Check>) -> Check {
    r.unwrap_or_else(|_| Check::failed(name, tolerance))
}

fn unbiased_brd() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let (n, beta) = (3 + s as usize % 4, 1 + s as usize % 2);
        let model = random_coefficient_model(n, beta, 1000 + s)?;
        let p_final = rng_from_seed(s).random_range(0.2..0.9);
        let report = exact_moments_brd(&model, &brd_ladder(p_final, beta), WeightsMode::Targets)?;
        worst = worst.max((report.expectation - model.true_tte()).abs());
    }
    Ok(worst)
}

fn unbiased_crd() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let (n, beta) = (3 + s as usize % 3, 1 + s as usize % 2);
        let model = random_coefficient_model(n, beta, 2000 + s)?;
        let k = rng_from_seed(s).random_range(beta..=n);
        let report = exact_moments_crd(&model, &crd_ladder(k, beta))?;
        worst = worst.max((report.expectation - model.true_tte()).abs());
    }
    Ok(worst)
}

/// Fraction of (instance, σ) pairs with variance strictly below the bound, or
/// `None` if any pair exceeds it.
fn variance_bound(design: DesignKind) -> Result<Option<f64>> {
    let (mut strict, mut total) = (0usize, 0usize);
    for s in 0..20u64 {
        let n = 3 + s as usize % 4;
        let model = random_coefficient_model(n, 1, 3000 + s)?;
        for sigma in [0.0, 0.5] {
            let (variance, bound) = match design {
                DesignKind::Bernoulli => {
                    let p = rng_from_seed(s).random_range(0.1..0.9);
                    let r = exact_moments_brd(&model, &[0.0, p], WeightsMode::Targets)?;
                    (
                        r.variance_with_noise(sigma),
                        linear_variance_bound(&model, LinearDesign::Bernoulli { p }, sigma)?,
                    )
                }
                DesignKind::Complete => {
                    let k = rng_from_seed(s).random_range(1..n);
                    let r = exact_moments_crd(&model, &[0, k])?;
                    (
                        r.variance_with_noise(sigma),
                        linear_variance_bound(&model, LinearDesign::Complete { k }, sigma)?,
                    )
                }
            };
            if variance > bound * (1.0 + 1e-12) {
                return Ok(None);
            }
            strict += usize::from(variance < bound);
            total += 1;
        }
    }
    Ok(Some(strict as f64 / total as f64))
}

fn realized_bias_identity() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in 3..=8usize {
        for p in [0.3, 0.5] {
            let model = random_coefficient_model(n, 1, 4000 + n as u64)?;
            let report = exact_moments_brd(&model, &[0.0, p], WeightsMode::Realized)?;
            let tte = model.true_tte();
            let bias = report.expectation - tte;
            worst = worst.max((bias + (1.0 - p).powi(n as i32) * tte).abs());
        }
    }
    Ok(worst)
}

/// Random strictly increasing grid of `len` points in [0, 1] with every
/// consecutive gap at least `min_gap`.
pub(crate) fn random_grid(rng: &mut impl Rng, len: usize, min_gap: f64) -> Vec<f64> {
    loop {
        let mut x: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        x.sort_by(f64::total_cmp);
        if x.windows(2).all(|w| w[1] - w[0] >= min_gap) {
            return x;
        }
    }
}

/// Largest deviation of the optimal weights from the two-endpoint solution,
/// including the deviation under rescaling of the network factor.
fn optimal_weight_structure() -> Result<f64> {
    let mut rng = rng_from_seed(5000);
    let mut worst: f64 = 0.0;
    for g in 0..50 {
        let horizon = 1 + g % 6;
        let p = random_grid(&mut rng, horizon + 1, 0.02);
        let factor = rng.random_range(0.1..10.0);
        let sol = optimal_weights(&p, factor)?;
        let scaled = optimal_weights(&p, factor * rng.random_range(0.01..100.0))?;
        let spread = p[horizon] - p[0];
        for t in 0..=horizon {
            let expected = match t {
                0 => -1.0 / spread,
                t if t == horizon => 1.0 / spread,
                _ => 0.0,
            };
            worst = worst
                .max((sol.alphas[t] - expected).abs())
                .max((scaled.alphas[t] - sol.alphas[t]).abs());
        }
    }
    Ok(worst)
}

/// Worst violation of partition of unity and polynomial exactness.
fn lagrange_identities() -> Result<f64> {
    let mut rng = rng_from_seed(6000);
    let mut worst: f64 = 0.0;
    for g in 0..200 {
        let horizon = 1 + g % 6;
        let x = random_grid(&mut rng, horizon + 1, 0.02);
        let c = rng.random::<f64>();
        let basis = lagrange_basis(&x, c)?;
        worst = worst.max((basis.iter().sum::<f64>() - 1.0).abs());
        for degree in 1..=horizon as i32 {
            let interpolated: f64 = basis
                .iter()
                .zip(&x)
                .map(|(l, xt)| l * xt.powi(degree))
                .sum();
            worst = worst.max((interpolated - c.powi(degree)).abs());
        }
        let gamma = lagrange_weights(&x)?.weights;
        worst = worst.max(gamma.iter().sum::<f64>().abs());
    }
    Ok(worst)
}

/// Largest `|γ_t| Δ^T / 2` over random grids (must stay ≤ 1).
fn lagrange_weight_bound() -> Result<f64> {
    let mut rng = rng_from_seed(7000);
    let mut worst: f64 = 0.0;
    for g in 0..200 {
        let horizon = 1 + g % 6;
        let x = random_grid(&mut rng, horizon + 1, 1e-3);
        let delta = x
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        for gamma in lagrange_weights(&x)?.weights {
            worst = worst.max(gamma.abs() * delta.powi(horizon as i32) / 2.0);
        }
    }
    Ok(worst)
}

fn subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0usize..1 << n).map(move |m| (0..n).filter(|b| m >> b & 1 == 1).collect())
}

fn brd_marginals() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        let p = [0.1, 0.35, 0.8];
        let outcomes = enumerate_brd(&p, n)?;
        for set in subsets(n) {
            for (t, pt) in p.iter().enumerate() {
                let exact: f64 = outcomes
                    .iter()
                    .filter(|o| o.all_treated(&set, t))
                    .map(|o| o.probability)
                    .sum();
                worst = worst.max((exact - pt.powi(set.len() as i32)).abs());
            }
        }
    }
    Ok(worst)
}

fn crd_marginals() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        let k = crd_ladder(n, 2);
        let outcomes = enumerate_crd(&k, n)?;
        for set in subsets(n) {
            for (t, &kt) in k.iter().enumerate() {
                let exact: f64 = outcomes
                    .iter()
                    .filter(|o| o.all_treated(&set, t))
                    .map(|o| o.probability)
                    .sum();
                worst = worst.max((exact - bracket(kt, n, set.len())?).abs());
            }
        }
    }
    Ok(worst)
}

/// `min` and `max` of `E[1/X^β](np)^β` at n = 2000, p = 0.1, β ∈ {1, 2}.
fn inverse_moment_ratios() -> Result<(f64, f64)> {
    let (n, p) = (2000, 0.1);
    let mut ratios = Vec::new();
    for beta in [1u32, 2] {
        ratios.push(inverse_binomial_moment(n, p, beta)? * (n as f64 * p).powi(beta as i32));
    }
    Ok((
        ratios.iter().copied().fold(f64::INFINITY, f64::min),
        ratios.iter().copied().fold(0.0, f64::max),
    ))
}

/// Runs every exact check; one entry per property.
pub fn run_verification_suite() -> Vec<Check> {
    let mut checks = vec![
        or_fail(
            "unbiased_brd",
            1e-9,
            unbiased_brd().map(|v| Check::at_most("unbiased_brd", v, 1e-9)),
        ),
        or_fail(
            "unbiased_crd",
            1e-9,
            unbiased_crd().map(|v| Check::at_most("unbiased_crd", v, 1e-9)),
        ),
    ];
    for (name, design) in [
        ("variance_bound_brd", DesignKind::Bernoulli),
        ("variance_bound_crd", DesignKind::Complete),
    ] {
        checks.push(match variance_bound(design) {
            Ok(Some(frac)) => Check::at_least(name, frac, 0.9),
            _ => Check::failed(name, 0.9),
        });
    }
    checks.push(or_fail(
        "realized_count_bias",
        1e-12,
        realized_bias_identity().map(|v| Check::at_most("realized_count_bias", v, 1e-12)),
    ));
    checks.push(or_fail(
        "optimal_weights_endpoints",
        1e-8,
        optimal_weight_structure().map(|v| Check::at_most("optimal_weights_endpoints", v, 1e-8)),
    ));
    checks.push(or_fail(
        "lagrange_identities",
        1e-9,
        lagrange_identities().map(|v| Check::at_most("lagrange_identities", v, 1e-9)),
    ));
    checks.push(or_fail(
        "lagrange_weight_bound",
        1.0,
        lagrange_weight_bound().map(|v| Check::at_most("lagrange_weight_bound", v, 1.0)),
    ));
    checks.push(or_fail(
        "brd_marginals",
        1e-12,
        brd_marginals().map(|v| Check::at_most("brd_marginals", v, 1e-12)),
    ));
    checks.push(or_fail(
        "crd_marginals",
        1e-12,
        crd_marginals().map(|v| Check::at_most("crd_marginals", v, 1e-12)),
    ));
    match inverse_moment_ratios() {
        Ok((lo, hi)) => {
            checks.push(Check::at_least("inverse_binomial_ratio_low", lo, 1.0));
            checks.push(Check::at_most("inverse_binomial_ratio_high", hi, 1.1));
        }
        Err(_) => checks.push(Check::failed("inverse_binomial_ratio", 1.1)),
    }
    checks.push(or_fail(
        "bracket_ratio_decay",
        0.0,
        bracket_ratio_check(1000, 0.5, 1, 2)
            .and_then(|large| Ok(large - bracket_ratio_check(100, 0.5, 1, 2)?))
            .map(|v| Check::at_most("bracket_ratio_decay", v, 0.0)),
    ));
    checks
}
