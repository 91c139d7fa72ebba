//! TTE estimators.
//!
//! The polynomial-interpolation (PI) estimator extrapolates the stage means
//! `ȳ_t`, observed at treated fractions `x_t`, to fractions 1 and 0 with the
//! Lagrange interpolant through the `T + 1` points. The baselines
//! (difference in means, thresholded difference in means and the two
//! least-squares regressions) only look at the final stage.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::TARGET_GAP_TOLERANCE;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::outcomes::ObservationSet;

/// Singular values below this fraction of the largest are discarded in the regression solve.
pub const LS_RANK_TOLERANCE: f64 = 1e-10;

/// Default neighbourhood-agreement threshold for [`dm_threshold`].
pub const DEFAULT_LAMBDA: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    PiBrdP,
    PiCrdK,
    PiBrdKhat,
    Dm,
    DmThresh,
    LsNum,
    LsProp,
    TwoPoint,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 8] = [
        EstimatorTag::PiBrdP,
        EstimatorTag::PiCrdK,
        EstimatorTag::PiBrdKhat,
        EstimatorTag::Dm,
        EstimatorTag::DmThresh,
        EstimatorTag::LsNum,
        EstimatorTag::LsProp,
        EstimatorTag::TwoPoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::PiBrdP => "pi_brd_p",
            EstimatorTag::PiCrdK => "pi_crd_k",
            EstimatorTag::PiBrdKhat => "pi_brd_khat",
            EstimatorTag::Dm => "dm",
            EstimatorTag::DmThresh => "dm_thresh",
            EstimatorTag::LsNum => "ls_num",
            EstimatorTag::LsProp => "ls_prop",
            EstimatorTag::TwoPoint => "two_point",
        }
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateMeta {
    pub targets: Option<Vec<f64>>,
    pub realized_counts: Option<Vec<usize>>,
    pub lambda: Option<f64>,
    pub coefficients: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub tag: EstimatorTag,
    pub value: f64,
    pub meta: EstimateMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationWeights {
    pub targets: Vec<f64>,
    /// `γ_t = ℓ_t(1) - ℓ_t(0)`
    pub weights: Vec<f64>,
    /// Set when two consecutive targets coincide; all weights are then 0.
    pub degenerate: bool,
}

impl InterpolationWeights {
    /// `Σ_t γ_t y_t`.
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(g, y)| g * y).sum()
    }
}

fn check_nondecreasing(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid("interpolation targets are empty"));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite interpolation target {v}"
        )));
    }
    if x.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!(
            "interpolation targets {x:?} are decreasing"
        )));
    }
    Ok(())
}

fn is_degenerate(x: &[f64]) -> bool {
    x.windows(2).any(|w| w[1] - w[0] < TARGET_GAP_TOLERANCE)
}

/// Values of the Lagrange basis polynomials `ℓ_{t,x}(c)` for distinct nodes `x`.
pub fn lagrange_basis(x: &[f64], c: f64) -> Result<Vec<f64>> {
    check_nondecreasing(x)?;
    if is_degenerate(x) {
        return Err(Error::invalid("Lagrange basis needs distinct targets"));
    }
    Ok((0..x.len())
        .map(|t| {
            (0..x.len())
                .filter(|&s| s != t)
                .map(|s| (c - x[s]) / (x[t] - x[s]))
                .product()
        })
        .collect())
}

/// Extrapolation weights `γ_t = ℓ_{t,x}(1) - ℓ_{t,x}(0)`.
pub fn lagrange_weights(x: &[f64]) -> Result<InterpolationWeights> {
    check_nondecreasing(x)?;
    if is_degenerate(x) {
        return Ok(InterpolationWeights {
            targets: x.to_vec(),
            weights: vec![0.0; x.len()],
            degenerate: true,
        });
    }
    let weights = (0..x.len())
        .map(|t| {
            let (mut at_one, mut at_zero) = (1.0, 1.0);
            for s in (0..x.len()).filter(|&s| s != t) {
                let gap = x[t] - x[s];
                at_one *= (1.0 - x[s]) / gap;
                at_zero *= -x[s] / gap;
            }
            at_one - at_zero
        })
        .collect();
    Ok(InterpolationWeights {
        targets: x.to_vec(),
        weights,
        degenerate: false,
    })
}

/// Polynomial-interpolation estimate `Σ_t γ_t ȳ_t` at targets `x`; 0 when
/// two consecutive targets coincide.
pub fn tte_pi(obs: &ObservationSet, x: &[f64], tag: EstimatorTag) -> Result<Estimate> {
    if obs.stages() != x.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: obs.stages(),
        });
    }
    let w = lagrange_weights(x)?;
    Ok(Estimate {
        tag,
        value: w.apply(obs.means()),
        meta: EstimateMeta {
            targets: Some(x.to_vec()),
            ..Default::default()
        },
    })
}

fn check_pair(z: &[bool], y: &[f64]) -> Result<()> {
    if z.len() != y.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            actual: y.len(),
        });
    }
    Ok(())
}

fn group_difference(z: &[bool], y: &[f64], include: impl Fn(usize) -> bool) -> Result<f64> {
    let (mut treated_sum, mut treated_n) = (0.0, 0usize);
    let (mut control_sum, mut control_n) = (0.0, 0usize);
    for i in 0..z.len() {
        if !include(i) {
            continue;
        }
        if z[i] {
            treated_sum += y[i];
            treated_n += 1;
        } else {
            control_sum += y[i];
            control_n += 1;
        }
    }
    if treated_n == 0 {
        return Err(Error::DegenerateGroup("treated group is empty".into()));
    }
    if control_n == 0 {
        return Err(Error::DegenerateGroup("control group is empty".into()));
    }
    Ok(treated_sum / treated_n as f64 - control_sum / control_n as f64)
}

/// Difference in means between treated and control individuals.
pub fn dm(z: &[bool], y: &[f64]) -> Result<Estimate> {
    check_pair(z, y)?;
    Ok(Estimate {
        tag: EstimatorTag::Dm,
        value: group_difference(z, y, |_| true)?,
        meta: EstimateMeta::default(),
    })
}

/// Difference in means restricted to individuals whose non-self
/// in-neighbours share their own assignment in a fraction of at least
/// `lambda`. Individuals without non-self neighbours always qualify.
pub fn dm_threshold(z: &[bool], y: &[f64], graph: &Graph, lambda: f64) -> Result<Estimate> {
    check_pair(z, y)?;
    if graph.n() != z.len() {
        return Err(Error::Dimension {
            expected: graph.n(),
            actual: z.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let qualifies = |i: usize| {
        let others = graph.in_neighbors(i).iter().filter(|&&j| j != i);
        let (agree, total) = others.fold((0usize, 0usize), |(a, t), &j| {
            (a + usize::from(z[j] == z[i]), t + 1)
        });
        total == 0 || agree as f64 / total as f64 >= lambda
    };
    Ok(Estimate {
        tag: EstimatorTag::DmThresh,
        value: group_difference(z, y, qualifies)?,
        meta: EstimateMeta {
            lambda: Some(lambda),
            ..Default::default()
        },
    })
}

/// Covariate used by the regression baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Covariate {
    /// Number of treated non-self in-neighbours.
    Count,
    /// Fraction of non-self in-neighbours treated (0 when there are none).
    Fraction,
}

/// Fitted regression `ĝ(z, X) = ρ + Σ_k γ_k X^k + z (ρ̃ + Σ_{k<β} γ̃_k X^k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub beta: usize,
    /// `(ρ, γ_1..γ_β, ρ̃, γ̃_1..γ̃_{β-1})`
    pub coefficients: Vec<f64>,
}

impl RegressionFit {
    pub fn predict(&self, z: bool, x: f64) -> f64 {
        let b = self.beta;
        let c = &self.coefficients;
        let mut y = c[0];
        let mut pow = 1.0;
        for ck in &c[1..=b] {
            pow *= x;
            y += ck * pow;
        }
        if z {
            y += c[b + 1];
            let mut pow = 1.0;
            for k in 1..b {
                pow *= x;
                y += c[b + 1 + k] * pow;
            }
        }
        y
    }
}

/// Design row `(1, X, …, X^β, z, zX, …, zX^{β-1})`.
pub fn regression_features(z: bool, x: f64, beta: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * beta + 1);
    let mut pow = 1.0;
    for _ in 0..=beta {
        row.push(pow);
        pow *= x;
    }
    let zf = if z { 1.0 } else { 0.0 };
    let mut pow = 1.0;
    for _ in 0..beta {
        row.push(zf * pow);
        pow *= x;
    }
    row
}

/// Minimum-norm least squares on explicit feature rows.
pub fn fit_regression(rows: &[Vec<f64>], y: &[f64], beta: usize) -> Result<RegressionFit> {
    let columns = 2 * beta + 1;
    if rows.len() != y.len() {
        return Err(Error::Dimension {
            expected: rows.len(),
            actual: y.len(),
        });
    }
    if rows.len() < columns {
        return Err(Error::Underdetermined {
            rows: rows.len(),
            columns,
        });
    }
    let a = DMatrix::from_fn(rows.len(), columns, |i, j| rows[i][j]);
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let largest = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let coefficients = if largest == 0.0 {
        vec![0.0; columns]
    } else {
        let sol = svd
            .solve(&b, LS_RANK_TOLERANCE * largest)
            .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
        sol.iter().copied().collect()
    };
    Ok(RegressionFit { beta, coefficients })
}

/// Least-squares regression baseline on the final-stage data.
///
/// The estimate is `(1/n) Σ_i ĝ(1, X_i^full) - ĝ(0, 0)` with `X_i^full = |N_i| - 1`
/// for counts and `1` for fractions.
pub fn ls_estimate(
    z: &[bool],
    y: &[f64],
    graph: &Graph,
    beta: usize,
    covariate: Covariate,
) -> Result<Estimate> {
    check_pair(z, y)?;
    if graph.n() != z.len() {
        return Err(Error::Dimension {
            expected: graph.n(),
            actual: z.len(),
        });
    }
    if beta < 1 {
        return Err(Error::invalid("beta must be at least 1"));
    }
    let n = z.len();
    let covariates: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let others = graph.in_neighbors(i).len() - 1;
            let treated = graph
                .in_neighbors(i)
                .iter()
                .filter(|&&j| j != i && z[j])
                .count() as f64;
            match covariate {
                Covariate::Count => (treated, others as f64),
                Covariate::Fraction if others == 0 => (0.0, 1.0),
                Covariate::Fraction => (treated / others as f64, 1.0),
            }
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| regression_features(z[i], covariates[i].0, beta))
        .collect();
    let fit = fit_regression(&rows, y, beta)?;
    let base = fit.predict(false, 0.0);
    let value = covariates
        .iter()
        .map(|&(_, full)| fit.predict(true, full) - base)
        .sum::<f64>()
        / n as f64;
    let tag = match covariate {
        Covariate::Count => EstimatorTag::LsNum,
        Covariate::Fraction => EstimatorTag::LsProp,
    };
    Ok(Estimate {
        tag,
        value,
        meta: EstimateMeta {
            coefficients: Some(fit.coefficients),
            ..Default::default()
        },
    })
}

/// `(ȳ_T - ȳ_0) / (x_T - x_0)`: the degree-one interpolant through the
/// first and last stages.
pub fn two_point_linear(obs: &ObservationSet, x0: f64, x_final: f64) -> Result<Estimate> {
    if !(x_final > x0) {
        return Err(Error::invalid(format!(
            "two-point estimator needs x_T > x_0, got {x0} and {x_final}"
        )));
    }
    let means = obs.means();
    Ok(Estimate {
        tag: EstimatorTag::TwoPoint,
        value: (means[means.len() - 1] - means[0]) / (x_final - x0),
        meta: EstimateMeta {
            targets: Some(vec![x0, x_final]),
            ..Default::default()
        },
    })
}
