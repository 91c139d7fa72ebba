//! Potential-outcomes models.
//!
//! Two representations are supported. [`ParametricModel`] is the simulation
//! family used in the experiments: a baseline, linear influence weights and
//! shared higher-order terms in the normalised treated weight. [`CoefficientModel`]
//! is the generic low-degree form `Y_i(z) = Σ_S c_{i,S} Π_{j∈S} z_j`. The
//! parametric family expands exactly into the coefficient form on small
//! neighbourhoods, which is what the exact oracles consume.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::TreatmentSchedule;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::rng_from_seed;

/// Largest in-neighbourhood [`expand_to_coefficients`] accepts.
pub const MAX_EXPANSION_NEIGHBORHOOD: usize = 20;

pub trait OutcomeModel {
    fn graph(&self) -> &Graph;

    /// Polynomial degree `β`.
    fn beta(&self) -> usize;

    /// Standard deviation of the additive observation noise.
    fn noise_sigma(&self) -> f64;

    /// `Y_i(z)`; `z` must have length `n`.
    fn outcome(&self, i: usize, z: &[bool]) -> f64;

    fn n(&self) -> usize {
        self.graph().n()
    }

    fn evaluate(&self, z: &[bool]) -> Result<Vec<f64>> {
        check_len(self.n(), z.len())?;
        Ok((0..self.n()).map(|i| self.outcome(i, z)).collect())
    }

    /// Population mean outcome under `z`.
    fn mean_outcome(&self, z: &[bool]) -> Result<f64> {
        check_len(self.n(), z.len())?;
        let n = self.n();
        Ok((0..n).map(|i| self.outcome(i, z)).sum::<f64>() / n as f64)
    }

    /// Total treatment effect: mean of `Y_i(1) - Y_i(0)`.
    fn true_tte(&self) -> f64 {
        let n = self.n();
        let ones = vec![true; n];
        let zeros = vec![false; n];
        (0..n)
            .map(|i| self.outcome(i, &ones) - self.outcome(i, &zeros))
            .sum::<f64>()
            / n as f64
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension { expected, actual });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricModel {
    graph: Graph,
    beta: usize,
    r: f64,
    sigma: f64,
    baseline: Vec<f64>,
    /// `ctilde[i][m]` is the weight of `graph.in_neighbors(i)[m]` on `i`.
    ctilde: Vec<Vec<f64>>,
    totals: Vec<f64>,
}

impl ParametricModel {
    /// Builds a model from explicit coefficients. `ctilde[i]` is aligned with
    /// `graph.in_neighbors(i)`.
    pub fn new(
        graph: Graph,
        beta: usize,
        r: f64,
        sigma: f64,
        baseline: Vec<f64>,
        ctilde: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if beta < 1 {
            return Err(Error::invalid("beta must be at least 1"));
        }
        if !(r >= 0.0) || !(sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "r = {r} and sigma = {sigma} must be >= 0"
            )));
        }
        check_len(graph.n(), baseline.len())?;
        check_len(graph.n(), ctilde.len())?;
        let mut totals = Vec::with_capacity(graph.n());
        for (i, weights) in ctilde.iter().enumerate() {
            check_len(graph.in_neighbors(i).len(), weights.len())?;
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(Error::invalid(format!(
                    "influence weights of node {i} must have a positive sum"
                )));
            }
            totals.push(total);
        }
        Ok(ParametricModel {
            graph,
            beta,
            r,
            sigma,
            baseline,
            ctilde,
            totals,
        })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    /// Weights of `graph.in_neighbors(i)` on `i`.
    pub fn influence_weights(&self, i: usize) -> &[f64] {
        &self.ctilde[i]
    }

    /// `c̃_{ii}`.
    pub fn direct_effect(&self, i: usize) -> f64 {
        let m = self
            .graph
            .in_neighbors(i)
            .binary_search(&i)
            .expect("self-loop invariant");
        self.ctilde[i][m]
    }

    /// Outcome of `i` given the treated weight `s = Σ_j c̃_ij z_j`.
    fn outcome_from_weight(&self, i: usize, s: f64) -> f64 {
        let ratio = s / self.totals[i];
        let mut y = self.baseline[i] + s;
        let mut pow = ratio;
        for _ in 2..=self.beta {
            pow *= ratio;
            y += pow;
        }
        y
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParametricModelFile {
            n: self.graph.n(),
            beta: self.beta,
            r: self.r,
            sigma: self.sigma,
            baseline: self.baseline.clone(),
            ctilde: (0..self.graph.n())
                .map(|i| {
                    self.graph
                        .in_neighbors(i)
                        .iter()
                        .copied()
                        .zip(self.ctilde[i].iter().copied())
                        .collect()
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParametricModelFile = serde_json::from_str(text)?;
        check_len(file.n, file.ctilde.len())?;
        let mut lists = Vec::with_capacity(file.n);
        let mut weights = Vec::with_capacity(file.n);
        for row in file.ctilde {
            let mut row = row;
            row.sort_by_key(|&(j, _)| j);
            lists.push(row.iter().map(|&(j, _)| j).collect::<Vec<_>>());
            weights.push(row.iter().map(|&(_, w)| w).collect::<Vec<_>>());
        }
        let graph = Graph::from_in_neighbors(lists)?;
        ParametricModel::new(graph, file.beta, file.r, file.sigma, file.baseline, weights)
    }
}

#[derive(Serialize, Deserialize)]
struct ParametricModelFile {
    n: usize,
    beta: usize,
    r: f64,
    sigma: f64,
    baseline: Vec<f64>,
    ctilde: Vec<Vec<(usize, f64)>>,
}

impl OutcomeModel for ParametricModel {
    fn graph(&self) -> &Graph {
        &self.graph
    }

    fn beta(&self) -> usize {
        self.beta
    }

    fn noise_sigma(&self) -> f64 {
        self.sigma
    }

    fn outcome(&self, i: usize, z: &[bool]) -> f64 {
        let s: f64 = self
            .graph
            .in_neighbors(i)
            .iter()
            .zip(&self.ctilde[i])
            .filter(|(&j, _)| z[j])
            .map(|(_, &w)| w)
            .sum();
        self.outcome_from_weight(i, s)
    }
}

/// Samples the experimental outcome model on `graph`.
///
/// `c_{i,∅} ~ U[0,1]`, `c̃_ii ~ U[0,1]` (redrawn if exactly 0), and each
/// individual `j` gets an influence budget `v_j ~ U[0,r]` split among its
/// out-neighbours in proportion to their in-degrees:
/// `c̃_ij = v_j |N_i| / Σ_{k: j∈N_k} |N_k|`.
pub fn sample_parametric_model(
    graph: &Graph,
    beta: usize,
    r: f64,
    seed: u64,
) -> Result<ParametricModel> {
    if beta < 1 {
        return Err(Error::invalid("beta must be at least 1"));
    }
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!(
            "r must be finite and >= 0, got {r}"
        )));
    }
    let n = graph.n();
    let mut rng = rng_from_seed(seed);
    let baseline: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let direct: Vec<f64> = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random();
            if v > 0.0 {
                break v;
            }
        })
        .collect();
    let influence: Vec<f64> = (0..n).map(|_| r * rng.random::<f64>()).collect();

    let mut share_norm = vec![0.0f64; n];
    for i in 0..n {
        let in_deg = graph.in_neighbors(i).len() as f64;
        for &j in graph.in_neighbors(i) {
            share_norm[j] += in_deg;
        }
    }

    let ctilde: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let in_deg = graph.in_neighbors(i).len() as f64;
            graph
                .in_neighbors(i)
                .iter()
                .map(|&j| {
                    if j == i {
                        direct[i]
                    } else {
                        influence[j] * in_deg / share_norm[j]
                    }
                })
                .collect()
        })
        .collect();
    ParametricModel::new(graph.clone(), beta, r, 0.0, baseline, ctilde)
}

/// Sorted subset of node indices used as a coefficient key.
pub type Subset = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientModel {
    graph: Graph,
    beta: usize,
    sigma: f64,
    coefficients: Vec<BTreeMap<Subset, f64>>,
}

impl CoefficientModel {
    /// Validates that every key is a sorted, duplicate-free subset of the
    /// node's in-neighbourhood with at most `beta` elements.
    pub fn new(
        graph: Graph,
        beta: usize,
        coefficients: Vec<BTreeMap<Subset, f64>>,
    ) -> Result<Self> {
        if beta < 1 {
            return Err(Error::invalid("beta must be at least 1"));
        }
        check_len(graph.n(), coefficients.len())?;
        for (i, map) in coefficients.iter().enumerate() {
            let nbrs = graph.in_neighbors(i);
            for (subset, value) in map {
                if subset.len() > beta {
                    return Err(Error::invalid(format!(
                        "subset {subset:?} of node {i} exceeds degree {beta}"
                    )));
                }
                if subset.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid(format!(
                        "subset {subset:?} is not strictly sorted"
                    )));
                }
                if let Some(j) = subset.iter().find(|j| nbrs.binary_search(j).is_err()) {
                    return Err(Error::invalid(format!(
                        "subset {subset:?} of node {i} contains non-neighbour {j}"
                    )));
                }
                if !value.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite coefficient for {subset:?}"
                    )));
                }
            }
        }
        Ok(CoefficientModel {
            graph,
            beta,
            sigma: 0.0,
            coefficients,
        })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn coefficients(&self, i: usize) -> &BTreeMap<Subset, f64> {
        &self.coefficients[i]
    }

    pub fn coefficient(&self, i: usize, subset: &[usize]) -> f64 {
        self.coefficients[i].get(subset).copied().unwrap_or(0.0)
    }

    /// `Y_max = max_i Σ_S |c_{i,S}|`.
    pub fn y_max(&self) -> f64 {
        self.coefficients
            .iter()
            .map(|m| m.values().map(|c| c.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `L_j = Σ_{i: j∈N_i} Σ_{S∋j} |c_{i,S}|` for every `j`.
    pub fn influences(&self) -> Vec<f64> {
        let mut l = vec![0.0; self.graph.n()];
        for map in &self.coefficients {
            for (subset, c) in map {
                for &j in subset {
                    l[j] += c.abs();
                }
            }
        }
        l
    }

    pub fn l_max(&self) -> f64 {
        self.influences().into_iter().fold(0.0, f64::max)
    }

    /// TTE read directly off the coefficients: mean over `i` of `Σ_{S≠∅} c_{i,S}`.
    pub fn tte_from_coefficients(&self) -> f64 {
        let total: f64 = self
            .coefficients
            .iter()
            .map(|m| {
                m.iter()
                    .filter(|(s, _)| !s.is_empty())
                    .map(|(_, c)| c)
                    .sum::<f64>()
            })
            .sum();
        total / self.graph.n() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CoefficientModelFile {
            n: self.graph.n(),
            beta: self.beta,
            sigma: self.sigma,
            in_neighbors: self.graph.all_in_neighbors().to_vec(),
            coefficients: self
                .coefficients
                .iter()
                .map(|m| m.iter().map(|(s, &c)| (s.clone(), c)).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CoefficientModelFile = serde_json::from_str(text)?;
        check_len(file.n, file.in_neighbors.len())?;
        let graph = Graph::from_in_neighbors(file.in_neighbors)?;
        let coefficients = file
            .coefficients
            .into_iter()
            .map(|row| row.into_iter().collect())
            .collect();
        CoefficientModel::new(graph, file.beta, coefficients)?.with_sigma(file.sigma)
    }
}

#[derive(Serialize, Deserialize)]
struct CoefficientModelFile {
    n: usize,
    beta: usize,
    sigma: f64,
    in_neighbors: Vec<Vec<usize>>,
    coefficients: Vec<Vec<(Subset, f64)>>,
}

impl OutcomeModel for CoefficientModel {
    fn graph(&self) -> &Graph {
        &self.graph
    }

    fn beta(&self) -> usize {
        self.beta
    }

    fn noise_sigma(&self) -> f64 {
        self.sigma
    }

    fn outcome(&self, i: usize, z: &[bool]) -> f64 {
        self.coefficients[i]
            .iter()
            .filter(|(s, _)| s.iter().all(|&j| z[j]))
            .map(|(_, c)| c)
            .sum()
    }
}

/// Exact multilinear expansion of a parametric model into `c_{i,S}` form.
///
/// For each node the outcome is tabulated on every subset of its
/// neighbourhood and Möbius-inverted; subsets larger than `β` carry zero
/// coefficients and are dropped.
pub fn expand_to_coefficients(model: &ParametricModel) -> Result<CoefficientModel> {
    let graph = model.graph();
    let widest = graph.max_in_degree();
    if widest > MAX_EXPANSION_NEIGHBORHOOD {
        return Err(Error::Capacity(format!(
            "in-neighbourhood of size {widest} exceeds expansion limit {MAX_EXPANSION_NEIGHBORHOOD}"
        )));
    }
    let beta = model.beta();
    let mut coefficients = Vec::with_capacity(graph.n());
    for i in 0..graph.n() {
        let nbrs = graph.in_neighbors(i);
        let weights = model.influence_weights(i);
        let m = nbrs.len();
        let mut table: Vec<f64> = (0..1usize << m)
            .map(|mask| {
                let s: f64 = (0..m)
                    .filter(|b| mask >> b & 1 == 1)
                    .map(|b| weights[b])
                    .sum();
                model.outcome_from_weight(i, s)
            })
            .collect();
        for b in 0..m {
            let bit = 1usize << b;
            for mask in 0..table.len() {
                if mask & bit != 0 {
                    table[mask] -= table[mask ^ bit];
                }
            }
        }
        let map: BTreeMap<Subset, f64> = table
            .iter()
            .enumerate()
            .filter(|(mask, _)| (mask.count_ones() as usize) <= beta)
            .map(|(mask, &c)| {
                let subset: Subset = (0..m)
                    .filter(|b| mask >> b & 1 == 1)
                    .map(|b| nbrs[b])
                    .collect();
                (subset, c)
            })
            .collect();
        coefficients.push(map);
    }
    CoefficientModel::new(graph.clone(), beta, coefficients)?.with_sigma(model.noise_sigma())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// `values[t][i] = Y^obs_{i,t}`
    values: Vec<Vec<f64>>,
    means: Vec<f64>,
    sigma: f64,
}

impl ObservationSet {
    pub fn from_matrix(values: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("observation set needs at least one stage"));
        }
        let n = values[0].len();
        if n == 0 {
            return Err(Error::invalid(
                "observation set needs at least one individual",
            ));
        }
        for row in &values {
            check_len(n, row.len())?;
        }
        let means = values
            .iter()
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        Ok(ObservationSet {
            values,
            means,
            sigma,
        })
    }

    /// Observation set made only of stage means (one pseudo-individual per stage).
    pub fn from_means(means: &[f64]) -> Result<Self> {
        ObservationSet::from_matrix(means.iter().map(|&m| vec![m]).collect(), 0.0)
    }

    pub fn stages(&self) -> usize {
        self.values.len()
    }

    pub fn n(&self) -> usize {
        self.values[0].len()
    }

    pub fn stage(&self, t: usize) -> &[f64] {
        &self.values[t]
    }

    pub fn final_stage(&self) -> &[f64] {
        &self.values[self.values.len() - 1]
    }

    /// `ȳ_t`.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Keeps only the listed stages, in the given order.
    pub fn restrict(&self, stages: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(stages.len());
        for &t in stages {
            let row = self.values.get(t).ok_or(Error::Dimension {
                expected: self.values.len(),
                actual: t + 1,
            })?;
            values.push(row.clone());
        }
        ObservationSet::from_matrix(values, self.sigma)
    }
}

/// Observes every stage of `schedule`: `Y^obs_{i,t} = Y_i(z^t) + ε_{i,t}`,
/// `ε ~ N(0, σ²)` iid from a stream seeded by `seed`. With `σ = 0` no noise
/// is drawn.
pub fn observe<M: OutcomeModel + ?Sized>(
    model: &M,
    schedule: &TreatmentSchedule,
    seed: u64,
) -> Result<ObservationSet> {
    check_len(model.n(), schedule.n())?;
    let sigma = model.noise_sigma();
    let mut rng = rng_from_seed(seed);
    let mut values = Vec::with_capacity(schedule.horizon() + 1);
    for z in schedule.stages() {
        let mut row = model.evaluate(z)?;
        if sigma > 0.0 {
            for y in &mut row {
                let eps: f64 = rng.sample(StandardNormal);
                *y += sigma * eps;
            }
        }
        values.push(row);
    }
    ObservationSet::from_matrix(values, sigma)
}
