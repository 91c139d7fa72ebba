//! Monte-Carlo experiment runner.
//!
//! A config fixes the design, model and estimators and sweeps exactly one of
//! `n`, `r`, `budget` or `beta`. For every sweep value `G` graphs are drawn,
//! each with its own outcome model, and `N` rollouts are run on each. Every
//! estimator produces one record per rollout. Seeds are derived from the
//! master seed and the replicate indices alone, so the output does not depend
//! on the worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{
    brd_ladder, brd_schedule, budget_count, crd_ladder, crd_schedule, DesignKind, TreatmentSchedule,
};
use crate::error::{Error, Result};
use crate::estimators::{
    dm, dm_threshold, ls_estimate, tte_pi, two_point_linear, Covariate, EstimatorTag,
    DEFAULT_LAMBDA,
};
use crate::graph::{generate_configuration_model, Graph};
use crate::outcomes::{observe, sample_parametric_model, ObservationSet, OutcomeModel};
use crate::seed::derive_seed;

pub const RECORD_HEADER: &str =
    "design,estimator,n,beta,r,budget,graph_seed,schedule_seed,tte_true,tte_est,status";
pub const SUMMARY_HEADER: &str =
    "sweep_param,sweep_value,estimator,mean_rel_bias,std_rel_bias,n_ok,n_skipped";

/// Smallest `|TTE|` for which relative bias is reported.
pub const MIN_ABS_TTE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    N,
    R,
    Budget,
    Beta,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::N => "n",
            SweepParam::R => "r",
            SweepParam::Budget => "budget",
            SweepParam::Beta => "beta",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepParam::N),
            "r" => Ok(SweepParam::R),
            "budget" => Ok(SweepParam::Budget),
            "beta" => Ok(SweepParam::Beta),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter `{s}` (expected n, r, budget or beta)"
            ))),
        }
    }
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_exponent() -> f64 {
    2.5
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub design: DesignKind,
    pub n: usize,
    pub beta: usize,
    pub r: f64,
    /// Final treated fraction: `p` for BRD, `k / n` for CRD.
    pub budget: f64,
    #[serde(default)]
    pub sigma: f64,
    /// Graphs per sweep value (`G`).
    #[serde(default = "default_count")]
    pub graphs: usize,
    /// Rollouts per graph (`N`).
    #[serde(default = "default_count")]
    pub schedules: usize,
    /// Empty means every estimator applicable to the design.
    #[serde(default)]
    pub estimators: Vec<EstimatorTag>,
    pub sweep_param: SweepParam,
    /// Empty means the single fixed value of the swept field.
    #[serde(default)]
    pub sweep_values: Vec<f64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            design: DesignKind::Complete,
            n: 1000,
            beta: 1,
            r: 1.25,
            budget: 0.5,
            sigma: 0.0,
            graphs: 30,
            schedules: 100,
            estimators: Vec::new(),
            sweep_param: SweepParam::R,
            sweep_values: Vec::new(),
            master_seed: 0,
            lambda: DEFAULT_LAMBDA,
            exponent: default_exponent(),
            output: None,
        }
    }
}

/// Estimators that make sense under `design`.
pub fn applicable_estimators(design: DesignKind) -> Vec<EstimatorTag> {
    EstimatorTag::ALL
        .into_iter()
        .filter(|t| estimator_supports(*t, design))
        .collect()
}

fn estimator_supports(tag: EstimatorTag, design: DesignKind) -> bool {
    match tag {
        EstimatorTag::PiBrdP | EstimatorTag::PiBrdKhat => design == DesignKind::Bernoulli,
        EstimatorTag::PiCrdK => design == DesignKind::Complete,
        _ => true,
    }
}

/// Parameters of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointParams {
    pub n: usize,
    pub beta: usize,
    pub r: f64,
    pub budget: f64,
}

fn as_count(param: SweepParam, v: f64) -> Result<usize> {
    if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
        return Err(Error::Config(format!(
            "sweep value {v} for `{param}` must be a positive integer"
        )));
    }
    Ok(v as usize)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Current value of the swept field.
    fn fixed_value(&self) -> f64 {
        match self.sweep_param {
            SweepParam::N => self.n as f64,
            SweepParam::R => self.r,
            SweepParam::Budget => self.budget,
            SweepParam::Beta => self.beta as f64,
        }
    }

    /// Parameters of sweep point `index`.
    pub fn point(&self, index: usize) -> Result<PointParams> {
        let v = *self
            .sweep_values
            .get(index)
            .ok_or_else(|| Error::Config(format!("sweep index {index} out of range")))?;
        let mut p = PointParams {
            n: self.n,
            beta: self.beta,
            r: self.r,
            budget: self.budget,
        };
        match self.sweep_param {
            SweepParam::N => p.n = as_count(SweepParam::N, v)?,
            SweepParam::R => p.r = v,
            SweepParam::Budget => p.budget = v,
            SweepParam::Beta => p.beta = as_count(SweepParam::Beta, v)?,
        }
        Ok(p)
    }

    /// Fills defaults (estimator list, single-point sweep) and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if self.estimators.is_empty() {
            self.estimators = applicable_estimators(self.design);
        }
        if self.sweep_values.is_empty() {
            self.sweep_values = vec![self.fixed_value()];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.graphs < 1 || self.schedules < 1 {
            return bad(format!(
                "graphs and schedules must be >= 1, got {} and {}",
                self.graphs, self.schedules
            ));
        }
        if self.estimators.is_empty() {
            return bad("no estimators configured".into());
        }
        for (i, t) in self.estimators.iter().enumerate() {
            if !estimator_supports(*t, self.design) {
                return bad(format!(
                    "estimator {t} does not apply to design {}",
                    self.design
                ));
            }
            if self.estimators[..i].contains(t) {
                return bad(format!("estimator {t} listed twice"));
            }
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.exponent > 1.0) || !self.exponent.is_finite() {
            return bad(format!("exponent must be > 1, got {}", self.exponent));
        }
        if self.sweep_values.is_empty() {
            return bad("sweep_values is empty".into());
        }
        for (i, v) in self.sweep_values.iter().enumerate() {
            if self.sweep_values[..i]
                .iter()
                .any(|w| w.to_bits() == v.to_bits())
            {
                return bad(format!("sweep value {v} listed twice"));
            }
        }
        let needs_regression = self
            .estimators
            .iter()
            .any(|t| matches!(t, EstimatorTag::LsNum | EstimatorTag::LsProp));
        for i in 0..self.sweep_values.len() {
            let p = self.point(i)?;
            if p.n < 1 || p.beta < 1 {
                return bad(format!(
                    "n and beta must be >= 1, got n = {}, beta = {}",
                    p.n, p.beta
                ));
            }
            if !(p.r >= 0.0) || !p.r.is_finite() {
                return bad(format!("r must be finite and >= 0, got {}", p.r));
            }
            if !(p.budget > 0.0 && p.budget <= 1.0) {
                return bad(format!("budget must lie in (0, 1], got {}", p.budget));
            }
            if self.design == DesignKind::Complete && budget_count(p.budget, p.n) == 0 {
                return bad(format!("budget {} treats nobody at n = {}", p.budget, p.n));
            }
            if needs_regression && p.n < 2 * p.beta + 1 {
                return bad(format!(
                    "regression baselines need n >= 2 beta + 1, got n = {}, beta = {}",
                    p.n, p.beta
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordStatus {
    Ok,
    Skipped,
}

impl RecordStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Ok => "ok",
            RecordStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub design: DesignKind,
    pub estimator: EstimatorTag,
    pub n: usize,
    pub beta: usize,
    pub r: f64,
    pub budget: f64,
    pub graph_seed: u64,
    pub schedule_seed: u64,
    pub tte_true: f64,
    /// `None` for skipped records.
    pub tte_est: Option<f64>,
    pub status: RecordStatus,
}

impl ExperimentRecord {
    pub fn rel_bias(&self) -> Option<f64> {
        self.tte_est.map(|e| (e - self.tte_true) / self.tte_true)
    }

    /// Value of the swept field.
    pub fn sweep_value(&self, param: SweepParam) -> f64 {
        match param {
            SweepParam::N => self.n as f64,
            SweepParam::R => self.r,
            SweepParam::Budget => self.budget,
            SweepParam::Beta => self.beta as f64,
        }
    }
}

/// Rollout targets for one sweep point; `T = β`.
pub fn build_schedule(design: DesignKind, p: &PointParams, seed: u64) -> Result<TreatmentSchedule> {
    match design {
        DesignKind::Bernoulli => brd_schedule(&brd_ladder(p.budget, p.beta), p.n, seed),
        DesignKind::Complete => {
            crd_schedule(&crd_ladder(budget_count(p.budget, p.n), p.beta), p.n, seed)
        }
    }
}

/// Evaluates one estimator; `Ok(None)` when it is undefined on this draw
/// (an empty comparison group).
pub fn evaluate_estimator(
    tag: EstimatorTag,
    schedule: &TreatmentSchedule,
    obs: &ObservationSet,
    graph: &Graph,
    beta: usize,
    lambda: f64,
) -> Result<Option<f64>> {
    let z = schedule.final_stage();
    let y = obs.final_stage();
    let estimate = match tag {
        EstimatorTag::PiBrdP | EstimatorTag::PiCrdK => {
            tte_pi(obs, &schedule.target_fractions(), tag)
        }
        EstimatorTag::PiBrdKhat => tte_pi(obs, &schedule.realized_fractions(), tag),
        EstimatorTag::TwoPoint => {
            let x = schedule.target_fractions();
            two_point_linear(obs, x[0], x[x.len() - 1])
        }
        EstimatorTag::Dm => dm(z, y),
        EstimatorTag::DmThresh => dm_threshold(z, y, graph, lambda),
        EstimatorTag::LsNum => ls_estimate(z, y, graph, beta, Covariate::Count),
        EstimatorTag::LsProp => ls_estimate(z, y, graph, beta, Covariate::Fraction),
    };
    match estimate {
        Ok(e) => Ok(Some(e.value)),
        Err(Error::DegenerateGroup(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_graph(cfg: &ExperimentConfig, sweep: usize, g: usize) -> Result<Vec<ExperimentRecord>> {
    let p = cfg.point(sweep)?;
    let idx = [sweep as u64, g as u64];
    let graph_seed = derive_seed(cfg.master_seed, "graph", &idx);
    let graph = generate_configuration_model(p.n, cfg.exponent, graph_seed)?;
    let model = sample_parametric_model(
        &graph,
        p.beta,
        p.r,
        derive_seed(cfg.master_seed, "model", &idx),
    )?
    .with_sigma(cfg.sigma)?;
    let tte_true = model.true_tte();
    if !(tte_true.abs() >= MIN_ABS_TTE) {
        return Err(Error::Config(format!(
            "true TTE {tte_true} is too close to 0 for relative bias"
        )));
    }
    let mut tags = cfg.estimators.clone();
    tags.sort_by_key(|t| t.as_str());
    let mut out = Vec::with_capacity(cfg.schedules * tags.len());
    for s in 0..cfg.schedules {
        let idx = [sweep as u64, g as u64, s as u64];
        let schedule_seed = derive_seed(cfg.master_seed, "schedule", &idx);
        let schedule = build_schedule(cfg.design, &p, schedule_seed)?;
        let obs = observe(
            &model,
            &schedule,
            derive_seed(cfg.master_seed, "noise", &idx),
        )?;
        for &tag in &tags {
            let tte_est = evaluate_estimator(tag, &schedule, &obs, &graph, p.beta, cfg.lambda)?;
            out.push(ExperimentRecord {
                design: cfg.design,
                estimator: tag,
                n: p.n,
                beta: p.beta,
                r: p.r,
                budget: p.budget,
                graph_seed,
                schedule_seed,
                tte_true,
                tte_est,
                status: if tte_est.is_some() {
                    RecordStatus::Ok
                } else {
                    RecordStatus::Skipped
                },
            });
        }
    }
    Ok(out)
}

/// Runs every replicate of `cfg` on `workers` threads. Records are ordered by
/// (sweep value, graph, schedule, estimator tag).
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let tasks: Vec<(usize, usize)> = (0..cfg.sweep_values.len())
        .flat_map(|v| (0..cfg.graphs).map(move |g| (v, g)))
        .collect();
    // indexed collect keeps task order, so the output is independent of scheduling
    let chunks: Vec<Vec<ExperimentRecord>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(v, g)| run_graph(cfg, v, g))
            .collect::<Result<_>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_param: SweepParam,
    pub sweep_value: f64,
    pub estimator: EstimatorTag,
    pub mean_rel_bias: Option<f64>,
    pub std_rel_bias: Option<f64>,
    pub n_ok: usize,
    pub n_skipped: usize,
}

/// Mean and population standard deviation of relative bias per
/// (sweep value, estimator), in order of first appearance.
pub fn aggregate(records: &[ExperimentRecord], param: SweepParam) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty record set"));
    }
    let mut order: Vec<(u64, EstimatorTag)> = Vec::new();
    let mut groups: BTreeMap<(u64, EstimatorTag), (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let key = (r.sweep_value(param).to_bits(), r.estimator);
        let entry = groups.entry(key).or_insert_with(|| {
            order.push(key);
            (Vec::new(), 0)
        });
        match r.rel_bias() {
            Some(b) => entry.0.push(b),
            None => entry.1 += 1,
        }
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let (biases, skipped) = &groups[&key];
            let count = biases.len();
            let (mean, std) = if count == 0 {
                (None, None)
            } else {
                let mean = biases.iter().sum::<f64>() / count as f64;
                let var = biases.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / count as f64;
                (Some(mean), Some(var.sqrt()))
            };
            SummaryRow {
                sweep_param: param,
                sweep_value: f64::from_bits(key.0),
                estimator: key.1,
                mean_rel_bias: mean,
                std_rel_bias: std,
                n_ok: count,
                n_skipped: *skipped,
            }
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn records_to_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.design,
            r.estimator,
            r.n,
            r.beta,
            r.r,
            r.budget,
            r.graph_seed,
            r.schedule_seed,
            r.tte_true,
            opt(r.tte_est),
            r.status.as_str()
        );
    }
    out
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.sweep_param,
            s.sweep_value,
            s.estimator,
            opt(s.mean_rel_bias),
            opt(s.std_rel_bias),
            s.n_ok,
            s.n_skipped
        );
    }
    out
}

fn field<T: FromStr>(value: &str, name: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {name} `{value}`"),
    })
}

/// Parses a per-draw CSV written by [`records_to_csv`].
pub fn records_from_csv(text: &str) -> Result<Vec<ExperimentRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RECORD_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{RECORD_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 11 columns, found {}", cols.len()),
            });
        }
        let status = match cols[10] {
            "ok" => RecordStatus::Ok,
            "skipped" => RecordStatus::Skipped,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("invalid status `{other}`"),
                })
            }
        };
        let tte_est = match (status, cols[9]) {
            (RecordStatus::Skipped, "") => None,
            (RecordStatus::Ok, v) => Some(field(v, "tte_est", line_no)?),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "skipped record carries an estimate".into(),
                })
            }
        };
        out.push(ExperimentRecord {
            design: cols[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid design `{}`", cols[0]),
            })?,
            estimator: cols[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid estimator `{}`", cols[1]),
            })?,
            n: field(cols[2], "n", line_no)?,
            beta: field(cols[3], "beta", line_no)?,
            r: field(cols[4], "r", line_no)?,
            budget: field(cols[5], "budget", line_no)?,
            graph_seed: field(cols[6], "graph_seed", line_no)?,
            schedule_seed: field(cols[7], "schedule_seed", line_no)?,
            tte_true: field(cols[8], "tte_true", line_no)?,
            tte_est,
            status,
        });
    }
    Ok(out)
}

/// `results.csv` → `results.summary.csv`.
pub fn summary_path(records_path: &Path) -> PathBuf {
    let stem = records_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    records_path.with_file_name(format!("{stem}.summary.csv"))
}

/// Grid file for `sweep`: a base config plus lists of values for fixed
/// fields, expanded as a cartesian product (fields in key order).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base: serde_json::Value,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<serde_json::Value>>,
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid sweep grid: {e}")))
    }

    /// One JSON config per grid combination.
    pub fn expand(&self) -> Result<Vec<serde_json::Value>> {
        if !self.base.is_object() {
            return Err(Error::Config("sweep grid `base` must be an object".into()));
        }
        let mut combos = vec![self.base.clone()];
        for (key, values) in &self.grid {
            if values.is_empty() {
                return Err(Error::Config(format!("grid field `{key}` has no values")));
            }
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c[key.as_str()] = v.clone();
                        c
                    })
                })
                .collect();
        }
        Ok(combos)
    }
}

/// Records and summary for one resolved config.
pub fn run_and_summarise(
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<(Vec<ExperimentRecord>, Vec<SummaryRow>)> {
    let records = run_experiment(cfg, workers)?;
    let summary = aggregate(&records, cfg.sweep_param)?;
    Ok((records, summary))
}
