//! Staggered rollout designs.
//!
//! A schedule is a monotone sequence of treatment vectors `z^0 ≤ z^1 ≤ … ≤ z^T`:
//! once treated, an individual stays treated. Under the Bernoulli design the
//! marginal law of `z^t` is iid Bernoulli(`p_t`); under the completely
//! randomized design it is a uniform `k_t`-subset.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Consecutive targets closer than this are treated as equal.
pub const TARGET_GAP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignKind {
    #[serde(rename = "brd")]
    Bernoulli,
    #[serde(rename = "crd")]
    Complete,
}

impl DesignKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignKind::Bernoulli => "brd",
            DesignKind::Complete => "crd",
        }
    }
}

impl std::str::FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brd" => Ok(DesignKind::Bernoulli),
            "crd" => Ok(DesignKind::Complete),
            other => Err(Error::invalid(format!(
                "unknown design `{other}` (expected brd|crd)"
            ))),
        }
    }
}

impl std::fmt::Display for DesignKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Design targets: treatment probabilities for BRD, treated counts for CRD.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Probabilities(Vec<f64>),
    Counts(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSchedule {
    n: usize,
    targets: Targets,
    /// `stages[t][i] == z^t_i`
    stages: Vec<Vec<bool>>,
    realized: Vec<usize>,
}

impl TreatmentSchedule {
    /// Assembles a schedule from explicit treatment vectors, validating
    /// monotonicity and, for CRD, that realized counts hit the targets.
    pub fn from_parts(targets: Targets, stages: Vec<Vec<bool>>) -> Result<Self> {
        let horizon = match &targets {
            Targets::Probabilities(p) => {
                validate_probabilities(p)?;
                p.len()
            }
            Targets::Counts(k) => k.len(),
        };
        if stages.len() != horizon {
            return Err(Error::Dimension {
                expected: horizon,
                actual: stages.len(),
            });
        }
        let n = stages[0].len();
        if let Targets::Counts(k) = &targets {
            validate_counts(k, n)?;
        }
        for (t, row) in stages.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    actual: row.len(),
                });
            }
            if t > 0
                && stages[t - 1]
                    .iter()
                    .zip(row)
                    .any(|(&prev, &cur)| prev && !cur)
            {
                return Err(Error::invalid(format!("stage {t} un-treats an individual")));
            }
        }
        let realized: Vec<usize> = stages
            .iter()
            .map(|row| row.iter().filter(|&&z| z).count())
            .collect();
        if let Targets::Counts(k) = &targets {
            if &realized != k {
                return Err(Error::invalid(format!(
                    "realized counts {realized:?} differ from CRD targets {k:?}"
                )));
            }
        }
        Ok(TreatmentSchedule {
            n,
            targets,
            stages,
            realized,
        })
    }

    pub fn kind(&self) -> DesignKind {
        match self.targets {
            Targets::Probabilities(_) => DesignKind::Bernoulli,
            Targets::Counts(_) => DesignKind::Complete,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of treatment rounds `T`; the schedule has `T + 1` stages.
    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn stage(&self, t: usize) -> &[bool] {
        &self.stages[t]
    }

    pub fn stages(&self) -> &[Vec<bool>] {
        &self.stages
    }

    pub fn final_stage(&self) -> &[bool] {
        &self.stages[self.stages.len() - 1]
    }

    /// `k̂_t`, the number of treated individuals at each stage.
    pub fn realized_counts(&self) -> &[usize] {
        &self.realized
    }

    /// Targets on the treated-fraction scale: `p` for BRD, `k / n` for CRD.
    pub fn target_fractions(&self) -> Vec<f64> {
        match &self.targets {
            Targets::Probabilities(p) => p.clone(),
            Targets::Counts(k) => k.iter().map(|&k| k as f64 / self.n as f64).collect(),
        }
    }

    /// `k̂ / n`.
    pub fn realized_fractions(&self) -> Vec<f64> {
        self.realized
            .iter()
            .map(|&k| k as f64 / self.n as f64)
            .collect()
    }

    /// Minimum consecutive gap of the raw target vector (`Δ_p` or `Δ_k`);
    /// `None` for a single-stage schedule.
    pub fn delta(&self) -> Option<f64> {
        match &self.targets {
            Targets::Probabilities(p) => min_gap(p),
            Targets::Counts(k) => {
                let k: Vec<f64> = k.iter().map(|&k| k as f64).collect();
                min_gap(&k)
            }
        }
    }

    /// Text form: `design brd|crd T n`, the target line, then one bitstring per stage.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "design {} {} {}", self.kind(), self.horizon(), self.n);
        let targets: Vec<String> = match &self.targets {
            Targets::Probabilities(p) => p.iter().map(|v| v.to_string()).collect(),
            Targets::Counts(k) => k.iter().map(|v| v.to_string()).collect(),
        };
        let _ = writeln!(s, "{}", targets.join(" "));
        for row in &self.stages {
            let bits: String = row.iter().map(|&z| if z { '1' } else { '0' }).collect();
            let _ = writeln!(s, "{bits}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let perr = |line: usize, message: String| Error::Parse { line, message };

        let (idx, header) = lines
            .next()
            .ok_or_else(|| perr(1, "empty schedule".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "design" {
            return Err(perr(idx + 1, "expected `design brd|crd T n`".into()));
        }
        let kind: DesignKind = parts[1]
            .parse()
            .map_err(|e: Error| perr(idx + 1, e.to_string()))?;
        let horizon: usize = parts[2]
            .parse()
            .map_err(|_| perr(idx + 1, format!("invalid T `{}`", parts[2])))?;
        let n: usize = parts[3]
            .parse()
            .map_err(|_| perr(idx + 1, format!("invalid n `{}`", parts[3])))?;

        let (idx, target_line) = lines
            .next()
            .ok_or_else(|| perr(idx + 2, "missing target line".into()))?;
        let fields: Vec<&str> = target_line.split_whitespace().collect();
        if fields.len() != horizon + 1 {
            return Err(perr(
                idx + 1,
                format!("expected {} targets, got {}", horizon + 1, fields.len()),
            ));
        }
        let targets = match kind {
            DesignKind::Bernoulli => Targets::Probabilities(
                fields
                    .iter()
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|_| perr(idx + 1, format!("invalid probability `{f}`")))
                    })
                    .collect::<Result<_>>()?,
            ),
            DesignKind::Complete => Targets::Counts(
                fields
                    .iter()
                    .map(|f| {
                        f.parse::<usize>()
                            .map_err(|_| perr(idx + 1, format!("invalid count `{f}`")))
                    })
                    .collect::<Result<_>>()?,
            ),
        };

        let mut stages = Vec::with_capacity(horizon + 1);
        for (idx, line) in lines {
            let line = line.trim();
            if line.len() != n {
                return Err(perr(
                    idx + 1,
                    format!("expected {n} bits, got {}", line.len()),
                ));
            }
            let row = line
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(perr(idx + 1, format!("invalid bit `{other}`"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            stages.push(row);
        }
        if stages.len() != horizon + 1 {
            return Err(perr(
                text.lines().count(),
                format!("expected {} stage rows, got {}", horizon + 1, stages.len()),
            ));
        }
        TreatmentSchedule::from_parts(targets, stages)
    }
}

fn min_gap(x: &[f64]) -> Option<f64> {
    x.windows(2)
        .map(|w| w[1] - w[0])
        .fold(None, |acc: Option<f64>, g| {
            Some(acc.map_or(g, |a| a.min(g)))
        })
}

fn validate_probabilities(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("probability vector is empty"));
    }
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
    }
    if p.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!(
            "probabilities {p:?} are not nondecreasing"
        )));
    }
    Ok(())
}

fn validate_counts(k: &[usize], n: usize) -> Result<()> {
    if k.is_empty() {
        return Err(Error::invalid("count vector is empty"));
    }
    if k.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!(
            "counts {k:?} are not nondecreasing"
        )));
    }
    if k[k.len() - 1] > n {
        return Err(Error::invalid(format!(
            "final count {} exceeds n = {n}",
            k[k.len() - 1]
        )));
    }
    Ok(())
}

/// Bernoulli staggered rollout: one `u_i ~ U(0, 1]` per individual and
/// `z^t_i = 1` iff `u_i <= p_t`.
pub fn brd_schedule(p: &[f64], n: usize, seed: u64) -> Result<TreatmentSchedule> {
    validate_probabilities(p)?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    // (0, 1] so that p_t = 0 never treats and p_t = 1 always does
    let u: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
    let stages: Vec<Vec<bool>> = p
        .iter()
        .map(|&pt| u.iter().map(|&ui| ui <= pt).collect())
        .collect();
    let realized = stages
        .iter()
        .map(|row: &Vec<bool>| row.iter().filter(|&&z| z).count())
        .collect();
    Ok(TreatmentSchedule {
        n,
        targets: Targets::Probabilities(p.to_vec()),
        stages,
        realized,
    })
}

/// Completely randomized staggered rollout: each stage treats a uniform
/// `(k_t - k_{t-1})`-subset of the still-untreated individuals.
pub fn crd_schedule(k: &[usize], n: usize, seed: u64) -> Result<TreatmentSchedule> {
    validate_counts(k, n)?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut treated = vec![false; n];
    let mut cursor = 0;
    let mut stages = Vec::with_capacity(k.len());
    for &kt in k {
        while cursor < kt {
            let pick = rng.random_range(cursor..n);
            pool.swap(cursor, pick);
            treated[pool[cursor]] = true;
            cursor += 1;
        }
        stages.push(treated.clone());
    }
    Ok(TreatmentSchedule {
        n,
        targets: Targets::Counts(k.to_vec()),
        stages,
        realized: k.to_vec(),
    })
}

/// `Π_{i<s} (k - i) / (n - i)` over reals; 1 for `s = 0`.
pub fn falling_ratio(k: f64, n: f64, s: usize) -> f64 {
    (0..s).map(|i| (k - i as f64) / (n - i as f64)).product()
}

/// Probability that `s` specific individuals are all treated under CRD(`k`) on `n`.
pub fn bracket(k: usize, n: usize, s: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("bracket needs n >= 1"));
    }
    if s > n {
        return Err(Error::invalid(format!("subset size {s} exceeds n = {n}")));
    }
    if k > n {
        return Err(Error::invalid(format!("count {k} exceeds n = {n}")));
    }
    if s > k {
        return Ok(0.0);
    }
    Ok(falling_ratio(k as f64, n as f64, s))
}

/// Uniform probability ladder `p_t = t p / T`.
pub fn brd_ladder(p: f64, rounds: usize) -> Vec<f64> {
    (0..=rounds)
        .map(|t| {
            if t == rounds {
                p
            } else {
                t as f64 * p / rounds as f64
            }
        })
        .collect()
}

/// Count ladder `k_t = round(t k / T)`, halves rounded up.
pub fn crd_ladder(k: usize, rounds: usize) -> Vec<usize> {
    (0..=rounds)
        .map(|t| (2 * t * k + rounds) / (2 * rounds))
        .collect()
}

/// Treated count for a budget fraction, halves rounded up.
pub fn budget_count(budget: f64, n: usize) -> usize {
    ((budget * n as f64) + 0.5).floor().min(n as f64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_monotone(s: &TreatmentSchedule) -> bool {
        s.stages()
            .windows(2)
            .all(|w| w[0].iter().zip(&w[1]).all(|(&a, &b)| !a || b))
    }

    #[test]
    fn brd_boundary_thresholds() {
        for seed in 0..20 {
            let s = brd_schedule(&[0.0, 0.5, 1.0], 30, seed).unwrap();
            assert!(s.stage(0).iter().all(|&z| !z));
            assert!(s.stage(2).iter().all(|&z| z));
            assert!(is_monotone(&s));
        }
    }

    #[test]
    fn brd_is_deterministic() {
        let a = brd_schedule(&[0.0, 0.2, 0.4], 100, 9).unwrap();
        let b = brd_schedule(&[0.0, 0.2, 0.4], 100, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn brd_rejects_bad_targets() {
        assert!(brd_schedule(&[0.0, 0.5, 0.4], 10, 0).is_err());
        assert!(brd_schedule(&[0.0, 1.5], 10, 0).is_err());
        assert!(brd_schedule(&[-0.1, 0.5], 10, 0).is_err());
        assert!(brd_schedule(&[], 10, 0).is_err());
    }

    #[test]
    fn crd_full_treatment() {
        let s = crd_schedule(&[0, 7], 7, 3).unwrap();
        assert!(s.stage(1).iter().all(|&z| z));
        assert!(s.stage(0).iter().all(|&z| !z));
    }

    #[test]
    fn crd_counts_are_exact() {
        for seed in 0..50 {
            let s = crd_schedule(&[0, 1, 3], 5, seed).unwrap();
            assert_eq!(s.realized_counts(), &[0, 1, 3]);
            assert!(is_monotone(&s));
        }
    }

    #[test]
    fn crd_rejects_bad_targets() {
        assert!(crd_schedule(&[0, 3, 2], 5, 0).is_err());
        assert!(crd_schedule(&[0, 6], 5, 0).is_err());
    }

    #[test]
    fn bracket_values() {
        assert!((bracket(2, 4, 2).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(bracket(3, 9, 0).unwrap(), 1.0);
        assert_eq!(bracket(0, 5, 1).unwrap(), 0.0);
        assert_eq!(bracket(2, 5, 3).unwrap(), 0.0);
        assert!(bracket(2, 3, 4).is_err());
    }

    #[test]
    fn ladders() {
        assert_eq!(brd_ladder(0.5, 2), vec![0.0, 0.25, 0.5]);
        assert_eq!(crd_ladder(5, 2), vec![0, 3, 5]);
        assert_eq!(crd_ladder(4, 3), vec![0, 1, 3, 4]);
        assert_eq!(crd_ladder(500, 1), vec![0, 500]);
        assert_eq!(budget_count(0.5, 1000), 500);
        assert_eq!(budget_count(0.25, 10), 3);
    }

    #[test]
    fn delta_matches_min_gap() {
        let s = brd_schedule(&[0.0, 0.1, 0.4], 5, 0).unwrap();
        assert!((s.delta().unwrap() - 0.1).abs() < 1e-15);
        let s = crd_schedule(&[0, 3, 4], 5, 0).unwrap();
        assert_eq!(s.delta(), Some(1.0));
        let s = crd_schedule(&[2], 5, 0).unwrap();
        assert_eq!(s.delta(), None);
    }

    #[test]
    fn equal_targets_are_allowed_in_schedules() {
        let s = brd_schedule(&[0.0, 0.3, 0.3], 10, 1).unwrap();
        assert_eq!(s.stage(1), s.stage(2));
    }

    #[test]
    fn text_round_trip_and_errors() {
        let s = crd_schedule(&[0, 2, 4], 6, 5).unwrap();
        assert_eq!(TreatmentSchedule::from_text(&s.to_text()).unwrap(), s);
        let s = brd_schedule(&[0.0, 0.35], 8, 5).unwrap();
        assert_eq!(TreatmentSchedule::from_text(&s.to_text()).unwrap(), s);
        assert!(TreatmentSchedule::from_text("design crd 1 3\n0 1\n000\n100\n").is_ok());
        // un-treatment
        assert!(TreatmentSchedule::from_text("design brd 1 3\n0 0.5\n010\n100\n").is_err());
        // count mismatch
        assert!(TreatmentSchedule::from_text("design crd 1 3\n0 2\n000\n100\n").is_err());
        assert!(TreatmentSchedule::from_text("design xyz 1 3\n0 2\n000\n100\n").is_err());
    }
}
