use super::*;
use crate::design::{bracket, brd_schedule, crd_schedule};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn brd_enumeration_size_and_mass() {
    let all = enumerate_brd(&[0.0, 0.3, 0.6], 4).unwrap();
    assert_eq!(all.len(), 3usize.pow(4));
    assert!(close(all.iter().map(|o| o.probability).sum(), 1.0, 1e-12));
    // with p_0 > 0 the below-p_0 bucket appears
    assert_eq!(enumerate_brd(&[0.1, 0.6], 3).unwrap().len(), 27);
    // p_T = 1 drops the never-treated bucket
    assert_eq!(enumerate_brd(&[0.0, 1.0], 3).unwrap().len(), 1);
}

#[test]
fn crd_enumeration_size_and_nesting() {
    let all = enumerate_crd(&[0, 2, 4], 5).unwrap();
    assert_eq!(all.len(), 10 * 3);
    assert!(close(all.iter().map(|o| o.probability).sum(), 1.0, 1e-12));
    for o in &all {
        assert_eq!(o.stage(1).iter().filter(|&&z| z).count(), 2);
        assert_eq!(o.stage(2).iter().filter(|&&z| z).count(), 4);
        assert!(o.stage(1).iter().zip(o.stage(2)).all(|(a, b)| !a || b));
    }
}

#[test]
fn capacity_guards() {
    let big = random_coefficient_model(9, 1, 1).unwrap();
    assert!(matches!(
        exact_moments_brd(&big, &[0.0, 0.5], WeightsMode::Targets),
        Err(Error::Capacity(_))
    ));
    let small = random_coefficient_model(4, 1, 1).unwrap();
    assert!(matches!(
        exact_moments_brd(&small, &[0.0, 0.1, 0.2, 0.3, 0.4], WeightsMode::Targets),
        Err(Error::Capacity(_))
    ));
    assert!(matches!(enumerate_crd(&[0, 2], 8), Err(Error::Capacity(_))));
    assert!(matches!(
        inverse_binomial_moment(10_001, 0.5, 1),
        Err(Error::Capacity(_))
    ));
}

fn subsets(n: usize) -> Vec<Vec<usize>> {
    (0usize..1 << n)
        .map(|m| (0..n).filter(|b| m >> b & 1 == 1).collect())
        .collect()
}

#[test]
fn cross_stage_brd_moments() {
    // u ≤ p_min(t,t') for shared members; separate thresholds otherwise
    let p = [0.2, 0.5, 0.7];
    let n = 4;
    let all = enumerate_brd(&p, n).unwrap();
    for a in subsets(n) {
        for b in subsets(n) {
            for t in 0..3 {
                for s in t..3 {
                    let exact: f64 = all
                        .iter()
                        .filter(|o| o.all_treated(&a, t) && o.all_treated(&b, s))
                        .map(|o| o.probability)
                        .sum();
                    let shared = a.iter().filter(|j| b.contains(j)).count() as i32;
                    let only_b = b.len() as i32 - shared;
                    let expected = p[t].powi(a.len() as i32) * p[s].powi(only_b);
                    assert!(close(exact, expected, 1e-12), "{a:?} {b:?} {t} {s}");
                }
            }
        }
    }
}

#[test]
fn cross_stage_crd_moments() {
    // S treated at t, then S' \ S among a uniform extension at t'
    let (k, n) = ([1, 2, 4], 5);
    let all = enumerate_crd(&k, n).unwrap();
    for a in subsets(n) {
        for b in subsets(n) {
            for t in 0..3 {
                for s in t..3 {
                    let exact: f64 = all
                        .iter()
                        .filter(|o| o.all_treated(&a, t) && o.all_treated(&b, s))
                        .map(|o| o.probability)
                        .sum();
                    let extra = b.iter().filter(|j| !a.contains(j)).count();
                    let expected = if a.len() > k[t] {
                        0.0
                    } else {
                        bracket(k[t], n, a.len()).unwrap()
                            * bracket(k[s] - a.len(), n - a.len(), extra).unwrap()
                    };
                    assert!(close(exact, expected, 1e-12), "{a:?} {b:?} {t} {s}");
                }
            }
        }
    }
}

#[test]
fn brd_examples_unbiased() {
    let linear = random_coefficient_model(3, 1, 10).unwrap();
    let r = exact_moments_brd(&linear, &[0.0, 0.5], WeightsMode::Targets).unwrap();
    assert!(close(r.expectation, linear.true_tte(), 1e-12));
    assert_eq!(r.enumeration_size, 8);

    let quad = random_coefficient_model(4, 2, 11).unwrap();
    let r = exact_moments_brd(&quad, &[0.0, 0.3, 0.6], WeightsMode::Targets).unwrap();
    assert!(close(r.expectation, quad.true_tte(), 1e-10));
    assert_eq!(r.instance.horizon, 2);
}

#[test]
fn realized_count_bias_example() {
    let model = random_coefficient_model(6, 1, 12).unwrap();
    let p = 0.4;
    let r = exact_moments_brd(&model, &[0.0, p], WeightsMode::Realized).unwrap();
    let tte = model.true_tte();
    assert!(close(r.expectation - tte, -(1.0 - p).powi(6) * tte, 1e-12));
}

#[test]
fn crd_examples() {
    for seed in 0..3 {
        let model = random_coefficient_model(5, 2, 20 + seed).unwrap();
        let full = exact_moments_crd(&model, &[0, 5]).unwrap();
        assert_eq!(full.enumeration_size, 1);
        assert!(close(full.expectation, model.true_tte(), 1e-12));
        assert_eq!(full.variance, 0.0);
        let nested = exact_moments_crd(&model, &[0, 2, 4]).unwrap();
        assert!(close(nested.expectation, model.true_tte(), 1e-10));
    }
    let linear = random_coefficient_model(4, 1, 30).unwrap();
    let r = exact_moments_crd(&linear, &[0, 2]).unwrap();
    assert_eq!(r.enumeration_size, 6);
    assert!(close(r.expectation, linear.true_tte(), 1e-12));
}

#[test]
fn variance_bound_examples() {
    let model = random_coefficient_model(4, 1, 40).unwrap();
    assert_eq!(
        linear_variance_bound(&model, LinearDesign::Bernoulli { p: 1.0 }, 0.0).unwrap(),
        0.0
    );
    assert_eq!(
        linear_variance_bound(&model, LinearDesign::Complete { k: 4 }, 0.0).unwrap(),
        0.0
    );
    let bound = linear_variance_bound(&model, LinearDesign::Bernoulli { p: 0.5 }, 0.0).unwrap();
    assert!(close(bound, model.l_max().powi(2) / 4.0, 1e-12));
    let r = exact_moments_brd(&model, &[0.0, 0.5], WeightsMode::Targets).unwrap();
    assert!(r.variance <= bound);
    // noise term: 2σ²/(np²) for BRD, 2σ²n/k² for CRD
    let with_noise =
        linear_variance_bound(&model, LinearDesign::Bernoulli { p: 0.5 }, 0.5).unwrap();
    assert!(close(with_noise - bound, 2.0 * 0.25 / (4.0 * 0.25), 1e-12));
    assert!(close(
        r.variance_with_noise(0.5) - r.variance,
        0.25 / 4.0 * 8.0,
        1e-12
    ));
    let crd = linear_variance_bound(&model, LinearDesign::Complete { k: 4 }, 0.5).unwrap();
    assert!(close(crd, 2.0 * 0.25 * 4.0 / 16.0, 1e-12));

    let quad = random_coefficient_model(4, 2, 41).unwrap();
    assert!(matches!(
        linear_variance_bound(&quad, LinearDesign::Bernoulli { p: 0.5 }, 0.0),
        Err(Error::InvalidParameter(_))
    ));
}

#[test]
fn exact_moments_match_monte_carlo() {
    const DRAWS: usize = 1_000_000;
    let model = random_coefficient_model(4, 1, 50).unwrap();
    let p = [0.0, 0.5];
    let gamma_p = lagrange_weights(&p).unwrap();
    let exact = exact_moments_brd(&model, &p, WeightsMode::Targets).unwrap();
    let k = [0usize, 2];
    let gamma_k = lagrange_weights(&[0.0, 0.5]).unwrap();
    let exact_crd = exact_moments_crd(&model, &k).unwrap();
    let (mut sum_brd, mut sum_crd) = (0.0, 0.0);
    for d in 0..DRAWS as u64 {
        let s = brd_schedule(&p, 4, d).unwrap();
        let means: Vec<f64> = s
            .stages()
            .iter()
            .map(|z| model.mean_outcome(z).unwrap())
            .collect();
        sum_brd += gamma_p.apply(&means);
        let s = crd_schedule(&k, 4, d).unwrap();
        let means: Vec<f64> = s
            .stages()
            .iter()
            .map(|z| model.mean_outcome(z).unwrap())
            .collect();
        sum_crd += gamma_k.apply(&means);
    }
    let se_brd = (exact.variance / DRAWS as f64).sqrt();
    let se_crd = (exact_crd.variance / DRAWS as f64).sqrt();
    assert!((sum_brd / DRAWS as f64 - exact.expectation).abs() <= 4.0 * se_brd);
    assert!((sum_crd / DRAWS as f64 - exact_crd.expectation).abs() <= 4.0 * se_crd);
}

#[test]
fn optimal_weight_examples() {
    let sol = optimal_weights(&[0.1, 0.2, 0.3], 1.0).unwrap();
    for (a, e) in sol.alphas.iter().zip([-5.0, 0.0, 5.0]) {
        assert!(close(*a, e, 1e-8), "{:?}", sol.alphas);
    }
    let sol = optimal_weights(&[0.0, 0.4], 3.0).unwrap();
    assert!(close(sol.alphas[0], -2.5, 1e-10) && close(sol.alphas[1], 2.5, 1e-10));
    assert!(close(sol.objective, 3.0 * 0.6 / 0.4, 1e-10));
}

fn constraint_residuals(sol: &WeightSolution, p: &[f64]) -> (f64, f64) {
    let sum: f64 = sol.alphas.iter().sum();
    let dot: f64 = sol.alphas.iter().zip(p).map(|(a, p)| a * p).sum();
    (sum.abs(), (dot - 1.0).abs())
}

/// Orthonormal basis of the directions preserving both constraints.
fn null_space(p: &[f64]) -> Vec<Vec<f64>> {
    let m = p.len();
    let mut candidates: Vec<Vec<f64>> = vec![vec![1.0; m], p.to_vec()];
    candidates.extend((0..m).map(|e| (0..m).map(|i| if i == e { 1.0 } else { 0.0 }).collect()));
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (idx, mut v) in candidates.into_iter().enumerate() {
        for b in &basis {
            let vb: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= vb * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 || idx < 2 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis.split_off(2)
}

#[test]
fn kkt_solution_beats_dense_grid_over_feasible_set() {
    let p = [0.05, 0.2, 0.45, 0.6, 0.9];
    let sol = optimal_weights(&p, 1.0).unwrap();
    let (r1, r2) = constraint_residuals(&sol, &p);
    assert!(r1 < 1e-10 && r2 < 1e-10);
    for a in &sol.alphas[1..4] {
        assert!(a.abs() < 1e-8);
    }
    assert!(close(sol.objective, (1.0 - 0.85) / 0.85, 1e-10));
    let dirs = null_space(&p);
    assert_eq!(dirs.len(), 3);
    let steps: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.2).collect();
    let mut best = f64::INFINITY;
    for &s0 in &steps {
        for &s1 in &steps {
            for &s2 in &steps {
                let alpha: Vec<f64> = (0..p.len())
                    .map(|t| sol.alphas[t] + s0 * dirs[0][t] + s1 * dirs[1][t] + s2 * dirs[2][t])
                    .collect();
                best = best.min(variance_factor(&alpha, &p));
            }
        }
    }
    assert!(best >= sol.objective - 1e-12);
    assert!(close(best, sol.objective, 1e-12));
}

#[test]
fn kkt_solution_beats_random_feasible_points() {
    let mut rng = rng_from_seed(60);
    for horizon in 1..=6 {
        let p = suite::random_grid(&mut rng, horizon + 1, 0.01);
        let sol = optimal_weights(&p, 2.0).unwrap();
        let (r1, r2) = constraint_residuals(&sol, &p);
        assert!(r1 < 1e-10 && r2 < 1e-10);
        let dirs = null_space(&p);
        for _ in 0..200 {
            let step: Vec<f64> = dirs.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let alpha: Vec<f64> = (0..p.len())
                .map(|t| sol.alphas[t] + dirs.iter().zip(&step).map(|(d, s)| s * d[t]).sum::<f64>())
                .collect();
            let v = 2.0 * variance_factor(&alpha, &p);
            assert!(v >= sol.objective - 1e-10, "{p:?} {alpha:?}");
        }
    }
}

#[test]
fn optimal_weights_rejects_bad_input() {
    assert!(optimal_weights(&[0.5], 1.0).is_err());
    assert!(optimal_weights(&[0.1, 0.1, 0.3], 1.0).is_err());
    assert!(optimal_weights(&[0.3, 0.1], 1.0).is_err());
    assert!(optimal_weights(&[0.1, 0.3], 0.0).is_err());
}

#[test]
fn bracket_ratio_examples() {
    assert_eq!(bracket_ratio_check(100, 0.5, 0, 3).unwrap(), 0.0);
    assert_eq!(bracket_ratio_check(100, 0.5, 4, 0).unwrap(), 0.0);
    let small = bracket_ratio_check(100, 0.5, 1, 2).unwrap();
    let large = bracket_ratio_check(1000, 0.5, 1, 2).unwrap();
    assert!(large < small);
    // direct: ((49)(48)/(99·98)) / ((50·49)/(100·99))
    let direct = (49.0 * 48.0 / (99.0 * 98.0)) / (50.0 * 49.0 / (100.0 * 99.0));
    assert!(close(small, (direct - 1.0f64).abs(), 1e-14));
    assert!(bracket_ratio_check(10, 0.3, 2, 1).is_err());
    assert!(bracket_ratio_check(10, 0.0, 0, 0).is_err());
}

#[test]
fn inverse_binomial_examples() {
    assert_eq!(inverse_binomial_moment(1, 1.0, 1).unwrap(), 1.0);
    assert!(close(
        inverse_binomial_moment(2, 0.5, 1).unwrap(),
        0.625,
        1e-15
    ));
    // n = 3, p = 0.5: pmf (1, 3, 3, 1)/8
    let direct = (3.0 + 3.0 / 4.0 + 1.0 / 9.0) / 8.0;
    assert!(close(
        inverse_binomial_moment(3, 0.5, 2).unwrap(),
        direct,
        1e-15
    ));
    for beta in [1, 2] {
        let ratio = inverse_binomial_moment(2000, 0.1, beta).unwrap() * 200f64.powi(beta as i32);
        assert!((1.0..=1.1).contains(&ratio), "{ratio}");
    }
    assert!(inverse_binomial_moment(10, 0.05, 1).is_err());
    assert!(inverse_binomial_moment(10, 0.5, 0).is_err());
}

#[test]
fn verification_suite_passes() {
    let checks = run_verification_suite();
    assert!(checks.len() >= 12);
    for c in &checks {
        assert!(c.passed, "{c}");
        assert!(c.to_string().starts_with("PASS "));
    }
}
