use proptest::prelude::*;

use tte_core::design::{
    brd_ladder, brd_schedule, crd_ladder, crd_schedule, Targets, TreatmentSchedule,
};
use tte_core::estimators::{
    dm, dm_threshold, fit_regression, lagrange_basis, lagrange_weights, regression_features,
    tte_pi, EstimatorTag,
};
use tte_core::graph::{generate_configuration_model, Graph};
use tte_core::harness::{
    aggregate, records_from_csv, records_to_csv, summary_to_csv, ExperimentRecord, RecordStatus,
    SweepParam,
};
use tte_core::outcomes::{
    expand_to_coefficients, sample_parametric_model, ObservationSet, OutcomeModel,
};

/// Strictly increasing grid in [0, 1] with gaps of at least `min_gap`.
fn grid(max_len: usize, min_gap: f64) -> impl Strategy<Value = Vec<f64>> {
    (2..=max_len)
        .prop_flat_map(|len| (Just(len), prop::collection::vec(0.0..1.0f64, len + 1)))
        .prop_map(move |(len, raw)| {
            // spacings from normalised positive weights, then squeeze into [0, 1]
            let weights: Vec<f64> = raw.iter().map(|w| w + 0.1).collect();
            let total: f64 = weights.iter().sum();
            let spare = 1.0 - min_gap * (len - 1) as f64;
            let mut x = Vec::with_capacity(len);
            let mut acc = weights[0] / total * spare;
            x.push(acc);
            for w in &weights[1..len] {
                acc += min_gap + w / total * spare;
                x.push(acc.min(1.0));
            }
            x
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_graphs_are_well_formed(n in 1usize..=500, seed in any::<u64>()) {
        let g = generate_configuration_model(n, 2.5, seed).unwrap();
        prop_assert_eq!(g.n(), n);
        let mut edges = 0;
        for i in 0..n {
            let nb = g.in_neighbors(i);
            prop_assert!(nb.binary_search(&i).is_ok());
            prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(nb.iter().all(|&j| j < n));
            edges += nb.len();
        }
        prop_assert_eq!(g.edge_count(), edges);
        let out_total: usize = (0..n).map(|j| g.out_degree(j)).sum();
        prop_assert_eq!(out_total, edges);
        prop_assert_eq!(g.max_in_degree(), (0..n).map(|i| g.in_neighbors(i).len()).max().unwrap());
        prop_assert_eq!(&generate_configuration_model(n, 2.5, seed).unwrap(), &g);
        prop_assert_eq!(&Graph::from_edge_list(&g.to_edge_list()).unwrap(), &g);
    }

    #[test]
    fn crd_rollouts_are_nested_with_exact_counts(
        n in 1usize..200, frac in 0.0..=1.0f64, rounds in 1usize..5, seed in any::<u64>()
    ) {
        let k = crd_ladder((frac * n as f64) as usize, rounds);
        let s = crd_schedule(&k, n, seed).unwrap();
        for (t, z) in s.stages().iter().enumerate() {
            prop_assert_eq!(z.iter().filter(|&&v| v).count(), k[t]);
            if t > 0 {
                prop_assert!(s.stage(t - 1).iter().zip(z).all(|(a, b)| !a || *b));
            }
        }
        prop_assert_eq!(&TreatmentSchedule::from_text(&s.to_text()).unwrap(), &s);
    }

    #[test]
    fn brd_rollouts_are_monotone(
        n in 1usize..200, p in 0.0..=1.0f64, rounds in 1usize..5, seed in any::<u64>()
    ) {
        let s = brd_schedule(&brd_ladder(p, rounds), n, seed).unwrap();
        for t in 1..=rounds {
            prop_assert!(s.stage(t - 1).iter().zip(s.stage(t)).all(|(a, b)| !a || *b));
        }
        let counts = s.realized_counts();
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(matches!(s.targets(), Targets::Probabilities(_)));
        if p == 0.0 {
            prop_assert_eq!(counts[rounds], 0);
        }
        if p == 1.0 {
            prop_assert_eq!(counts[rounds], n);
        }
    }

    #[test]
    fn lagrange_partition_of_unity(x in grid(7, 0.05), c in 0.0..=1.0f64) {
        let basis = lagrange_basis(&x, c).unwrap();
        prop_assert!((basis.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let w = lagrange_weights(&x).unwrap();
        prop_assert!(w.weights.iter().sum::<f64>().abs() < 1e-9);
        for degree in 1..x.len() as i32 {
            let moment: f64 = w.weights.iter().zip(&x).map(|(g, xt)| g * xt.powi(degree)).sum();
            prop_assert!((moment - 1.0).abs() < 1e-9, "degree {} moment {}", degree, moment);
        }
    }

    #[test]
    fn pi_estimate_is_shift_invariant_and_exact_on_polynomials(
        x in grid(5, 0.05),
        coeffs in prop::collection::vec(-3.0..3.0f64, 5),
        shift in -10.0..10.0f64,
    ) {
        let degree = x.len() - 1;
        let f = |v: f64| (0..=degree).map(|d| coeffs[d] * v.powi(d as i32)).sum::<f64>();
        let means: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let shifted: Vec<f64> = means.iter().map(|m| m + shift).collect();
        let a = tte_pi(&ObservationSet::from_means(&means).unwrap(), &x, EstimatorTag::PiBrdP).unwrap().value;
        let b = tte_pi(&ObservationSet::from_means(&shifted).unwrap(), &x, EstimatorTag::PiBrdP).unwrap().value;
        prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        prop_assert!((a - (f(1.0) - f(0.0))).abs() < 1e-8 * (1.0 + a.abs()));
    }

    #[test]
    fn regression_ignores_row_order(
        data in prop::collection::vec((any::<bool>(), 0.0..5.0f64, -5.0..5.0f64), 8..40),
        beta in 1usize..3,
        rotate in 0usize..40,
    ) {
        let rows: Vec<Vec<f64>> = data.iter().map(|(z, x, _)| regression_features(*z, *x, beta)).collect();
        let y: Vec<f64> = data.iter().map(|d| d.2).collect();
        let fit = fit_regression(&rows, &y, beta).unwrap();
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.rotate_left(rotate % rows.len());
        perm.reverse();
        let rows2: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let y2: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let fit2 = fit_regression(&rows2, &y2, beta).unwrap();
        for x in [0.0, 1.0, 3.0] {
            for z in [false, true] {
                let (a, b) = (fit.predict(z, x), fit2.predict(z, x));
                prop_assert!((a - b).abs() < 1e-7 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn zero_threshold_dm_equals_dm(n in 2usize..80, seed in any::<u64>(), frac in 0.1..0.9f64) {
        let g = generate_configuration_model(n, 2.5, seed).unwrap();
        let m = sample_parametric_model(&g, 1, 1.0, seed ^ 1).unwrap();
        let k = ((frac * n as f64) as usize).clamp(1, n - 1);
        let s = crd_schedule(&[0, k], n, seed ^ 2).unwrap();
        let y = m.evaluate(s.final_stage()).unwrap();
        let a = dm(s.final_stage(), &y).unwrap().value;
        let b = dm_threshold(s.final_stage(), &y, &g, 0.0).unwrap().value;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn expansion_agrees_with_parametric_outcomes(
        n in 1usize..9, beta in 1usize..4, r in 0.0..3.0f64, seed in any::<u64>(), mask in any::<u16>()
    ) {
        let g = generate_configuration_model(n, 2.5, seed).unwrap();
        let m = sample_parametric_model(&g, beta, r, seed ^ 7).unwrap();
        let c = expand_to_coefficients(&m).unwrap();
        let z: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let (a, b) = (m.evaluate(&z).unwrap(), c.evaluate(&z).unwrap());
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-9);
        }
        prop_assert!((m.true_tte() - c.tte_from_coefficients()).abs() < 1e-9);
    }

    #[test]
    fn summary_recomputes_from_csv(
        rows in prop::collection::vec((0usize..3, 0usize..3, prop::option::of(-5.0..5.0f64), 0.5..3.0f64), 1..60)
    ) {
        let tags = [EstimatorTag::Dm, EstimatorTag::PiCrdK, EstimatorTag::LsProp];
        let records: Vec<ExperimentRecord> = rows
            .iter()
            .map(|&(v, t, est, tte)| ExperimentRecord {
                design: tte_core::design::DesignKind::Complete,
                estimator: tags[t],
                n: 10,
                beta: 1,
                r: v as f64 * 0.5,
                budget: 0.5,
                graph_seed: 3,
                schedule_seed: 4,
                tte_true: tte,
                tte_est: est,
                status: if est.is_some() { RecordStatus::Ok } else { RecordStatus::Skipped },
            })
            .collect();
        let parsed = records_from_csv(&records_to_csv(&records)).unwrap();
        prop_assert_eq!(&parsed, &records);
        let a = summary_to_csv(&aggregate(&records, SweepParam::R).unwrap());
        let b = summary_to_csv(&aggregate(&parsed, SweepParam::R).unwrap());
        prop_assert_eq!(a, b);
        let total: usize = aggregate(&records, SweepParam::R).unwrap().iter().map(|s| s.n_ok + s.n_skipped).sum();
        prop_assert_eq!(total, records.len());
    }
}
