use rug::Float;

use qd_erk::constructor::{construct, default_free_parameters, plan_layout};
use qd_erk::fixtures::{reference_order8, reference_order8_tuned};
use qd_erk::optimizer::{
    cma_es_minimize, decode, encode, extract_free_parameters, optimize_method, parameter_slots, CmaConfig,
    FitnessEvaluator, OptimizerError, ParameterSlot, INFEASIBLE_PENALTY,
};
use qd_erk::trees::{default_tolerance, principal_error_norm, verify_order};
use qd_erk::{FitnessConfig, OptimizeConfig};

const PREC: u32 = 128;

fn max_table_diff(x: &qd_erk::ButcherTableau, y: &qd_erk::ButcherTableau) -> f64 {
    let s = x.stages();
    let mut worst = 0.0f64;
    for i in 0..s {
        for j in 0..s {
            worst = worst.max(Float::with_val(PREC, x.a().get(i, j) - y.a().get(i, j)).abs().to_f64());
        }
        worst = worst.max(Float::with_val(PREC, &x.b()[i] - &y.b()[i]).abs().to_f64());
        worst = worst.max(Float::with_val(PREC, &x.c()[i] - &y.c()[i]).abs().to_f64());
    }
    worst
}

#[test]
fn degrees_of_freedom_counts() {
    for (p, dof) in [(6usize, 6usize), (8, 17), (10, 36)] {
        let layout = plan_layout(p).unwrap();
        let v = encode(&layout, &default_free_parameters(&layout, PREC));
        assert_eq!(v.values.len(), dof, "p={p}");
        assert_eq!(v.layout_map.len(), dof);
        assert_eq!(layout.degrees_of_freedom(), dof);
    }
}

#[test]
fn slot_order_is_nodes_weights_q_then_d() {
    let slots = parameter_slots(&plan_layout(8).unwrap());
    let rank = |s: &ParameterSlot| match s {
        ParameterSlot::Node(_) => 0,
        ParameterSlot::Weight { .. } => 1,
        ParameterSlot::FreeQ(..) => 2,
        ParameterSlot::FreeD(..) => 3,
    };
    assert!(slots.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])));
    // ghosts are never encoded
    assert!(slots.iter().all(|s| !matches!(s, ParameterSlot::Weight { member: 0, .. })));
}

#[test]
fn encode_decode_round_trip() {
    for p in [6usize, 8, 10] {
        let layout = plan_layout(p).unwrap();
        let fp = default_free_parameters(&layout, PREC);
        let v = encode(&layout, &fp);
        let back = decode(&layout, &v.values, PREC).unwrap();
        assert_eq!(encode(&layout, &back), v);
        // ghost weights recover the cluster weight to f64 rounding
        for (a, b) in fp.cluster_splits.iter().zip(&back.cluster_splits) {
            assert!(Float::with_val(PREC, &a[0] - &b[0]).abs().to_f64() < 1e-15);
        }
    }
}

#[test]
fn decode_rejects_wrong_length() {
    let layout = plan_layout(8).unwrap();
    assert!(matches!(
        decode(&layout, &[0.0; 5], PREC),
        Err(OptimizerError::Length { expected: 17, got: 5 })
    ));
}

#[test]
fn extracted_parameters_rebuild_tuned_table() {
    let tuned = reference_order8_tuned(PREC);
    let layout = plan_layout(8).unwrap();
    let rebuilt = construct(8, &extract_free_parameters(&layout, &tuned), PREC).unwrap();
    assert!(max_table_diff(&tuned, &rebuilt) < 1e-29);
}

#[test]
fn tuned_table_has_lower_fitness_than_baseline() {
    let eval = FitnessEvaluator::new(8, FitnessConfig::default()).unwrap();
    let base = eval.of_tableau(&reference_order8(PREC));
    let tuned = eval.of_tableau(&reference_order8_tuned(PREC));
    assert!(tuned.total < base.total, "{} vs {}", tuned.total, base.total);
    assert!(tuned.error_norm < base.error_norm);
    // evaluating through the parameter vector agrees with the tableau path
    let layout = eval.layout().clone();
    let x = encode(&layout, &extract_free_parameters(&layout, &reference_order8_tuned(PREC))).values;
    assert!((eval.evaluate(&x) - tuned.total).abs() < 1e-6 * tuned.total.abs());
}

#[test]
fn duplicated_group_nodes_are_penalized() {
    let eval = FitnessEvaluator::new(8, FitnessConfig::default()).unwrap();
    let layout = eval.layout().clone();
    let grp = layout.q_groups.iter().find(|g| g.len() >= 2).unwrap();
    let mut x = encode(&layout, &default_free_parameters(&layout, PREC)).values;
    x[grp[1] - 2] = x[grp[0] - 2];
    let f = eval.evaluate(&x);
    assert!(f.is_finite() && f >= INFEASIBLE_PENALTY);
    // a zero node is infeasible too
    let mut y = encode(&layout, &default_free_parameters(&layout, PREC)).values;
    y[0] = 0.0;
    assert!(eval.evaluate(&y) >= INFEASIBLE_PENALTY);
    assert!(eval.evaluate(&[0.0; 3]) >= INFEASIBLE_PENALTY);
}

#[test]
fn error_only_fitness_orders_by_error_norm() {
    let cfg = FitnessConfig {
        w_stab: 0.0,
        ..FitnessConfig::default()
    };
    let eval = FitnessEvaluator::new(6, cfg).unwrap();
    let layout = eval.layout().clone();
    let x0 = encode(&layout, &default_free_parameters(&layout, PREC)).values;
    let mut rows = Vec::new();
    for k in 0..6 {
        let x: Vec<f64> = x0.iter().enumerate().map(|(i, v)| v + 0.01 * ((i + k) % 3) as f64 * k as f64).collect();
        let t = construct(6, &decode(&layout, &x, PREC).unwrap(), PREC).unwrap();
        rows.push((eval.evaluate(&x), principal_error_norm(&t, 6).to_f64()));
    }
    for a in &rows {
        for b in &rows {
            if a.1 < b.1 {
                assert!(a.0 <= b.0, "{a:?} {b:?}");
            }
        }
    }
}

#[test]
fn fitness_config_validation() {
    let bad = [
        FitnessConfig {
            w_err: 0.0,
            w_stab: 0.0,
            ..FitnessConfig::default()
        },
        FitnessConfig {
            w_area: -1.0,
            ..FitnessConfig::default()
        },
        FitnessConfig {
            proxy_lines: 1,
            ..FitnessConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(OptimizerError::Config(_))));
    }
    assert!(FitnessConfig::default().validate().is_ok());
}

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn cma_minimizes_sphere() {
    let cfg = CmaConfig {
        sigma0: 0.5,
        generations: 200,
        lambda: None,
        seed: 3,
    };
    let r = cma_es_minimize(sphere, &[1.0; 10], &cfg).unwrap();
    assert!(r.best_fitness < 1e-8, "{}", r.best_fitness);
    assert_eq!(r.history.len(), 200);
    assert!(r.history.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
    let c = &r.state.covariance;
    assert!((c - c.transpose()).amax() < 1e-12);
    assert!(c.clone().symmetric_eigen().eigenvalues.min() > 0.0);
}

#[test]
fn cma_is_deterministic_per_seed() {
    let cfg = CmaConfig {
        sigma0: 0.3,
        generations: 30,
        lambda: Some(8),
        seed: 11,
    };
    let a = cma_es_minimize(sphere, &[0.5; 4], &cfg).unwrap();
    let b = cma_es_minimize(sphere, &[0.5; 4], &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best_params, b.best_params);
    let c = cma_es_minimize(sphere, &[0.5; 4], &CmaConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn cma_rejects_degenerate_configs() {
    let base = CmaConfig {
        sigma0: 0.1,
        generations: 1,
        lambda: Some(1),
        seed: 0,
    };
    assert!(matches!(cma_es_minimize(sphere, &[1.0], &base), Err(OptimizerError::Config(_))));
    let zero_budget = CmaConfig {
        generations: 0,
        lambda: None,
        ..base.clone()
    };
    assert!(cma_es_minimize(sphere, &[1.0], &zero_budget).is_err());
    let bad_sigma = CmaConfig {
        sigma0: 0.0,
        lambda: None,
        ..base
    };
    assert!(cma_es_minimize(sphere, &[1.0], &bad_sigma).is_err());
}

#[test]
fn optimize_guards_order() {
    for p in [4usize, 7] {
        assert!(matches!(
            optimize_method(p, &OptimizeConfig::default(), 1, 0),
            Err(OptimizerError::Config(_))
        ));
    }
}

#[test]
fn short_run_keeps_order_and_is_deterministic() {
    let cfg = OptimizeConfig::default();
    let (t, rep) = optimize_method(6, &cfg, 4, 5).unwrap();
    let (_, again) = optimize_method(6, &cfg, 4, 5).unwrap();
    assert_eq!(rep.parameters, again.parameters);
    assert_eq!(rep.history, again.history);
    assert!(rep.best_fitness <= rep.baseline_fitness);
    assert!(rep.history.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
    let prec = t.precision_bits();
    assert!(prec >= 256);
    assert!(verify_order(&t, 6, t.b(), &default_tolerance(prec)).order_verified >= 6);
    let json = serde_json::to_string(&rep).unwrap();
    assert!(json.contains("\"baseline_fitness\""));
}
