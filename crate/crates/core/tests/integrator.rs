use std::sync::Arc;

use num_complex::Complex64;
use proptest::prelude::*;
use rug::ops::Pow;
use rug::Float;

use qd_erk::construct_default;
use qd_erk::fixtures::rk4;
use qd_erk::integrator::{
    convergence_csv, convergence_study, global_error_study, grid, integrate_adaptive, integrate_fixed,
    lorenz_reference, next_step_size, predictability_time, scaled_error, scan_agreement, stability_scan,
    step_embedded, step_fixed, Stepper,
};
use qd_erk::stability::stability_polynomial;
use qd_erk::{AdaptiveConfig, IntegrationError, OdeProblem};

const PREC: u32 = 256;

fn f(x: f64) -> Float {
    Float::with_val(PREC, x)
}

fn constant_rhs(value: f64) -> OdeProblem {
    OdeProblem {
        name: "const".into(),
        rhs: Arc::new(move |_t, y| vec![Float::with_val(y[0].prec(), value); y.len()]),
        y0: vec![f(0.5), f(-2.0)],
        t0: f(0.0),
        tf: f(1.0),
    }
}

#[test]
fn zero_rhs_leaves_state_unchanged() {
    let t = construct_default(6, PREC).unwrap();
    let p = constant_rhs(0.0);
    let y = step_fixed(&t, &p, &f(0.0), &p.y0, &f(0.3)).unwrap();
    assert_eq!(y, p.y0);
}

#[test]
fn unit_rhs_advances_by_h() {
    for t in [rk4(PREC), construct_default(8, PREC).unwrap()] {
        let p = constant_rhs(1.0);
        let h = f(0.125);
        let y = step_fixed(&t, &p, &f(0.0), &p.y0, &h).unwrap();
        for (a, b) in y.iter().zip(&p.y0) {
            assert!((Float::with_val(PREC, a - b) - &h).abs().to_f64() < 1e-70);
        }
    }
}

#[test]
fn rk4_decay_step_is_taylor_polynomial() {
    let p = OdeProblem::exp_decay(1.0, PREC);
    let h = f(0.1);
    let y = step_fixed(&rk4(PREC), &p, &f(0.0), &p.y0, &h).unwrap();
    let pw = |k: i32| Float::with_val(PREC, (&h).pow(k));
    let want = f(1.0) - pw(1) + pw(2) / 2u32 - pw(3) / 6u32 + pw(4) / 24u32;
    assert!(Float::with_val(PREC, &y[0] - want).abs().to_f64() < 1e-70);
}

#[test]
fn evaluations_are_steps_times_stages() {
    for p in [4, 8] {
        let t = construct_default(p, 128).unwrap();
        let problem = OdeProblem::lorenz(0.1, 128);
        let (_, evals) = integrate_fixed(&t, &problem, &Float::with_val(128, 0.01), 10).unwrap();
        assert_eq!(evals, 10 * t.stages());
        let mut st = Stepper::new(&t, &problem);
        st.step_embedded(&Float::new(128), &problem.y0, &Float::with_val(128, 0.01)).unwrap();
        assert_eq!(st.evaluations, t.stages());
    }
}

#[test]
fn identical_weights_give_zero_estimate() {
    let base = rk4(PREC);
    let b = base.b().to_vec();
    let t = base.with_embedded(b).unwrap();
    let p = OdeProblem::exp_decay(1.0, PREC);
    let (_, delta) = step_embedded(&t, &p, &f(0.0), &p.y0, &f(0.1)).unwrap();
    assert!(delta.iter().all(Float::is_zero));
}

#[test]
fn missing_embedded_weights_rejected() {
    let p = OdeProblem::exp_decay(1.0, PREC);
    assert!(matches!(
        step_embedded(&rk4(PREC), &p, &f(0.0), &p.y0, &f(0.1)),
        Err(IntegrationError::MissingEmbedded)
    ));
}

#[test]
fn non_finite_rhs_aborts() {
    let p = OdeProblem {
        name: "blowup".into(),
        rhs: Arc::new(|_t, y| vec![Float::with_val(y[0].prec(), 1) / Float::new(y[0].prec())]),
        y0: vec![f(1.0)],
        t0: f(0.0),
        tf: f(1.0),
    };
    assert!(matches!(
        step_fixed(&rk4(PREC), &p, &f(0.0), &p.y0, &f(0.1)),
        Err(IntegrationError::NonFinite { .. })
    ));
}

#[test]
fn estimate_scales_with_order_minus_one() {
    for p in [6usize, 8] {
        let t = construct_default(p, PREC).unwrap();
        let problem = OdeProblem::exp_decay(1.0, PREC);
        let size = |h: f64| {
            let (_, d) = step_embedded(&t, &problem, &f(0.0), &problem.y0, &f(h)).unwrap();
            d[0].clone().abs().to_f64()
        };
        let observed = (size(1.0 / 32.0) / size(1.0 / 64.0)).log2();
        assert!((observed - (p - 1) as f64).abs() < 0.3, "p={p}: {observed}");
    }
}

#[test]
fn controller_formula() {
    let cfg = AdaptiveConfig::default();
    assert!((next_step_size(0.2, 1.0, 8, &cfg) - cfg.safety * 0.2).abs() < 1e-15);
    assert_eq!(next_step_size(0.2, 0.0, 8, &cfg), cfg.alpha_max * 0.2);
    assert_eq!(next_step_size(0.2, 1e30, 8, &cfg), cfg.alpha_min * 0.2);
    let h = next_step_size(0.2, 0.5, 6, &cfg);
    assert!((h - 0.2 * cfg.safety * 2f64.powf(1.0 / 5.0)).abs() < 1e-15);
}

#[test]
fn scaled_error_is_rms_of_ratios() {
    let cfg = AdaptiveConfig {
        atol: 1.0,
        rtol: 1.0,
        ..AdaptiveConfig::default()
    };
    // sc = 1 + max(|y|, |y_next|) = (2, 4)
    let e = scaled_error(&[f(2.0), f(2.0)], &[f(1.0), f(-3.0)], &[f(0.5), f(1.0)], &cfg);
    assert!((e - ((1.0 + 0.25) / 2.0f64).sqrt()).abs() < 1e-15);
}

#[test]
fn config_validation() {
    let good = AdaptiveConfig::default();
    assert!(good.validate().is_ok());
    for bad in [
        AdaptiveConfig { safety: 1.5, ..good.clone() },
        AdaptiveConfig { alpha_min: 1.2, ..good.clone() },
        AdaptiveConfig { alpha_max: 0.9, ..good.clone() },
        AdaptiveConfig { atol: -1.0, ..good.clone() },
        AdaptiveConfig { h0: 0.0, ..good.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(IntegrationError::Config(_))), "{bad:?}");
    }
}

#[test]
fn adaptive_decay_has_no_rejections() {
    let t = construct_default(6, 128).unwrap();
    let problem = OdeProblem::exp_decay(5.0, 128);
    let cfg = AdaptiveConfig {
        atol: 1e-6,
        rtol: 1e-6,
        h0: 1e-3,
        ..AdaptiveConfig::default()
    };
    let run = integrate_adaptive(&t, &problem, &cfg).unwrap();
    assert_eq!(run.rejected(), 0);
    assert_eq!(run.times.last().unwrap(), &problem.tf);
    assert_eq!(run.states.len(), run.accepted() + 1);
    for w in run.attempts.windows(2) {
        assert!(w[1].h <= cfg.alpha_max * w[0].h * (1.0 + 1e-12));
    }
    for w in run.times.windows(2) {
        assert!(w[0] < w[1]);
    }
    assert!(run.attempts.iter().all(|a| a.err <= 1.0));
    let exact = (-5.0f64).exp();
    assert!((run.final_state()[0].to_f64() - exact).abs() < 1e-5);
}

#[test]
fn adaptive_lorenz_matches_fixed_step_reference() {
    let t = construct_default(8, 128).unwrap();
    let problem = OdeProblem::lorenz(1.0, 128);
    let cfg = AdaptiveConfig::default();
    let run = integrate_adaptive(&t, &problem, &cfg).unwrap();
    assert_eq!(run.states.len(), run.accepted() + 1);
    assert_eq!(run.evaluations, run.attempts.len() * t.stages());
    let reference = lorenz_reference(&construct_default(10, 128).unwrap(), 1.0, 12).unwrap();
    let dist = run
        .final_state()
        .iter()
        .zip(&reference)
        .map(|(a, b)| Float::with_val(128, a - b).to_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(dist < 1e-7, "{dist:e}");
}

#[test]
fn adaptive_rejects_after_oversized_first_step() {
    let t = construct_default(6, 128).unwrap();
    let problem = OdeProblem::lorenz(0.5, 128);
    let cfg = AdaptiveConfig {
        h0: 0.4,
        ..AdaptiveConfig::default()
    };
    let run = integrate_adaptive(&t, &problem, &cfg).unwrap();
    assert!(run.rejected() >= 1);
    assert!(!run.attempts[0].accepted);
    // rejected attempts never contribute a state
    assert_eq!(run.states.len(), run.accepted() + 1);
}

#[test]
fn adaptive_requires_claimed_order() {
    let t = rk4(PREC);
    let b = t.b().to_vec();
    let t = t.with_embedded(b).unwrap().with_claimed_order(None);
    let problem = OdeProblem::exp_decay(1.0, PREC);
    assert!(matches!(
        integrate_adaptive(&t, &problem, &AdaptiveConfig::default()),
        Err(IntegrationError::Config(_))
    ));
}

#[test]
fn convergence_table_order_four_head() {
    let t = construct_default(4, PREC).unwrap();
    let rows = convergence_study(&t, &[1.0, 0.5, 0.25]).unwrap();
    let e0 = rows[0].err.to_f64();
    let e1 = rows[1].err.to_f64();
    assert!((e0 / 7.121e-3 - 1.0).abs() < 1e-3);
    assert!((e1 / 2.914e-4 - 1.0).abs() < 1e-3);
    assert!((rows[1].p_obs.unwrap() - 4.61).abs() < 0.01);
    assert!(rows[0].p_obs.is_none());
    let csv = convergence_csv(&rows);
    assert!(csv.starts_with("h,err,p_obs\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn convergence_slopes_match_order() {
    for p in [4usize, 6, 8, 10] {
        let t = construct_default(p, PREC).unwrap();
        let hs = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let rows = convergence_study(&t, &hs).unwrap();
        let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.err.to_f64().ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope - p as f64).abs() < 0.25, "p={p}: {slope}");
    }
}

#[test]
fn scan_basics() {
    let t = rk4(PREC);
    let pts = stability_scan(&t, &[Complex64::new(0.0, 0.0), Complex64::new(0.05, 0.0), Complex64::new(-1.0, 0.5)], 50);
    assert!(pts[0].observed && pts[0].theory);
    assert!(!pts[1].observed && !pts[1].theory);
    assert!(pts[2].observed && pts[2].theory);
    let g = grid((-6.0, 1.0), (-4.0, 4.0), 41, 41);
    assert_eq!(g.len(), 41 * 41);
    let (frac, kept) = scan_agreement(&t, &stability_scan(&t, &g, 200), 1e-2);
    assert!(kept > 1500);
    assert!(frac >= 0.99, "{frac}");
}

#[test]
fn predictability_without_tolerance_runs_to_end() {
    let t = rk4(64);
    let pr = predictability_time(&t, 1.0 / 64.0, f64::INFINITY, 1.0).unwrap();
    assert_eq!(pr.time, 1.0);
    assert_eq!(pr.history.len(), 64);
}

#[test]
fn global_error_ratio_near_two_to_the_p() {
    let t = construct_default(8, 128).unwrap();
    let reference = lorenz_reference(&construct_default(10, 128).unwrap(), 0.0625, 10).unwrap();
    let rows = global_error_study(&t, 8, 0.0625, &[1.0 / 64.0, 1.0 / 128.0], &reference).unwrap();
    let ratio = rows[0].err.to_f64() / rows[1].err.to_f64();
    assert!((ratio.log2() - 8.0).abs() < 0.3, "{ratio}");
    let hp = rows[1].h.powi(8);
    assert!((rows[1].err_over_hp - rows[1].err.to_f64() / hp).abs() / rows[1].err_over_hp < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn step_equals_stability_function(re in -3.0f64..0.5, im in -3.0f64..3.0) {
        let t = construct_default(6, PREC).unwrap();
        let lambda = Complex64::new(re, im);
        let problem = OdeProblem::dahlquist(lambda, 1.0, PREC);
        let h = 0.5;
        let y = step_fixed(&t, &problem, &f(0.0), &problem.y0, &f(h)).unwrap();
        let r = stability_polynomial(&t).eval(lambda * h);
        prop_assert!((y[0].to_f64() - r.re).abs() < 1e-12 * r.norm().max(1.0));
        prop_assert!((y[1].to_f64() - r.im).abs() < 1e-12 * r.norm().max(1.0));
    }
}
