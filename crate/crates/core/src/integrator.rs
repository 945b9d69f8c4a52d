//! Fixed-step and adaptive integration with explicit tableaux, plus the
//! convergence, linear-stability, predictability and global-error studies.

use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rug::ops::Pow;
use rug::Float;
use thiserror::Error;

use crate::numerics::{pow2, DenseVector};
use crate::stability::{classify_point, stability_polynomial, StabilityPolynomial};
use crate::tableau::ButcherTableau;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("right-hand side returned a non-finite value at t = {t}")]
    NonFinite { t: f64 },
    #[error("tableau has no embedded weights")]
    MissingEmbedded,
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Right-hand side `f(t, y)`.
pub type Rhs = Arc<dyn Fn(&Float, &[Float]) -> DenseVector + Send + Sync>;

/// `y′ = f(t, y)` on `[t0, tf]` with `y(t0) = y0`.
#[derive(Clone)]
pub struct OdeProblem {
    pub name: String,
    pub rhs: Rhs,
    pub y0: DenseVector,
    pub t0: Float,
    pub tf: Float,
}

impl std::fmt::Debug for OdeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OdeProblem")
            .field("name", &self.name)
            .field("dimension", &self.y0.len())
            .finish()
    }
}

impl OdeProblem {
    pub fn dimension(&self) -> usize {
        self.y0.len()
    }

    /// `y′ = −y`, `y(0) = 1`.
    pub fn exp_decay(tf: f64, prec: u32) -> Self {
        OdeProblem {
            name: "exp".into(),
            rhs: Arc::new(|_t, y| y.iter().map(|v| Float::with_val(v.prec(), -v)).collect()),
            y0: vec![Float::with_val(prec, 1)],
            t0: Float::new(prec),
            tf: Float::with_val(prec, tf),
        }
    }

    /// `y′ = λy` for complex `λ`, written as a real 2-vector `(Re y, Im y)`.
    pub fn dahlquist(lambda: Complex64, tf: f64, prec: u32) -> Self {
        let (a, b) = (Float::with_val(prec, lambda.re), Float::with_val(prec, lambda.im));
        OdeProblem {
            name: "dahlquist".into(),
            rhs: Arc::new(move |_t, y| {
                let p = y[0].prec();
                let re = Float::with_val(p, &a * &y[0]) - Float::with_val(p, &b * &y[1]);
                let im = Float::with_val(p, &b * &y[0]) + Float::with_val(p, &a * &y[1]);
                vec![re, im]
            }),
            y0: vec![Float::with_val(prec, 1), Float::new(prec)],
            t0: Float::new(prec),
            tf: Float::with_val(prec, tf),
        }
    }

    /// Lorenz-63 with `σ = 10`, `ρ = 28`, `β = 8/3` from `(1, 1, 1)`.
    pub fn lorenz(tf: f64, prec: u32) -> Self {
        let beta = Float::with_val(prec, 8) / 3u32;
        OdeProblem {
            name: "lorenz".into(),
            rhs: Arc::new(move |_t, y| {
                let p = y[0].prec();
                let dx = Float::with_val(p, &y[1] - &y[0]) * 10u32;
                let dy = Float::with_val(p, &y[0] * Float::with_val(p, 28u32 - &y[2])) - &y[1];
                let dz = Float::with_val(p, &y[0] * &y[1]) - Float::with_val(p, &beta * &y[2]);
                vec![dx, dy, dz]
            }),
            y0: vec![Float::with_val(prec, 1); 3],
            t0: Float::new(prec),
            tf: Float::with_val(prec, tf),
        }
    }
}

/// Steps one tableau over one problem and counts right-hand-side calls.
pub struct Stepper<'a> {
    tableau: &'a ButcherTableau,
    problem: &'a OdeProblem,
    prec: u32,
    pub evaluations: usize,
    cached_h: Option<Float>,
    ha: Vec<Vec<(usize, Float)>>,
    hb: Vec<Float>,
    hc: Vec<Float>,
    hd: Vec<Float>,
}

impl<'a> Stepper<'a> {
    pub fn new(tableau: &'a ButcherTableau, problem: &'a OdeProblem) -> Self {
        Stepper {
            tableau,
            problem,
            prec: tableau.precision_bits(),
            evaluations: 0,
            cached_h: None,
            ha: Vec::new(),
            hb: Vec::new(),
            hc: Vec::new(),
            hd: Vec::new(),
        }
    }

    fn prepare(&mut self, h: &Float) {
        if self.cached_h.as_ref() == Some(h) {
            return;
        }
        let t = self.tableau;
        let s = t.stages();
        let prec = self.prec;
        self.ha = (0..s)
            .map(|i| {
                (0..i)
                    .filter(|&j| !t.a().get(i, j).is_zero())
                    .map(|j| (j, Float::with_val(prec, t.a().get(i, j) * h)))
                    .collect()
            })
            .collect();
        self.hb = t.b().iter().map(|b| Float::with_val(prec, b * h)).collect();
        self.hc = t.c().iter().map(|c| Float::with_val(prec, c * h)).collect();
        // h (b − b̃) = −h d₁
        self.hd = match t.b_embedded() {
            Some(e) => t
                .b()
                .iter()
                .zip(e)
                .map(|(b, be)| Float::with_val(prec, b - be) * h)
                .collect(),
            None => Vec::new(),
        };
        self.cached_h = Some(h.clone());
    }

    fn stages(&mut self, t: &Float, y: &[Float], h: &Float) -> Result<Vec<DenseVector>, IntegrationError> {
        self.prepare(h);
        let s = self.tableau.stages();
        let mut k: Vec<DenseVector> = Vec::with_capacity(s);
        for i in 0..s {
            let mut yi: DenseVector = y.iter().map(|v| Float::with_val(self.prec, v)).collect();
            for (j, haij) in &self.ha[i] {
                for (dst, kj) in yi.iter_mut().zip(&k[*j]) {
                    *dst += haij * kj;
                }
            }
            let ti = Float::with_val(self.prec, t + &self.hc[i]);
            let ki = (self.problem.rhs)(&ti, &yi);
            self.evaluations += 1;
            if ki.iter().any(|v| !v.is_finite()) {
                return Err(IntegrationError::NonFinite { t: t.to_f64() });
            }
            k.push(ki);
        }
        Ok(k)
    }

    /// One step with weights `b`.
    pub fn step_fixed(&mut self, t: &Float, y: &[Float], h: &Float) -> Result<DenseVector, IntegrationError> {
        let k = self.stages(t, y, h)?;
        Ok(self.combine(y, &k))
    }

    fn combine(&self, y: &[Float], k: &[DenseVector]) -> DenseVector {
        let mut out: DenseVector = y.iter().map(|v| Float::with_val(self.prec, v)).collect();
        for (hb, ki) in self.hb.iter().zip(k) {
            if hb.is_zero() {
                continue;
            }
            for (dst, v) in out.iter_mut().zip(ki) {
                *dst += hb * v;
            }
        }
        out
    }

    /// One step with weights `b` and the estimate `Δ = h Σ (bᵢ − b̃ᵢ) kᵢ`,
    /// sharing the stages.
    pub fn step_embedded(
        &mut self,
        t: &Float,
        y: &[Float],
        h: &Float,
    ) -> Result<(DenseVector, DenseVector), IntegrationError> {
        if self.tableau.b_embedded().is_none() {
            return Err(IntegrationError::MissingEmbedded);
        }
        let k = self.stages(t, y, h)?;
        let next = self.combine(y, &k);
        let mut delta = vec![Float::new(self.prec); y.len()];
        for (hd, ki) in self.hd.iter().zip(&k) {
            if hd.is_zero() {
                continue;
            }
            for (dst, v) in delta.iter_mut().zip(ki) {
                *dst += hd * v;
            }
        }
        Ok((next, delta))
    }
}

/// One fixed step of `t` for `problem`.
pub fn step_fixed(
    tableau: &ButcherTableau,
    problem: &OdeProblem,
    t: &Float,
    y: &[Float],
    h: &Float,
) -> Result<DenseVector, IntegrationError> {
    Stepper::new(tableau, problem).step_fixed(t, y, h)
}

/// One embedded step: `(y_next, Δ)`.
pub fn step_embedded(
    tableau: &ButcherTableau,
    problem: &OdeProblem,
    t: &Float,
    y: &[Float],
    h: &Float,
) -> Result<(DenseVector, DenseVector), IntegrationError> {
    Stepper::new(tableau, problem).step_embedded(t, y, h)
}

/// `n_steps` fixed steps of size `h` from `(t0, y0)`.
pub fn integrate_fixed(
    tableau: &ButcherTableau,
    problem: &OdeProblem,
    h: &Float,
    n_steps: usize,
) -> Result<(DenseVector, usize), IntegrationError> {
    let mut stepper = Stepper::new(tableau, problem);
    let prec = tableau.precision_bits();
    let mut y: DenseVector = problem.y0.iter().map(|v| Float::with_val(prec, v)).collect();
    let mut t = Float::with_val(prec, &problem.t0);
    for _ in 0..n_steps {
        y = stepper.step_fixed(&t, &y, h)?;
        t += h;
    }
    Ok((y, stepper.evaluations))
}

/// Step-size controller settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveConfig {
    pub atol: f64,
    pub rtol: f64,
    pub safety: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub h0: f64,
    pub max_steps: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            atol: 1e-10,
            rtol: 1e-10,
            safety: 0.9,
            alpha_min: 0.2,
            alpha_max: 5.0,
            h0: 1e-2,
            max_steps: 1_000_000,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<(), IntegrationError> {
        let ok = self.atol >= 0.0
            && self.rtol >= 0.0
            && self.atol + self.rtol > 0.0
            && self.safety > 0.0
            && self.safety < 1.0
            && self.alpha_min > 0.0
            && self.alpha_min < 1.0
            && self.alpha_max > 1.0
            && self.h0 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(IntegrationError::Config(format!("{self:?}")))
        }
    }
}

/// `h·min(α₊, max(α₋, η·err^(−1/(p−1))))`; `err = 0` gives `α₊`.
pub fn next_step_size(h: f64, err: f64, order: usize, cfg: &AdaptiveConfig) -> f64 {
    let factor = if err <= 0.0 {
        cfg.alpha_max
    } else {
        cfg.safety * err.powf(-1.0 / (order as f64 - 1.0))
    };
    h * cfg.alpha_max.min(cfg.alpha_min.max(factor))
}

/// Root-mean-square of `Δᵢ / (Atol + max(|yₙᵢ|, |yₙ₊₁ᵢ|)·Rtol)`.
pub fn scaled_error(delta: &[Float], y: &[Float], y_next: &[Float], cfg: &AdaptiveConfig) -> f64 {
    let sum: f64 = delta
        .iter()
        .zip(y.iter().zip(y_next))
        .map(|(d, (a, b))| {
            let sc = cfg.atol + a.to_f64().abs().max(b.to_f64().abs()) * cfg.rtol;
            (d.to_f64() / sc).powi(2)
        })
        .sum();
    (sum / delta.len().max(1) as f64).sqrt()
}

/// One attempted adaptive step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAttempt {
    pub t: f64,
    pub h: f64,
    pub err: f64,
    pub accepted: bool,
}

/// Output of the adaptive driver; `times`/`states` hold accepted steps only.
#[derive(Clone, Debug)]
pub struct IntegrationRun {
    pub times: Vec<Float>,
    pub states: Vec<DenseVector>,
    pub attempts: Vec<StepAttempt>,
    pub evaluations: usize,
}

impl IntegrationRun {
    pub fn accepted(&self) -> usize {
        self.attempts.iter().filter(|a| a.accepted).count()
    }

    pub fn rejected(&self) -> usize {
        self.attempts.len() - self.accepted()
    }

    pub fn final_state(&self) -> &[Float] {
        self.states.last().expect("initial state recorded")
    }

    /// CSV `t,y1,…,yd` of the accepted trajectory.
    pub fn trajectory_csv(&self) -> String {
        let d = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for k in 1..=d {
            let _ = write!(out, ",y{k}");
        }
        out.push('\n');
        for (t, y) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{}", crate::numerics::format_decimal(t));
            for v in y {
                let _ = write!(out, ",{}", crate::numerics::format_decimal(v));
            }
            out.push('\n');
        }
        out
    }
}

/// Adaptive integration with local extrapolation; the last step lands on `tf`.
pub fn integrate_adaptive(
    tableau: &ButcherTableau,
    problem: &OdeProblem,
    cfg: &AdaptiveConfig,
) -> Result<IntegrationRun, IntegrationError> {
    cfg.validate()?;
    let order = tableau
        .claimed_order()
        .ok_or_else(|| IntegrationError::Config("tableau order unknown".into()))?;
    let prec = tableau.precision_bits();
    let mut stepper = Stepper::new(tableau, problem);
    let tf = Float::with_val(prec, &problem.tf);
    let mut t = Float::with_val(prec, &problem.t0);
    let mut y: DenseVector = problem.y0.iter().map(|v| Float::with_val(prec, v)).collect();
    let span = Float::with_val(prec, &tf - &t).to_f64();
    let h_min = pow2(-((prec / 2) as i32), 64).to_f64() * span;
    let mut h = cfg.h0.min(span);
    let mut run = IntegrationRun {
        times: vec![t.clone()],
        states: vec![y.clone()],
        attempts: Vec::new(),
        evaluations: 0,
    };
    while t < tf {
        if run.attempts.len() >= cfg.max_steps {
            return Err(IntegrationError::StepUnderflow { t: t.to_f64(), h });
        }
        let remaining = Float::with_val(prec, &tf - &t);
        let last = remaining.to_f64() <= h;
        let hf = if last { remaining } else { Float::with_val(prec, h) };
        let (y_next, delta) = stepper.step_embedded(&t, &y, &hf)?;
        let err = scaled_error(&delta, &y, &y_next, cfg);
        let accepted = err <= 1.0;
        run.attempts.push(StepAttempt {
            t: t.to_f64(),
            h: hf.to_f64(),
            err,
            accepted,
        });
        let h_new = next_step_size(hf.to_f64(), err, order, cfg);
        if accepted {
            t = if last { tf.clone() } else { Float::with_val(prec, &t + &hf) };
            y = y_next;
            run.times.push(t.clone());
            run.states.push(y.clone());
        }
        h = h_new;
        if !accepted && h < h_min {
            return Err(IntegrationError::StepUnderflow { t: t.to_f64(), h });
        }
    }
    run.evaluations = stepper.evaluations;
    Ok(run)
}

/// One row of the convergence table.
#[derive(Clone, Debug)]
pub struct ConvergenceRow {
    pub h: Float,
    pub err: Float,
    /// `log₂(err(2h)/err(h))`, absent on the first row.
    pub p_obs: Option<f64>,
}

/// Global error at `t = 1` for `y′ = −y` over each step size in `h_list`.
pub fn convergence_study(tableau: &ButcherTableau, h_list: &[f64]) -> Result<Vec<ConvergenceRow>, IntegrationError> {
    let prec = tableau.precision_bits();
    let problem = OdeProblem::exp_decay(1.0, prec);
    let exact = Float::with_val(prec, -1).exp();
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let n = (1.0 / h).round() as usize;
        let hf = Float::with_val(prec, 1) / n as u32;
        let (y, _) = integrate_fixed(tableau, &problem, &hf, n)?;
        let err = Float::with_val(prec, &y[0] - &exact).abs();
        let p_obs = rows.last().map(|prev| {
            let ratio = Float::with_val(prec, &prev.err / &err);
            ratio.log2().to_f64()
        });
        rows.push(ConvergenceRow { h: hf, err, p_obs });
    }
    Ok(rows)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from("h,err,p_obs\n");
    for r in rows {
        let p = r.p_obs.map(|p| format!("{p:.4}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.h.to_f64(), crate::numerics::format_digits(&r.err, 6), p);
    }
    out
}

/// One grid point of the linear stability scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPoint {
    pub z: Complex64,
    pub theory: bool,
    pub observed: bool,
}

/// `n_steps` steps of `y′ = λy` with `hλ = z` from `y₀ = 1`, in complex
/// double precision through the stage equations.
pub fn linear_steps(tableau: &ButcherTableau, z: Complex64, n_steps: usize) -> Complex64 {
    let s = tableau.stages();
    let a: Vec<Vec<f64>> = (0..s)
        .map(|i| (0..i).map(|j| tableau.a().get(i, j).to_f64()).collect())
        .collect();
    let b: Vec<f64> = tableau.b().iter().map(Float::to_f64).collect();
    let mut y = Complex64::new(1.0, 0.0);
    let mut hk = vec![Complex64::new(0.0, 0.0); s];
    for _ in 0..n_steps {
        for i in 0..s {
            let mut yi = y;
            for (j, aij) in a[i].iter().enumerate() {
                yi += hk[j] * aij;
            }
            hk[i] = z * yi;
        }
        y += hk.iter().zip(&b).map(|(k, bi)| k * bi).sum::<Complex64>();
        if !y.is_finite() {
            return y;
        }
    }
    y
}

/// Classifies every `z` both by stepping and by `|R(z)| ≤ 1`.
pub fn stability_scan(tableau: &ButcherTableau, grid: &[Complex64], n_steps: usize) -> Vec<ScanPoint> {
    assert!(n_steps >= 1, "n_steps must be at least 1");
    let poly = stability_polynomial(tableau);
    grid.iter()
        .map(|&z| {
            let yn = linear_steps(tableau, z, n_steps);
            ScanPoint {
                z,
                theory: classify_point(&poly, z),
                observed: yn.is_finite() && yn.norm() <= 1.0,
            }
        })
        .collect()
}

/// `nx × ny` grid over `[re0, re1] × [im0, im1]`.
pub fn grid(re: (f64, f64), im: (f64, f64), nx: usize, ny: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push(Complex64::new(
                crate::stability::lerp(re, ix, nx),
                crate::stability::lerp(im, iy, ny),
            ));
        }
    }
    out
}

/// Whether the theoretical classification changes within `radius` of `z`.
pub fn in_boundary_band(poly: &StabilityPolynomial, z: Complex64, radius: f64) -> bool {
    let here = classify_point(poly, z);
    (0..16).any(|k| {
        let ang = std::f64::consts::PI * k as f64 / 8.0;
        let w = z + Complex64::from_polar(radius, ang);
        classify_point(poly, w) != here
    })
}

/// Agreement fraction over points outside the boundary band.
pub fn scan_agreement(tableau: &ButcherTableau, points: &[ScanPoint], band: f64) -> (f64, usize) {
    let poly = stability_polynomial(tableau);
    let kept: Vec<&ScanPoint> = points.iter().filter(|p| !in_boundary_band(&poly, p.z, band)).collect();
    let agree = kept.iter().filter(|p| p.theory == p.observed).count();
    (agree as f64 / kept.len().max(1) as f64, kept.len())
}

pub fn scan_csv(points: &[ScanPoint]) -> String {
    let mut out = String::from("re,im,theory,observed\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.z.re, p.z.im, p.theory as u8, p.observed as u8);
    }
    out
}

/// Predictability time and the discrepancy history.
#[derive(Clone, Debug)]
pub struct Predictability {
    pub time: f64,
    /// `(t_n, ‖u_h(t_n) − u_{h/2}(t_n)‖₂)` up to and including the crossing.
    pub history: Vec<(f64, f64)>,
}

/// First coarse-grid time where Lorenz solutions with steps `h` and `h/2`
/// differ by more than `tol` in the Euclidean norm; `t_end` if never.
pub fn predictability_time(
    tableau: &ButcherTableau,
    h: f64,
    tol: f64,
    t_end: f64,
) -> Result<Predictability, IntegrationError> {
    let prec = tableau.precision_bits();
    let problem = OdeProblem::lorenz(t_end, prec);
    let hc = Float::with_val(prec, h);
    let hf = Float::with_val(prec, &hc / 2u32);
    let mut coarse = Stepper::new(tableau, &problem);
    let mut fine = Stepper::new(tableau, &problem);
    let mut yc = problem.y0.clone();
    let mut yf = problem.y0.clone();
    let mut t = Float::new(prec);
    let steps = (t_end / h).round() as usize;
    let mut history = Vec::new();
    for n in 1..=steps {
        yc = coarse.step_fixed(&t, &yc, &hc)?;
        yf = fine.step_fixed(&t, &yf, &hf)?;
        let tm = Float::with_val(prec, &t + &hf);
        yf = fine.step_fixed(&tm, &yf, &hf)?;
        t = Float::with_val(prec, &hc * n as u32);
        let mut d2 = Float::new(prec);
        for (a, b) in yc.iter().zip(&yf) {
            let d = Float::with_val(prec, a - b);
            d2 += d.square();
        }
        let dist = d2.sqrt().to_f64();
        history.push((t.to_f64(), dist));
        if dist > tol {
            return Ok(Predictability {
                time: t.to_f64(),
                history,
            });
        }
    }
    Ok(Predictability { time: t_end, history })
}

/// One row of the global error table.
#[derive(Clone, Debug)]
pub struct GlobalErrorRow {
    pub h: f64,
    pub err: Float,
    pub err_over_hp: f64,
}

/// `‖y_h(t_f) − y_ref‖₂` and `err/h^p` on Lorenz for each step size.
pub fn global_error_study(
    tableau: &ButcherTableau,
    order: usize,
    t_f: f64,
    h_list: &[f64],
    reference: &[Float],
) -> Result<Vec<GlobalErrorRow>, IntegrationError> {
    let prec = tableau.precision_bits();
    let problem = OdeProblem::lorenz(t_f, prec);
    let mut rows = Vec::new();
    for &h in h_list {
        let n = (t_f / h).round() as usize;
        let hf = Float::with_val(prec, t_f) / n as u32;
        let (y, _) = integrate_fixed(tableau, &problem, &hf, n)?;
        let mut d2 = Float::new(prec);
        for (a, b) in y.iter().zip(reference) {
            d2 += Float::with_val(prec, a - b).square();
        }
        let err = d2.sqrt();
        let hp = Float::with_val(prec, &hf).pow(order as u32);
        let ratio = Float::with_val(prec, &err / &hp).to_f64();
        rows.push(GlobalErrorRow {
            h: hf.to_f64(),
            err,
            err_over_hp: ratio,
        });
    }
    Ok(rows)
}

pub fn global_error_csv(rows: &[GlobalErrorRow]) -> String {
    let mut out = String::from("h,err,err_over_hp\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6e}",
            r.h,
            crate::numerics::format_digits(&r.err, 6),
            r.err_over_hp
        );
    }
    out
}

/// Lorenz state at `t_f` from `2^log2_steps` fixed steps of `reference`.
pub fn lorenz_reference(reference: &ButcherTableau, t_f: f64, log2_steps: u32) -> Result<DenseVector, IntegrationError> {
    let prec = reference.precision_bits();
    let problem = OdeProblem::lorenz(t_f, prec);
    let n = 1usize << log2_steps;
    let h = Float::with_val(prec, t_f) / n as u32;
    Ok(integrate_fixed(reference, &problem, &h, n)?.0)
}
