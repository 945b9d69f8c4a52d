//! Stability polynomial and stability-region geometry.
//!
//! Coefficients are computed in extended precision; region geometry is
//! evaluated in `f64`, which is ample for `|R(z)| ≤ 1` tests at the scales
//! involved.

use num_complex::Complex64;
use rug::Float;

use crate::numerics::{dot, DenseVector};
use crate::tableau::ButcherTableau;

/// `R(z) = Σ r_j z^j`.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityPolynomial {
    pub coefficients: DenseVector,
}

impl StabilityPolynomial {
    pub fn from_f64(coeffs: &[f64], prec: u32) -> Self {
        StabilityPolynomial {
            coefficients: coeffs.iter().map(|&c| Float::with_val(prec, c)).collect(),
        }
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    pub fn coefficients_f64(&self) -> Vec<f64> {
        self.coefficients.iter().map(Float::to_f64).collect()
    }

    /// Horner evaluation in double precision.
    pub fn eval(&self, z: Complex64) -> Complex64 {
        self.coefficients
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, c| acc * z + c.to_f64())
    }

    pub fn abs_at(&self, z: Complex64) -> f64 {
        self.eval(z).norm()
    }
}

/// `r₀ = 1`, `r_j = b·A^(j−1)𝟙`.
pub fn stability_polynomial(t: &ButcherTableau) -> StabilityPolynomial {
    let prec = t.precision_bits();
    let mut coefficients = vec![Float::with_val(prec, 1)];
    let mut v = vec![Float::with_val(prec, 1); t.stages()];
    for _ in 0..t.stages() {
        coefficients.push(dot(t.b(), &v));
        v = t.a().mul_vec(&v);
    }
    StabilityPolynomial { coefficients }
}

/// `|R(z)| ≤ 1`.
pub fn classify_point(poly: &StabilityPolynomial, z: Complex64) -> bool {
    poly.abs_at(z) <= 1.0
}

fn stable_at(poly: &StabilityPolynomial, x: f64, y: f64) -> bool {
    classify_point(poly, Complex64::new(x, y))
}

/// Bisects for the stability boundary between `stable_x` and `unstable_x`
/// on the line `Im z = y`.
fn bisect_boundary(poly: &StabilityPolynomial, y: f64, mut stable_x: f64, mut unstable_x: f64, iters: usize) -> f64 {
    for _ in 0..iters {
        let mid = 0.5 * (stable_x + unstable_x);
        if stable_at(poly, mid, y) {
            stable_x = mid;
        } else {
            unstable_x = mid;
        }
    }
    stable_x
}

/// Length of the stable part of the negative real axis that contains 0.
///
/// Marches left from the origin in steps of `0.01` and bisects the first
/// sign change until the bracket is narrower than `tol`.
pub fn real_stability_interval(poly: &StabilityPolynomial, tol: f64) -> f64 {
    let step = 1e-2;
    let limit = 2.0 * (poly.degree().max(1) as f64).powi(2) + 2.0;
    let mut x = 0.0;
    while x > -limit {
        let next = x - step;
        if !stable_at(poly, next, 0.0) {
            let mut stable_x = x;
            let mut unstable_x = next;
            while stable_x - unstable_x > tol {
                let mid = 0.5 * (stable_x + unstable_x);
                if stable_at(poly, mid, 0.0) {
                    stable_x = mid;
                } else {
                    unstable_x = mid;
                }
            }
            return -stable_x;
        }
        x = next;
    }
    limit
}

/// A stable interval `[left, right]` on one horizontal line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub y: f64,
    pub left: f64,
    pub right: f64,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.right - self.left
    }
}

/// Traces the region line by line upward from the real axis.
///
/// On each line the stable runs are located by marching over a fixed window
/// and refined by 60 bisection steps. The run kept is the one overlapping the
/// previous line's run most, which keeps the trace on the component of the
/// origin; tracing stops at the first line with no such run.
#[derive(Clone, Debug)]
pub struct BoundaryTrace {
    pub segments: Vec<Segment>,
}

const BISECTION_STEPS: usize = 60;

fn window(interval: f64) -> (f64, f64, usize) {
    let left = -(1.5 * interval.max(2.0) + 1.0);
    let right = 1.0;
    let samples = ((right - left) / 5e-3).ceil() as usize;
    (left, right, samples)
}

fn stable_runs(poly: &StabilityPolynomial, y: f64, lo: f64, hi: f64, samples: usize) -> Vec<(f64, f64)> {
    let dx = (hi - lo) / samples as f64;
    let mut runs = Vec::new();
    let mut start: Option<f64> = None;
    let mut prev_x = lo;
    let mut prev_stable = stable_at(poly, lo, y);
    if prev_stable {
        start = Some(lo);
    }
    for k in 1..=samples {
        let x = lo + k as f64 * dx;
        let st = stable_at(poly, x, y);
        if st && !prev_stable {
            start = Some(bisect_boundary(poly, y, x, prev_x, BISECTION_STEPS));
        } else if !st && prev_stable {
            let end = bisect_boundary(poly, y, prev_x, x, BISECTION_STEPS);
            runs.push((start.take().unwrap_or(lo), end));
        }
        prev_x = x;
        prev_stable = st;
    }
    if let Some(s0) = start {
        runs.push((s0, hi));
    }
    runs
}

/// Traces segments at `y_j = j·dy`, `j = 0..=m`.
pub fn trace_boundary(poly: &StabilityPolynomial, dy: f64, m: usize) -> BoundaryTrace {
    let interval = real_stability_interval(poly, 1e-12);
    let (lo, hi, samples) = window(interval);
    let mut segments = Vec::with_capacity(m + 1);
    let mut prev: Option<(f64, f64)> = None;
    for j in 0..=m {
        let y = j as f64 * dy;
        let runs = stable_runs(poly, y, lo, hi, samples);
        let chosen = match prev {
            None => runs.iter().copied().find(|&(a, b)| a <= 0.0 && b >= -1e-9),
            Some((pa, pb)) => runs
                .iter()
                .copied()
                .filter(|&(a, b)| b > pa && a < pb && a <= 0.0)
                .max_by(|x, y| overlap(*x, (pa, pb)).total_cmp(&overlap(*y, (pa, pb)))),
        };
        match chosen {
            Some((a, b)) if b > a => {
                segments.push(Segment { y, left: a, right: b });
                prev = Some((a, b));
            }
            _ => break,
        }
    }
    BoundaryTrace { segments }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// `Σ_k ω_k (L_{+y_k i} + L_{−y_k i})` with trapezoidal weights over
/// `y_k = k·y_max/M`, `k = 0..=M`; lines past the end of the trace count as 0.
pub fn area_proxy(poly: &StabilityPolynomial, y_max: f64, m: usize) -> f64 {
    assert!(m >= 2, "need at least two lines");
    let dy = y_max / m as f64;
    trapezoid_area(&trace_boundary(poly, dy, m), dy, m)
}

fn trapezoid_area(trace: &BoundaryTrace, dy: f64, m: usize) -> f64 {
    let mut total = 0.0;
    for (k, seg) in trace.segments.iter().enumerate() {
        let w = if k == 0 || k == m { 0.5 * dy } else { dy };
        // real coefficients: the line −y mirrors +y
        total += w * 2.0 * seg.length();
    }
    total
}

/// `Σ_{j=1}^{M−1} max(0, −(x_{j+1} − 2x_j + x_{j−1})/Δy²)` over given samples.
pub fn convexity_penalty_from_samples(xs: &[f64], dy: f64) -> f64 {
    xs.windows(3)
        .map(|w| (-(w[2] - 2.0 * w[1] + w[0]) / (dy * dy)).max(0.0))
        .sum()
}

/// Convexity penalty of the traced left boundary; the sum stops at the
/// last line the trace reached.
pub fn convexity_penalty(poly: &StabilityPolynomial, dy: f64, m: usize) -> f64 {
    let trace = trace_boundary(poly, dy, m);
    let xs: Vec<f64> = trace.segments.iter().map(|s| s.left).collect();
    convexity_penalty_from_samples(&xs, dy)
}

/// Interval, area proxy, penalty and the sampled boundary.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub real_interval_length: f64,
    pub area_proxy: f64,
    pub convexity_penalty: f64,
    /// `(y, leftmost x)` per traced line.
    pub boundary_samples: Vec<(f64, f64)>,
}

/// Proxy grid: `y_max = 1.2 ×` the real interval, `M = 64` lines.
pub fn stability_report(poly: &StabilityPolynomial, lines: usize) -> StabilityReport {
    let interval = real_stability_interval(poly, 1e-12);
    let y_max = 1.2 * interval.max(1e-3);
    let dy = y_max / lines as f64;
    let trace = trace_boundary(poly, dy, lines);
    let xs: Vec<f64> = trace.segments.iter().map(|s| s.left).collect();
    let area = trapezoid_area(&trace, dy, lines);
    StabilityReport {
        real_interval_length: interval,
        area_proxy: area,
        convexity_penalty: convexity_penalty_from_samples(&xs, dy),
        boundary_samples: trace.segments.iter().map(|s| (s.y, s.left)).collect(),
    }
}

pub const DEFAULT_PROXY_LINES: usize = 64;

/// CSV of `(re, im, stable)` over a rectangular grid.
pub fn region_csv(poly: &StabilityPolynomial, re: (f64, f64), im: (f64, f64), nx: usize, ny: usize) -> String {
    let mut out = String::from("re,im,stable\n");
    for iy in 0..ny {
        let y = lerp(im, iy, ny);
        for ix in 0..nx {
            let x = lerp(re, ix, nx);
            let st = classify_point(poly, Complex64::new(x, y)) as u8;
            out.push_str(&format!("{x},{y},{st}\n"));
        }
    }
    out
}

/// `k`-th of `n` equispaced points on `[a, b]`.
pub fn lerp(range: (f64, f64), k: usize, n: usize) -> f64 {
    if n <= 1 {
        return range.0;
    }
    range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64
}
