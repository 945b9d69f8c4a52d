//! Extended-precision vectors and matrices, dense block solves and
//! Gauss–Lobatto rules on `[0, 1]`.
//!
//! Scalars are [`rug::Float`] values. Every function takes an explicit
//! working precision in bits and returns values rounded to it.

use rug::float::Constant;
use rug::ops::Pow;
use rug::Float;
use thiserror::Error;

/// Arbitrary-precision binary floating-point scalar.
pub type ExtReal = Float;

/// Dense vector of extended-precision scalars.
pub type DenseVector = Vec<Float>;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is singular: pivot {pivot} in column {column} below tolerance")]
    Singular { column: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Lobatto rule needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("Newton iteration for Lobatto node {index} did not converge")]
    NoConvergence { index: usize },
    #[error("cannot parse decimal '{0}'")]
    Parse(String),
}

/// Dense row-major matrix of extended-precision scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Float>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize, prec: u32) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![Float::new(prec); rows * cols],
        }
    }

    pub fn identity(n: usize, prec: u32) -> Self {
        let mut m = Self::zeros(n, n, prec);
        for i in 0..n {
            m.set(i, i, Float::with_val(prec, 1));
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: Vec<Vec<Float>>) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::Dimension("ragged rows".into()));
        }
        Ok(DenseMatrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Float {
        &self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut Float {
        &mut self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Float) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[Float] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<Float>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Maximum absolute entry.
    pub fn max_abs(&self) -> Float {
        let prec = self.data.first().map_or(64, Float::prec);
        let mut m = Float::new(prec);
        for x in &self.data {
            let a = Float::with_val(prec, x.abs_ref());
            if a > m {
                m = a;
            }
        }
        m
    }

    /// `A v`.
    pub fn mul_vec(&self, v: &[Float]) -> DenseVector {
        assert_eq!(v.len(), self.cols, "mul_vec dimension");
        let prec = v.first().map_or(64, Float::prec);
        (0..self.rows).map(|i| dot_prec(self.row(i), v, prec)).collect()
    }

    /// `(vᵀ A)ᵀ`, the contracted product written `v ×¹ A`.
    pub fn vec_mul(&self, v: &[Float]) -> DenseVector {
        assert_eq!(v.len(), self.rows, "vec_mul dimension");
        let prec = v.first().map_or(64, Float::prec);
        let mut out = vec![Float::new(prec); self.cols];
        for (i, vi) in v.iter().enumerate() {
            if vi.is_zero() {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                let a = self.get(i, j);
                if !a.is_zero() {
                    *o += Float::with_val(prec, vi * a);
                }
            }
        }
        out
    }
}

/// Decimal significant digits that make a stored value round-trip exactly.
pub fn decimal_digits(prec: u32) -> usize {
    (f64::from(prec) * 0.302).ceil() as usize + 2
}

/// Parses a decimal string (integers, decimals, exponents and `p/q`
/// rationals are accepted) rounded to `prec` bits.
pub fn parse_decimal(s: &str, prec: u32) -> Result<Float, NumericsError> {
    let t = s.trim();
    if let Some((num, den)) = t.split_once('/') {
        let n = parse_decimal(num, prec)?;
        let d = parse_decimal(den, prec)?;
        if d.is_zero() {
            return Err(NumericsError::Parse(s.to_string()));
        }
        return Ok(Float::with_val(prec, &n / &d));
    }
    Float::parse(t)
        .map(|p| Float::with_val(prec, p))
        .map_err(|_| NumericsError::Parse(s.to_string()))
}

/// Formats `x` with enough digits for an exact round trip at its precision.
pub fn format_decimal(x: &Float) -> String {
    format_digits(x, decimal_digits(x.prec()))
}

/// Formats `x` in scientific notation with `digits` significant digits.
pub fn format_digits(x: &Float, digits: usize) -> String {
    if x.is_zero() {
        return "0".to_string();
    }
    x.to_string_radix(10, Some(digits))
}

pub fn zeros(n: usize, prec: u32) -> DenseVector {
    vec![Float::new(prec); n]
}

pub fn ones(n: usize, prec: u32) -> DenseVector {
    vec![Float::with_val(prec, 1); n]
}

pub fn unit(n: usize, i: usize, prec: u32) -> DenseVector {
    let mut v = zeros(n, prec);
    v[i] = Float::with_val(prec, 1);
    v
}

fn dot_prec(a: &[Float], b: &[Float], prec: u32) -> Float {
    let mut acc = Float::new(prec);
    for (x, y) in a.iter().zip(b) {
        if x.is_zero() || y.is_zero() {
            continue;
        }
        acc += Float::with_val(prec, x * y);
    }
    acc
}

/// Inner product; the result carries the larger operand precision.
pub fn dot(a: &[Float], b: &[Float]) -> Float {
    assert_eq!(a.len(), b.len(), "dot dimension");
    let prec = max_prec(a).max(max_prec(b));
    dot_prec(a, b, prec)
}

fn max_prec(v: &[Float]) -> u32 {
    v.iter().map(Float::prec).max().unwrap_or(64)
}

/// Elementwise product `a ⊙ b`.
pub fn hadamard(a: &[Float], b: &[Float]) -> DenseVector {
    assert_eq!(a.len(), b.len(), "hadamard dimension");
    a.iter()
        .zip(b)
        .map(|(x, y)| Float::with_val(x.prec().max(y.prec()), x * y))
        .collect()
}

/// Elementwise power `c^⊙k` (with `0^0 = 1`).
pub fn pow_elem(c: &[Float], k: u32) -> DenseVector {
    c.iter()
        .map(|x| Float::with_val(x.prec(), x.pow(k)))
        .collect()
}

pub fn add(a: &[Float], b: &[Float]) -> DenseVector {
    assert_eq!(a.len(), b.len(), "add dimension");
    a.iter()
        .zip(b)
        .map(|(x, y)| Float::with_val(x.prec().max(y.prec()), x + y))
        .collect()
}

pub fn sub(a: &[Float], b: &[Float]) -> DenseVector {
    assert_eq!(a.len(), b.len(), "sub dimension");
    a.iter()
        .zip(b)
        .map(|(x, y)| Float::with_val(x.prec().max(y.prec()), x - y))
        .collect()
}

pub fn scale(a: &[Float], s: &Float) -> DenseVector {
    a.iter()
        .map(|x| Float::with_val(x.prec().max(s.prec()), x * s))
        .collect()
}

pub fn norm_inf(a: &[Float]) -> Float {
    let mut m = Float::new(max_prec(a));
    for x in a {
        let ax = Float::with_val(m.prec(), x.abs_ref());
        if ax > m {
            m = ax;
        }
    }
    m
}

pub fn norm2(a: &[Float]) -> Float {
    let prec = max_prec(a);
    let mut acc = Float::new(prec);
    for x in a {
        acc += Float::with_val(prec, x.square_ref());
    }
    acc.sqrt()
}

/// `2^e` at the given precision.
pub fn pow2(e: i32, prec: u32) -> Float {
    Float::with_val(prec, 1) << e
}

/// Solves `M x = r` by Gaussian elimination with row pivoting.
///
/// A pivot smaller than `2^(-prec+24)·max|M|` is treated as zero and
/// reported as [`NumericsError::Singular`].
pub fn solve_dense(m: &DenseMatrix, r: &[Float]) -> Result<DenseVector, NumericsError> {
    let n = m.rows();
    if m.cols() != n || r.len() != n {
        return Err(NumericsError::Dimension(format!(
            "{}x{} system with rhs of length {}",
            m.rows(),
            m.cols(),
            r.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let prec = max_prec(r).max(m.data.iter().map(Float::prec).max().unwrap_or(64));
    let scale_m = m.max_abs();
    let tol = Float::with_val(prec, &scale_m * pow2(-(prec as i32) + 24, prec));
    let mut a: Vec<Vec<Float>> = (0..n)
        .map(|i| m.row(i).iter().map(|x| Float::with_val(prec, x)).collect())
        .collect();
    let mut x: Vec<Float> = r.iter().map(|v| Float::with_val(prec, v)).collect();

    for col in 0..n {
        let mut best = col;
        let mut best_abs = Float::with_val(prec, a[col][col].abs_ref());
        for (row, a_row) in a.iter().enumerate().skip(col + 1) {
            let v = Float::with_val(prec, a_row[col].abs_ref());
            if v > best_abs {
                best_abs = v;
                best = row;
            }
        }
        if best_abs <= tol || scale_m.is_zero() {
            return Err(NumericsError::Singular {
                column: col,
                pivot: best_abs.to_f64(),
            });
        }
        a.swap(col, best);
        x.swap(col, best);
        let (upper, lower) = a.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for (off, row) in lower.iter_mut().enumerate() {
            if row[col].is_zero() {
                continue;
            }
            let factor = Float::with_val(prec, &row[col] / &pivot_row[col]);
            for k in col..n {
                if !pivot_row[k].is_zero() {
                    row[k] -= Float::with_val(prec, &factor * &pivot_row[k]);
                }
            }
            let xc = Float::with_val(prec, &factor * &x[col]);
            x[col + 1 + off] -= xc;
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col].clone();
        for k in col + 1..n {
            if !a[col][k].is_zero() {
                acc -= Float::with_val(prec, &a[col][k] * &x[k]);
            }
        }
        x[col] = acc / &a[col][col];
    }
    Ok(x)
}

/// N-point Gauss–Lobatto rule mapped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub nodes: DenseVector,
    pub weights: DenseVector,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ wᵢ xᵢ^k − 1/(k+1)`.
    pub fn moment_defect(&self, k: u32) -> Float {
        let prec = self.nodes[0].prec();
        let mut acc = Float::new(prec);
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += Float::with_val(prec, w * Float::with_val(prec, x.pow(k)));
        }
        acc - Float::with_val(prec, 1) / Float::with_val(prec, k + 1)
    }
}

/// Legendre `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre(n: usize, x: &Float) -> (Float, Float) {
    let prec = x.prec();
    let mut p0 = Float::with_val(prec, 1);
    if n == 0 {
        return (p0, Float::new(prec));
    }
    let mut p1 = x.clone();
    for k in 1..n {
        // (k+1) P_{k+1} = (2k+1) x P_k − k P_{k−1}
        let t = Float::with_val(prec, x * &p1) * (2 * k as u32 + 1);
        let p2 = (t - Float::with_val(prec, &p0 * k as u32)) / (k as u32 + 1);
        p0 = p1;
        p1 = p2;
    }
    // (1 − x²) P_n' = n (P_{n−1} − x P_n)
    let denom = Float::with_val(prec, 1) - Float::with_val(prec, x.square_ref());
    let dp = if denom.is_zero() {
        Float::new(prec)
    } else {
        Float::with_val(prec, &p0 - Float::with_val(prec, x * &p1)) * n as u32 / denom
    };
    (p1, dp)
}

/// Gauss–Lobatto rule with `n_points` nodes on `[0, 1]`.
///
/// Interior nodes are the roots of `P'_{N−1}`, found by Newton's method
/// from Chebyshev–Lobatto guesses with 32 guard bits; weights use
/// `2/(N(N−1) P_{N−1}(ξ)²)` on `[−1, 1]`, halved for the unit interval.
pub fn lobatto_rule(n_points: usize, prec: u32) -> Result<QuadratureRule, NumericsError> {
    if n_points < 2 {
        return Err(NumericsError::TooFewPoints(n_points));
    }
    let work = prec + 32;
    let deg = n_points - 1;
    let pi = Float::with_val(work, Constant::Pi);
    let tol = pow2(-(work as i32) + 8, work);
    let mut xi: Vec<Float> = Vec::with_capacity(n_points);
    xi.push(Float::with_val(work, -1));
    for k in 1..deg {
        // ascending guesses −cos(πk/(N−1))
        let angle = Float::with_val(work, &pi * k as u32) / deg as u32;
        let mut x = -angle.cos();
        let mut converged = false;
        for _ in 0..200 {
            let (p, dp) = legendre(deg, &x);
            // P'' from (1−x²)P'' = 2xP' − n(n+1)P
            let one_m_x2 = Float::with_val(work, 1) - Float::with_val(work, x.square_ref());
            let num = Float::with_val(work, 2 * Float::with_val(work, &x * &dp))
                - Float::with_val(work, &p * (deg * (deg + 1)) as u32);
            let ddp = num / one_m_x2;
            let delta = Float::with_val(work, &dp / &ddp);
            x -= &delta;
            if Float::with_val(work, delta.abs_ref()) < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(NumericsError::NoConvergence { index: k });
        }
        xi.push(x);
    }
    xi.push(Float::with_val(work, 1));

    let nn1 = (n_points * (n_points - 1)) as u32;
    let mut nodes = Vec::with_capacity(n_points);
    let mut weights = Vec::with_capacity(n_points);
    for x in &xi {
        let (p, _) = legendre(deg, x);
        let w = Float::with_val(work, 1) / (Float::with_val(work, p.square_ref()) * nn1);
        nodes.push(Float::with_val(prec, Float::with_val(work, x + 1u32) / 2u32));
        weights.push(Float::with_val(prec, w));
    }
    nodes[0] = Float::new(prec);
    nodes[n_points - 1] = Float::with_val(prec, 1);
    Ok(QuadratureRule { nodes, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_rule_is_simpson() {
        let q = lobatto_rule(3, 128).unwrap();
        let sixth = Float::with_val(128, 1) / 6u32;
        assert!(Float::with_val(128, &q.nodes[1] - 0.5f64).abs() < 1e-35);
        assert!(Float::with_val(128, &q.weights[0] - &sixth).abs() < 1e-35);
        assert!(Float::with_val(128, &q.weights[1] - 4 * sixth).abs() < 1e-35);
    }

    #[test]
    fn decimal_round_trip() {
        let x = Float::with_val(256, 2).sqrt();
        let s = format_decimal(&x);
        assert_eq!(parse_decimal(&s, 256).unwrap(), x);
        assert_eq!(parse_decimal("1/3", 64).unwrap(), Float::with_val(64, 1) / 3u32);
    }

    #[test]
    fn contracted_product_matches_transpose() {
        let m = DenseMatrix::from_rows(vec![
            vec![Float::with_val(64, 1), Float::with_val(64, 2)],
            vec![Float::with_val(64, 3), Float::with_val(64, 4)],
        ])
        .unwrap();
        let v = vec![Float::with_val(64, 1), Float::with_val(64, -1)];
        let out = m.vec_mul(&v);
        assert_eq!(out[0], -2);
        assert_eq!(out[1], -2);
    }
}
