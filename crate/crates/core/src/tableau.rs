//! Butcher tableaux, q/d residual vectors, the generated Q/D spaces and the
//! sufficiency checker built on them.

use rug::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    dot, format_decimal, hadamard, norm2, norm_inf, ones, parse_decimal, pow2, pow_elem, scale,
    sub, DenseMatrix, DenseVector, NumericsError,
};

#[derive(Debug, Error)]
pub enum TableauError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("A is not strictly lower triangular: A[{row}][{col}] = {value}")]
    NotExplicit { row: usize, col: usize, value: String },
    #[error("malformed tableau document: {0}")]
    Malformed(String),
    #[error("invalid parameters: {0}")]
    Parameters(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// An explicit Runge–Kutta tableau `(A, b, c)` with optional embedded weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    c: DenseVector,
    b: DenseVector,
    a: DenseMatrix,
    b_embedded: Option<DenseVector>,
    claimed_order: Option<usize>,
    precision_bits: u32,
}

impl ButcherTableau {
    /// Validates dimensions and strict lower triangularity.
    pub fn new(
        c: DenseVector,
        b: DenseVector,
        a: DenseMatrix,
        b_embedded: Option<DenseVector>,
        claimed_order: Option<usize>,
    ) -> Result<Self, TableauError> {
        let s = c.len();
        if b.len() != s || a.rows() != s || a.cols() != s {
            return Err(TableauError::Length(format!(
                "c has {s} entries, b has {}, A is {}x{}",
                b.len(),
                a.rows(),
                a.cols()
            )));
        }
        if let Some(e) = &b_embedded {
            if e.len() != s {
                return Err(TableauError::Length(format!("b_embedded has {} entries", e.len())));
            }
        }
        for i in 0..s {
            for j in i..s {
                if !a.get(i, j).is_zero() {
                    return Err(TableauError::NotExplicit {
                        row: i,
                        col: j,
                        value: format_decimal(a.get(i, j)),
                    });
                }
            }
        }
        let precision_bits = c
            .iter()
            .chain(&b)
            .map(Float::prec)
            .max()
            .unwrap_or(crate::DEFAULT_PRECISION);
        Ok(ButcherTableau {
            c,
            b,
            a,
            b_embedded,
            claimed_order,
            precision_bits,
        })
    }

    pub fn stages(&self) -> usize {
        self.c.len()
    }

    pub fn c(&self) -> &[Float] {
        &self.c
    }

    pub fn b(&self) -> &[Float] {
        &self.b
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b_embedded(&self) -> Option<&[Float]> {
        self.b_embedded.as_deref()
    }

    pub fn claimed_order(&self) -> Option<usize> {
        self.claimed_order
    }

    pub fn precision_bits(&self) -> u32 {
        self.precision_bits
    }

    pub fn with_embedded(mut self, b_embedded: DenseVector) -> Result<Self, TableauError> {
        if b_embedded.len() != self.stages() {
            return Err(TableauError::Length("b_embedded".into()));
        }
        self.b_embedded = Some(b_embedded);
        Ok(self)
    }

    pub fn with_claimed_order(mut self, order: Option<usize>) -> Self {
        self.claimed_order = order;
        self
    }

    /// Rounds every coefficient to `prec` bits.
    pub fn with_precision(&self, prec: u32) -> Self {
        let r = |v: &[Float]| v.iter().map(|x| Float::with_val(prec, x)).collect::<Vec<_>>();
        let rows = self.a.to_rows().iter().map(|row| r(row)).collect();
        ButcherTableau {
            c: r(&self.c),
            b: r(&self.b),
            a: DenseMatrix::from_rows(rows).expect("square"),
            b_embedded: self.b_embedded.as_deref().map(r),
            claimed_order: self.claimed_order,
            precision_bits: prec,
        }
    }

    /// `max |A𝟙 − c|`.
    pub fn row_sum_defect(&self) -> Float {
        norm_inf(&q_vector(self, 0))
    }
}

/// `qₙ = A c^⊙n − c^⊙(n+1)/(n+1)`.
pub fn q_vector(t: &ButcherTableau, n: u32) -> DenseVector {
    let prec = t.precision_bits();
    let lhs = t.a().mul_vec(&pow_elem(t.c(), n));
    let inv = Float::with_val(prec, 1) / Float::with_val(prec, n + 1);
    sub(&lhs, &scale(&pow_elem(t.c(), n + 1), &inv))
}

/// `dₙ = (w ⊙ c^⊙n) ×¹ A − w ⊙ (𝟙 − c^⊙(n+1))/(n+1)`.
pub fn d_vector(t: &ButcherTableau, n: u32, weights: &[Float]) -> DenseVector {
    let prec = t.precision_bits();
    let lhs = t.a().vec_mul(&hadamard(weights, &pow_elem(t.c(), n)));
    let inv = Float::with_val(prec, 1) / Float::with_val(prec, n + 1);
    let tail = sub(&ones(t.stages(), prec), &pow_elem(t.c(), n + 1));
    sub(&lhs, &scale(&hadamard(weights, &tail), &inv))
}

/// A generator together with the recursion rule that produced it.
#[derive(Clone, Debug)]
pub struct Generator {
    pub vector: DenseVector,
    pub provenance: String,
}

/// Generators of one level of the Q or D hierarchy, in recursion order.
#[derive(Clone, Debug)]
pub struct SubspaceBasis {
    pub level: usize,
    pub generators: Vec<Generator>,
}

impl SubspaceBasis {
    pub fn vectors(&self) -> Vec<DenseVector> {
        self.generators.iter().map(|g| g.vector.clone()).collect()
    }

    /// Numerical rank of the generators at tolerance `2^(−prec/2)`.
    pub fn rank(&self) -> usize {
        let prec = self.generators.first().map_or(64, |g| g.vector[0].prec());
        Span::new(&self.vectors(), prec).dim()
    }
}

fn next_level(
    prev: &SubspaceBasis,
    lead: Generator,
    act: impl Fn(&[Float]) -> DenseVector,
    act_name: &str,
    c: &[Float],
) -> SubspaceBasis {
    let mut generators = vec![lead];
    for g in &prev.generators {
        generators.push(Generator {
            vector: act(&g.vector),
            provenance: format!("{act_name}({})", g.provenance),
        });
    }
    for g in &prev.generators {
        generators.push(g.clone());
    }
    for g in &prev.generators {
        generators.push(Generator {
            vector: hadamard(&g.vector, c),
            provenance: format!("{}*c", g.provenance),
        });
    }
    SubspaceBasis {
        level: prev.level + 1,
        generators,
    }
}

/// Generator lists of `Q₁ … Q_m`.
pub fn q_space_basis(t: &ButcherTableau, m: usize) -> Vec<SubspaceBasis> {
    assert!(m >= 1, "m must be at least 1");
    let mut levels = vec![SubspaceBasis {
        level: 1,
        generators: vec![Generator {
            vector: q_vector(t, 0),
            provenance: "q0".into(),
        }],
    }];
    for k in 1..m {
        let lead = Generator {
            vector: q_vector(t, k as u32),
            provenance: format!("q{k}"),
        };
        let next = next_level(&levels[k - 1], lead, |v| t.a().mul_vec(v), "A", t.c());
        levels.push(next);
    }
    levels
}

/// Generator lists of `D₁ … D_n` for the given weights.
pub fn d_space_basis(t: &ButcherTableau, n: usize, weights: &[Float]) -> Vec<SubspaceBasis> {
    assert!(n >= 1, "n must be at least 1");
    let mut levels = vec![SubspaceBasis {
        level: 1,
        generators: vec![Generator {
            vector: d_vector(t, 0, weights),
            provenance: "d0".into(),
        }],
    }];
    for k in 1..n {
        let lead = Generator {
            vector: d_vector(t, k as u32, weights),
            provenance: format!("d{k}"),
        };
        let next = next_level(&levels[k - 1], lead, |v| t.a().vec_mul(v), "xA", t.c());
        levels.push(next);
    }
    levels
}

/// Orthonormal basis of a span, built by modified Gram–Schmidt with one
/// reorthogonalization pass.
#[derive(Clone, Debug)]
pub struct Span {
    basis: Vec<DenseVector>,
    tol: Float,
}

impl Span {
    /// Generators with norm below `2^(−prec/2)` count as zero; a normalized
    /// generator joins the basis when its orthogonal remainder exceeds it too.
    pub fn new(generators: &[DenseVector], prec: u32) -> Self {
        let mut span = Span {
            basis: Vec::new(),
            tol: pow2(-((prec / 2) as i32), prec),
        };
        for g in generators {
            span.push(g);
        }
        span
    }

    fn push(&mut self, g: &[Float]) {
        let n = norm2(g);
        if n < self.tol {
            return;
        }
        let mut v = scale(g, &(Float::with_val(n.prec(), 1) / &n));
        for _ in 0..2 {
            for e in &self.basis {
                let proj = dot(&v, e);
                v = sub(&v, &scale(e, &proj));
            }
        }
        let r = norm2(&v);
        if r > self.tol {
            self.basis.push(scale(&v, &(Float::with_val(r.prec(), 1) / &r)));
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[DenseVector] {
        &self.basis
    }

    /// `‖v − P v‖₂` for the orthogonal projector `P` onto the span.
    pub fn residual(&self, v: &[Float]) -> Float {
        let mut r = v.to_vec();
        for _ in 0..2 {
            for e in &self.basis {
                let proj = dot(&r, e);
                r = sub(&r, &scale(e, &proj));
            }
        }
        norm2(&r)
    }
}

/// Largest membership residual of `candidates` in `span(generators)`.
pub fn max_membership_residual(
    candidates: &[DenseVector],
    generators: &[DenseVector],
    prec: u32,
) -> Float {
    let span = Span::new(generators, prec);
    candidates
        .iter()
        .map(|v| span.residual(v))
        .fold(Float::new(prec), |m, r| if r > m { r } else { m })
}

/// Outcome of the five sufficiency conditions at `(p, m, n)`.
#[derive(Clone, Debug)]
pub struct SufficiencyReport {
    pub p: usize,
    pub m: usize,
    pub n: usize,
    pub pass_b: bool,
    pub pass_qo: bool,
    pub pass_do: bool,
    pub pass_qd: bool,
    pub pass_qr: bool,
    pub worst_b: Float,
    pub worst_qo: Float,
    pub worst_do: Float,
    pub worst_qd: Float,
    pub worst_qr: Float,
    pub q_generator_count: usize,
    pub q_rank: usize,
    pub d_generator_count: usize,
    pub d_rank: usize,
}

impl SufficiencyReport {
    pub fn all_pass(&self) -> bool {
        self.pass_b && self.pass_qo && self.pass_do && self.pass_qd && self.pass_qr
    }

    pub fn worst(&self) -> Float {
        [&self.worst_b, &self.worst_qo, &self.worst_do, &self.worst_qd, &self.worst_qr]
            .into_iter()
            .fold(Float::new(self.worst_b.prec()), |m, r| if *r > m { r.clone() } else { m })
    }
}

fn max_into(acc: &mut Float, v: Float) {
    if v > *acc {
        *acc = v;
    }
}

/// Tests B(p), QO(m), DO(n), QD(m,n) and QR(m) with violations measured
/// against `tol`.
pub fn check_sufficiency(
    t: &ButcherTableau,
    p: usize,
    m: usize,
    n: usize,
    weights: &[Float],
    tol: &Float,
) -> Result<SufficiencyReport, TableauError> {
    if m == 0 || n == 0 || m + 1 < n || m + n + 1 < p {
        return Err(TableauError::Parameters(format!(
            "need m ≥ n − 1 and m + n + 1 ≥ p, got (p, m, n) = ({p}, {m}, {n})"
        )));
    }
    if weights.len() != t.stages() {
        return Err(TableauError::Length("weights".into()));
    }
    let prec = t.precision_bits();
    let c = t.c();

    let mut worst_b = Float::new(prec);
    for k in 1..=p {
        let v = dot(weights, &pow_elem(c, (k - 1) as u32)) - Float::with_val(prec, 1) / k as u32;
        max_into(&mut worst_b, v.abs());
    }

    let q_levels = q_space_basis(t, m);
    let d_levels = d_space_basis(t, n, weights);
    let q_gens = q_levels[m - 1].vectors();
    let d_gens = d_levels[n - 1].vectors();

    let mut worst_qo = Float::new(prec);
    for q in &q_gens {
        max_into(&mut worst_qo, norm_inf(&hadamard(weights, q)));
    }

    let mut worst_do = Float::new(prec);
    for d in &d_gens {
        for k in 1..=p.saturating_sub(n) {
            max_into(&mut worst_do, dot(d, &pow_elem(c, (k - 1) as u32)).abs());
        }
    }

    // QD and QR are bilinear, so orthonormal bases stand in for the generator lists
    let q_spans: Vec<Span> = q_levels.iter().map(|l| Span::new(&l.vectors(), prec)).collect();
    let d_span = Span::new(&d_gens, prec);

    let mut worst_qd = Float::new(prec);
    for q in q_spans[m - 1].basis() {
        for d in d_span.basis() {
            max_into(&mut worst_qd, norm_inf(&hadamard(q, d)));
        }
    }

    let mut worst_qr = Float::new(prec);
    for m1 in 1..=m {
        let outer = &q_spans[m1 - 1];
        for m2 in 1..=m1 {
            for g1 in outer.basis() {
                for g2 in q_spans[m2 - 1].basis() {
                    max_into(&mut worst_qr, outer.residual(&hadamard(g1, g2)));
                }
            }
        }
    }

    Ok(SufficiencyReport {
        p,
        m,
        n,
        pass_b: worst_b < *tol,
        pass_qo: worst_qo < *tol,
        pass_do: worst_do < *tol,
        pass_qd: worst_qd < *tol,
        pass_qr: worst_qr < *tol,
        worst_b,
        worst_qo,
        worst_do,
        worst_qd,
        worst_qr,
        q_generator_count: q_gens.len(),
        q_rank: q_spans[m - 1].dim(),
        d_generator_count: d_gens.len(),
        d_rank: d_span.dim(),
    })
}

/// Threshold below which an entry of `A` counts as zero.
pub fn zero_threshold(prec: u32) -> Float {
    pow2(-(prec as i32) + 24, prec)
}

/// Fraction of nonzero entries in the strictly lower triangle of `A`.
pub fn sparsity_density(t: &ButcherTableau) -> f64 {
    let s = t.stages();
    if s < 2 {
        return 0.0;
    }
    let tol = zero_threshold(t.precision_bits());
    let mut nonzero = 0usize;
    for i in 1..s {
        for j in 0..i {
            if Float::with_val(t.precision_bits(), t.a().get(i, j).abs_ref()) >= tol {
                nonzero += 1;
            }
        }
    }
    nonzero as f64 / (s * (s - 1) / 2) as f64
}

/// On-disk tableau document, format version 1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TableauDocument {
    pub format_version: u32,
    pub order: Option<usize>,
    pub stages: usize,
    pub precision_bits: u32,
    pub c: Vec<String>,
    pub b: Vec<String>,
    pub b_embedded: Option<Vec<String>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<String>>,
}

fn fmt_vec(v: &[Float]) -> Vec<String> {
    v.iter().map(format_decimal).collect()
}

impl From<&ButcherTableau> for TableauDocument {
    fn from(t: &ButcherTableau) -> Self {
        TableauDocument {
            format_version: 1,
            order: t.claimed_order(),
            stages: t.stages(),
            precision_bits: t.precision_bits(),
            c: fmt_vec(t.c()),
            b: fmt_vec(t.b()),
            b_embedded: t.b_embedded().map(fmt_vec),
            a: t.a().to_rows().iter().map(|r| fmt_vec(r)).collect(),
        }
    }
}

impl TableauDocument {
    pub fn to_tableau(&self) -> Result<ButcherTableau, TableauError> {
        if self.format_version != 1 {
            return Err(TableauError::Malformed(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.precision_bits < 2 {
            return Err(TableauError::Malformed("precision_bits too small".into()));
        }
        let prec = self.precision_bits;
        let s = self.stages;
        let parse = |v: &[String], what: &str| -> Result<DenseVector, TableauError> {
            if v.len() != s {
                return Err(TableauError::Length(format!("{what} has {} entries, expected {s}", v.len())));
            }
            v.iter()
                .map(|x| parse_decimal(x, prec).map_err(TableauError::from))
                .collect()
        };
        let c = parse(&self.c, "c")?;
        let b = parse(&self.b, "b")?;
        let b_embedded = self.b_embedded.as_deref().map(|e| parse(e, "b_embedded")).transpose()?;
        if self.a.len() != s {
            return Err(TableauError::Length(format!("A has {} rows, expected {s}", self.a.len())));
        }
        let rows = self
            .a
            .iter()
            .enumerate()
            .map(|(i, r)| parse(r, &format!("A row {}", i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let a = DenseMatrix::from_rows(rows)?;
        let mut t = ButcherTableau::new(c, b, a, b_embedded, self.order)?;
        t.precision_bits = prec;
        Ok(t)
    }
}

/// JSON text of a tableau.
pub fn serialize(t: &ButcherTableau) -> String {
    serde_json::to_string_pretty(&TableauDocument::from(t)).expect("tableau serializes")
}

/// Parses and validates a JSON tableau document.
pub fn deserialize(text: &str) -> Result<ButcherTableau, TableauError> {
    let doc: TableauDocument =
        serde_json::from_str(text).map_err(|e| TableauError::Malformed(e.to_string()))?;
    doc.to_tableau()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn euler() -> ButcherTableau {
        ButcherTableau::new(
            vec![Float::new(64)],
            vec![Float::with_val(64, 1)],
            DenseMatrix::zeros(1, 1, 64),
            None,
            Some(1),
        )
        .unwrap()
    }

    #[test]
    fn euler_round_trip() {
        let t = euler();
        assert_eq!(deserialize(&serialize(&t)).unwrap(), t);
    }

    #[test]
    fn rejects_upper_entry() {
        let mut doc = TableauDocument::from(&euler());
        doc.a[0][0] = "1".into();
        assert!(matches!(doc.to_tableau(), Err(TableauError::NotExplicit { .. })));
    }
}
