//! Rooted trees, elementary weights and the order-condition oracle.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rug::Float;

use crate::numerics::{format_decimal, hadamard, pow2, DenseVector};
use crate::tableau::ButcherTableau;

/// A rooted tree in canonical form.
///
/// Children are sorted by their level-sequence encoding (descending), so
/// isomorphic trees compare equal field by field.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RootedTree {
    children: Vec<RootedTree>,
    order: usize,
    density: u128,
    symmetry: u128,
    encoding: String,
}

const DIGITS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";

impl RootedTree {
    /// The single-node tree `•`.
    pub fn leaf() -> Self {
        Self::from_children(Vec::new())
    }

    /// The tree `[t₁ … t_k]` obtained by grafting `children` onto a new root.
    pub fn from_children(mut children: Vec<RootedTree>) -> Self {
        children.sort_by(|a, b| b.encoding.cmp(&a.encoding));
        let order = 1 + children.iter().map(|t| t.order).sum::<usize>();
        let density = order as u128 * children.iter().map(|t| t.density).product::<u128>();

        let mut symmetry: u128 = 1;
        let mut run = 1u128;
        for (k, child) in children.iter().enumerate() {
            symmetry *= child.symmetry;
            if k > 0 && children[k - 1] == *child {
                run += 1;
                symmetry *= run;
            } else {
                run = 1;
            }
        }

        let mut encoding = String::with_capacity(order);
        encoding.push('0');
        for child in &children {
            for ch in child.encoding.bytes() {
                let depth = DIGITS.iter().position(|&d| d == ch).expect("base-36 digit");
                encoding.push(DIGITS[depth + 1] as char);
            }
        }
        RootedTree {
            children,
            order,
            density,
            symmetry,
            encoding,
        }
    }

    /// The bushy tree `[•^k]`.
    pub fn bushy(k: usize) -> Self {
        Self::from_children(vec![Self::leaf(); k])
    }

    /// The tall tree with `order` nodes in a single chain.
    pub fn tall(order: usize) -> Self {
        let mut t = Self::leaf();
        for _ in 1..order {
            t = Self::from_children(vec![t]);
        }
        t
    }

    /// Rebuilds a tree from its level-sequence encoding.
    pub fn from_encoding(code: &str) -> Option<Self> {
        let depths: Vec<usize> = code
            .bytes()
            .map(|ch| DIGITS.iter().position(|&d| d == ch))
            .collect::<Option<_>>()?;
        if depths.first() != Some(&0) {
            return None;
        }
        fn build(depths: &[usize], pos: &mut usize) -> Option<RootedTree> {
            let d = depths[*pos];
            *pos += 1;
            let mut children = Vec::new();
            while *pos < depths.len() && depths[*pos] > d {
                if depths[*pos] != d + 1 {
                    return None;
                }
                children.push(build(depths, pos)?);
            }
            Some(RootedTree::from_children(children))
        }
        let mut pos = 0;
        let t = build(&depths, &mut pos)?;
        (pos == depths.len()).then_some(t)
    }

    pub fn children(&self) -> &[RootedTree] {
        &self.children
    }

    /// Number of nodes `|t|`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Density `γ(t)`.
    pub fn density(&self) -> u128 {
        self.density
    }

    /// Size of the automorphism group `σ(t)`.
    pub fn symmetry(&self) -> u128 {
        self.symmetry
    }

    /// Level sequence of a depth-first walk, one base-36 digit per node.
    pub fn encoding(&self) -> &str {
        &self.encoding
    }
}

/// All trees up to a given order with child links by index, so that
/// `Φ` can be evaluated bottom-up without recomputation.
#[derive(Clone, Debug)]
pub struct Forest {
    trees: Vec<RootedTree>,
    child_index: Vec<Vec<usize>>,
    order_start: Vec<usize>,
}

impl Forest {
    pub fn new(p_max: usize) -> Self {
        assert!(p_max >= 1, "p_max must be at least 1");
        let mut trees = vec![RootedTree::leaf()];
        let mut child_index = vec![Vec::new()];
        // order_start[k] = first index with order k; order_start[p_max+1] = len
        let mut order_start = vec![0, 0, 1];
        for order in 2..=p_max {
            let mut multisets = Vec::new();
            let mut current = Vec::new();
            child_multisets(&trees, order - 1, trees.len(), &mut current, &mut multisets);
            for kids in multisets {
                let t = RootedTree::from_children(kids.iter().map(|&k| trees[k].clone()).collect());
                trees.push(t);
                child_index.push(kids);
            }
            order_start.push(trees.len());
        }
        Forest {
            trees,
            child_index,
            order_start,
        }
    }

    pub fn trees(&self) -> &[RootedTree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn max_order(&self) -> usize {
        self.order_start.len() - 2
    }

    /// Indices of the trees of exactly `order` nodes.
    pub fn of_order(&self, order: usize) -> std::ops::Range<usize> {
        self.order_start[order]..self.order_start[order + 1]
    }

    /// `Φ(t)` for every tree in the forest, in forest order.
    pub fn phi_vectors(&self, t: &ButcherTableau) -> Vec<DenseVector> {
        let prec = t.precision_bits();
        let ones = vec![Float::with_val(prec, 1); t.stages()];
        let mut phi: Vec<DenseVector> = Vec::with_capacity(self.len());
        let mut a_phi: Vec<DenseVector> = Vec::with_capacity(self.len());
        for kids in &self.child_index {
            let mut v = ones.clone();
            for &k in kids {
                v = hadamard(&v, &a_phi[k]);
            }
            a_phi.push(t.a().mul_vec(&v));
            phi.push(v);
        }
        phi
    }
}

/// Appends every non-increasing index list over `trees[..below]` whose
/// orders sum to `remaining`.
fn child_multisets(
    trees: &[RootedTree],
    remaining: usize,
    below: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if remaining == 0 {
        out.push(current.clone());
        return;
    }
    for idx in (0..below).rev() {
        let o = trees[idx].order();
        if o > remaining {
            continue;
        }
        current.push(idx);
        child_multisets(trees, remaining - o, idx + 1, current, out);
        current.pop();
    }
}

/// All non-isomorphic rooted trees with `1 ≤ |t| ≤ p_max`, grouped by order.
pub fn enumerate_trees(p_max: usize) -> Vec<RootedTree> {
    Forest::new(p_max).trees
}

/// `Φ(•) = 𝟙`, `Φ([t₁…t_k]) = ⊙ᵢ A Φ(tᵢ)`.
pub fn phi_vector(t: &ButcherTableau, tree: &RootedTree) -> DenseVector {
    let prec = t.precision_bits();
    let mut v = vec![Float::with_val(prec, 1); t.stages()];
    for child in tree.children() {
        v = hadamard(&v, &t.a().mul_vec(&phi_vector(t, child)));
    }
    v
}

/// `weights · Φ(t)`.
pub fn elementary_weight(t: &ButcherTableau, tree: &RootedTree, weights: &[Float]) -> Float {
    crate::numerics::dot(weights, &phi_vector(t, tree))
}

/// One residual `φ(t) − 1/γ(t)`.
#[derive(Clone, Debug)]
pub struct TreeResidual {
    pub order: usize,
    pub encoding: String,
    pub residual: Float,
}

/// Result of checking every tree condition up to some order.
#[derive(Clone, Debug)]
pub struct OrderReport {
    pub order_verified: usize,
    pub residuals: Vec<TreeResidual>,
    /// Entry `k − 1` holds the largest `|φ(t) − 1/γ(t)|` over `|t| = k`.
    pub max_abs_residual_per_order: Vec<Float>,
}

impl OrderReport {
    pub fn residual_map(&self) -> BTreeMap<String, Float> {
        self.residuals
            .iter()
            .map(|r| (r.encoding.clone(), r.residual.clone()))
            .collect()
    }

    /// Largest residual over all orders `≤ order`.
    pub fn max_abs_through(&self, order: usize) -> Float {
        let prec = self.max_abs_residual_per_order[0].prec();
        self.max_abs_residual_per_order
            .iter()
            .take(order)
            .fold(Float::new(prec), |m, r| if *r > m { r.clone() } else { m })
    }

    /// CSV with columns `order,tree_encoding,residual_decimal`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("order,tree_encoding,residual_decimal\n");
        for r in &self.residuals {
            let _ = writeln!(out, "{},{},{}", r.order, r.encoding, format_decimal(&r.residual));
        }
        out
    }
}

/// Default residual tolerance `2^(−precision/2)`.
pub fn default_tolerance(prec: u32) -> Float {
    pow2(-((prec / 2) as i32), prec)
}

/// Evaluates `φ(t) − 1/γ(t)` for every tree with `|t| ≤ p_max`.
pub fn verify_order(t: &ButcherTableau, p_max: usize, weights: &[Float], tol: &Float) -> OrderReport {
    verify_with_forest(t, &Forest::new(p_max), weights, tol)
}

/// [`verify_order`] over a prebuilt forest.
pub fn verify_with_forest(
    t: &ButcherTableau,
    forest: &Forest,
    weights: &[Float],
    tol: &Float,
) -> OrderReport {
    let prec = t.precision_bits();
    let phis = forest.phi_vectors(t);
    let p_max = forest.max_order();
    let mut max_abs = vec![Float::new(prec); p_max];
    let mut residuals = Vec::with_capacity(forest.len());
    for (tree, phi) in forest.trees().iter().zip(&phis) {
        let w = crate::numerics::dot(weights, phi);
        let r = w - Float::with_val(prec, 1) / Float::with_val(prec, tree.density());
        let a = Float::with_val(prec, r.abs_ref());
        if a > max_abs[tree.order() - 1] {
            max_abs[tree.order() - 1] = a;
        }
        residuals.push(TreeResidual {
            order: tree.order(),
            encoding: tree.encoding().to_string(),
            residual: r,
        });
    }
    let order_verified = max_abs.iter().take_while(|m| *m < tol).count();
    OrderReport {
        order_verified,
        residuals,
        max_abs_residual_per_order: max_abs,
    }
}

/// `‖τ^(p+1)‖₂` with entries `(φ(t) − 1/γ(t))/σ(t)` over trees of order `p + 1`.
pub fn principal_error_norm(t: &ButcherTableau, p: usize) -> Float {
    let forest = Forest::new(p + 1);
    principal_error_norm_with(t, &forest, p)
}

/// [`principal_error_norm`] over a prebuilt forest of order at least `p + 1`.
pub fn principal_error_norm_with(t: &ButcherTableau, forest: &Forest, p: usize) -> Float {
    let prec = t.precision_bits();
    let phis = forest.phi_vectors(t);
    let mut acc = Float::new(prec);
    for idx in forest.of_order(p + 1) {
        let tree = &forest.trees()[idx];
        let w = crate::numerics::dot(t.b(), &phis[idx]);
        let r = (w - Float::with_val(prec, 1) / Float::with_val(prec, tree.density()))
            / Float::with_val(prec, tree.symmetry());
        acc += Float::with_val(prec, r.square_ref());
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_per_order() {
        let f = Forest::new(10);
        let counts: Vec<usize> = (1..=10).map(|k| f.of_order(k).len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 4, 9, 20, 48, 115, 286, 719]);
        assert_eq!(f.len(), 1205);
    }

    #[test]
    fn encoding_round_trip() {
        for t in enumerate_trees(7) {
            assert_eq!(RootedTree::from_encoding(t.encoding()).unwrap(), t);
        }
    }

    #[test]
    fn bushy_and_tall() {
        assert_eq!(RootedTree::bushy(4).symmetry(), 24);
        assert_eq!(RootedTree::bushy(4).density(), 5);
        assert_eq!(RootedTree::tall(5).density(), 120);
        assert_eq!(RootedTree::tall(5).symmetry(), 1);
    }
}
