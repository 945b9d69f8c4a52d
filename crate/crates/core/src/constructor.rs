//! Builds order-`p` explicit tableaux from a fixed stage layout by solving
//! two structured linear systems: the D-system (block lower triangular, fills
//! the columns right of the Q region) and the Q-system (block diagonal, one
//! block per row, fills the first `l + 1` columns).
//!
//! Stage positions in this module are 1-based, matching the usual tableau
//! notation; conversion to storage indices happens at the matrix boundary.

use std::collections::BTreeMap;
use std::ops::Range;

use rug::ops::Pow;
use rug::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    format_decimal, lobatto_rule, parse_decimal, pow2, solve_dense, DenseMatrix, DenseVector,
    NumericsError, QuadratureRule,
};
use crate::tableau::{d_vector, ButcherTableau, TableauError};

#[derive(Debug, Error)]
pub enum ConstructionError {
    #[error("order must be even and at least 4, got {0}")]
    InvalidOrder(usize),
    #[error("invalid free parameters: {0}")]
    InvalidParameters(String),
    #[error("singular {kind:?}-system block {block} (level {level}, {anchor})")]
    SingularBlock {
        kind: SystemKind,
        block: usize,
        level: usize,
        anchor: String,
    },
    #[error("{kind:?}-system bookkeeping: {detail}")]
    Bookkeeping { kind: SystemKind, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tableau(#[from] TableauError),
}

/// What a stage's node value is tied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageNode {
    Zero,
    One,
    /// Free Q-region node, index into `FreeParameters::q_nodes`.
    Free(usize),
    /// Lobatto node `x_r`, `r` in `1..=N`.
    Lobatto(usize),
}

/// Which part of the layout a stage belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    First,
    Q(usize),
    Ghost(usize),
    D(usize),
    Last,
}

/// The order-determined skeleton of the construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub p: usize,
    pub m: usize,
    pub n: usize,
    pub big_n: usize,
    pub l: usize,
    pub s2: usize,
    pub s: usize,
    /// `q_groups[g − 1]` lists the positions of Q-group `g`.
    pub q_groups: Vec<Vec<usize>>,
    /// `ghosts[i − 1]` is the ghost stage of cluster `i`.
    pub ghosts: Vec<usize>,
    /// `d_groups[j − 1][i − 1]` is the position of element `i` of D-group `j`.
    pub d_groups: Vec<Vec<usize>>,
    /// `clusters[i − 1]` holds every stage with node `x_{N−i}`, ascending.
    pub clusters: Vec<Vec<usize>>,
    /// `stage_nodes[k − 1]` describes the node of stage `k`.
    pub stage_nodes: Vec<StageNode>,
}

/// Lays out the stages for even `p ≥ 4`.
pub fn plan_layout(p: usize) -> Result<StageLayout, ConstructionError> {
    if p < 4 || p % 2 == 1 {
        return Err(ConstructionError::InvalidOrder(p));
    }
    let m = p / 2 - 1;
    let n = p / 2;
    let big_n = n + 1;
    let l = m * (m - 1) / 2;
    let s2 = n * (n + 1) / 2;
    let s = 1 + l + s2;

    let mut stage_nodes = vec![StageNode::Zero; s];
    stage_nodes[s - 1] = StageNode::One;

    let mut q_groups = Vec::new();
    for g in 1..m {
        let start = g * (g - 1) / 2 + 2;
        let group: Vec<usize> = (start..start + g).collect();
        for (k, &pos) in group.iter().enumerate() {
            stage_nodes[pos - 1] = StageNode::Free(start - 2 + k);
        }
        q_groups.push(group);
    }

    let ghosts: Vec<usize> = (1..=big_n - 2).map(|i| l + 1 + i).collect();
    for (i, &g) in ghosts.iter().enumerate() {
        stage_nodes[g - 1] = StageNode::Lobatto(big_n - (i + 1));
    }

    let mut d_groups = Vec::new();
    for j in 1..=big_n - 2 {
        let group: Vec<usize> = (1..=j).map(|i| s - 1 - j * (j + 1) / 2 + i).collect();
        for (i, &pos) in group.iter().enumerate() {
            stage_nodes[pos - 1] = StageNode::Lobatto(big_n - (i + 1));
        }
        d_groups.push(group);
    }

    let clusters = (1..=big_n - 2)
        .map(|i| {
            let mut members = vec![ghosts[i - 1]];
            members.extend((i..=big_n - 2).map(|j| d_groups[j - 1][i - 1]));
            members.sort_unstable();
            members
        })
        .collect();

    Ok(StageLayout {
        p,
        m,
        n,
        big_n,
        l,
        s2,
        s,
        q_groups,
        ghosts,
        d_groups,
        clusters,
        stage_nodes,
    })
}

impl StageLayout {
    /// Position of element `i` of D-group `j`.
    pub fn d_pos(&self, j: usize, i: usize) -> usize {
        self.d_groups[j - 1][i - 1]
    }

    pub fn region(&self, pos: usize) -> Region {
        if pos == 1 {
            return Region::First;
        }
        if pos == self.s {
            return Region::Last;
        }
        if pos <= self.l + 1 {
            let g = self.q_groups.iter().position(|grp| grp.contains(&pos)).expect("Q stage");
            return Region::Q(g + 1);
        }
        if pos < self.l + self.big_n {
            return Region::Ghost(pos - self.l - 1);
        }
        let j = self.d_groups.iter().position(|grp| grp.contains(&pos)).expect("D stage");
        Region::D(j + 1)
    }

    /// Cluster index `i` with `pos ∈ S(x_{N−i})`.
    pub fn cluster_of(&self, pos: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&pos)).map(|i| i + 1)
    }

    /// `ε_{j,i}`: `+1` at D-group `j` element `i`, `−1` at the ghost of cluster `i`.
    pub fn epsilon(&self, j: usize, i: usize, prec: u32) -> DenseVector {
        let mut v = vec![Float::new(prec); self.s];
        v[self.d_pos(j, i) - 1] = Float::with_val(prec, 1);
        v[self.ghosts[i - 1] - 1] = Float::with_val(prec, -1);
        v
    }

    /// `μ_i`: indicator of cluster `i`.
    pub fn mu(&self, i: usize, prec: u32) -> DenseVector {
        let mut v = vec![Float::new(prec); self.s];
        for &k in &self.clusters[i - 1] {
            v[k - 1] = Float::with_val(prec, 1);
        }
        v
    }

    /// Free entries of the Q region: pairs inside one Q-group, below the diagonal.
    pub fn free_q_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for grp in &self.q_groups {
            for (a, &i) in grp.iter().enumerate() {
                out.extend(grp[..a].iter().map(|&j| (i, j)));
            }
        }
        out
    }

    /// Free entries of the D region: the ghost block and pairs inside one
    /// D-group, below the diagonal.
    pub fn free_d_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, &i) in self.ghosts.iter().enumerate() {
            out.extend(self.ghosts[..a].iter().map(|&j| (i, j)));
        }
        for grp in self.d_groups.iter().rev() {
            for (a, &i) in grp.iter().enumerate() {
                out.extend(grp[..a].iter().map(|&j| (i, j)));
            }
        }
        out.sort_unstable();
        out
    }

    /// Number of free weights: every cluster member except its ghost.
    pub fn free_weight_count(&self) -> usize {
        self.clusters.iter().map(|c| c.len() - 1).sum()
    }

    /// Length of the flat free-parameter vector.
    pub fn degrees_of_freedom(&self) -> usize {
        self.l + self.free_weight_count() + self.free_q_entries().len() + self.free_d_entries().len()
    }

    /// D-system level `k` rows: `{s}` for `k = 1`, D-group `k − 1` otherwise.
    pub fn d_level_rows(&self, k: usize) -> Vec<usize> {
        if k == 1 {
            vec![self.s]
        } else {
            self.d_groups[k - 2].clone()
        }
    }

    /// Last variable column of D-system level `k`.
    pub fn d_level_last_col(&self, k: usize) -> usize {
        self.s - 1 - k * (k - 1) / 2
    }
}

/// Free parameters of the construction; see [`StageLayout`] for indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeParameters {
    /// Nodes `c₂ … c_{l+1}`.
    pub q_nodes: Vec<Float>,
    /// Per cluster, weights of its members in ascending stage order.
    pub cluster_splits: Vec<Vec<Float>>,
    /// Values for [`StageLayout::free_q_entries`]; missing keys mean zero.
    pub free_a_q: BTreeMap<(usize, usize), Float>,
    /// Values for [`StageLayout::free_d_entries`]; missing keys mean zero.
    pub free_a_d: BTreeMap<(usize, usize), Float>,
}

/// `default_free_parameters` needs the Lobatto rule; this bundles both.
pub fn lobatto_for(layout: &StageLayout, prec: u32) -> Result<QuadratureRule, ConstructionError> {
    Ok(lobatto_rule(layout.big_n, prec)?)
}

/// Interior Lobatto nodes on each Q-group, equal weight splits inside every
/// cluster (ghost included), zero free entries.
pub fn default_free_parameters(layout: &StageLayout, prec: u32) -> FreeParameters {
    let rule = lobatto_rule(layout.big_n, prec).expect("Lobatto rule for N ≥ 3");
    let mut q_nodes = Vec::with_capacity(layout.l);
    for grp in &layout.q_groups {
        for k in 0..grp.len() {
            q_nodes.push(rule.nodes[k + 1].clone());
        }
    }
    let cluster_splits = layout
        .clusters
        .iter()
        .enumerate()
        .map(|(i, members)| {
            let w = &rule.weights[layout.big_n - (i + 1) - 1];
            vec![Float::with_val(prec, w / members.len() as u32); members.len()]
        })
        .collect();
    FreeParameters {
        q_nodes,
        cluster_splits,
        free_a_q: BTreeMap::new(),
        free_a_d: BTreeMap::new(),
    }
}

/// JSON form of [`FreeParameters`]; omitted fields take defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct FreeParametersDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_nodes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_splits: Option<Vec<Vec<String>>>,
    #[serde(default, rename = "free_A_Q", skip_serializing_if = "Option::is_none")]
    pub free_a_q: Option<BTreeMap<String, String>>,
    #[serde(default, rename = "free_A_D", skip_serializing_if = "Option::is_none")]
    pub free_a_d: Option<BTreeMap<String, String>>,
}

fn parse_key(key: &str) -> Result<(usize, usize), ConstructionError> {
    let bad = || ConstructionError::InvalidParameters(format!("bad entry key '{key}'"));
    let (i, j) = key.split_once(',').ok_or_else(bad)?;
    Ok((i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?))
}

impl FreeParametersDocument {
    pub fn from_params(fp: &FreeParameters) -> Self {
        let map = |m: &BTreeMap<(usize, usize), Float>| {
            m.iter().map(|(&(i, j), v)| (format!("{i},{j}"), format_decimal(v))).collect()
        };
        FreeParametersDocument {
            q_nodes: Some(fp.q_nodes.iter().map(format_decimal).collect()),
            cluster_splits: Some(
                fp.cluster_splits
                    .iter()
                    .map(|c| c.iter().map(format_decimal).collect())
                    .collect(),
            ),
            free_a_q: Some(map(&fp.free_a_q)),
            free_a_d: Some(map(&fp.free_a_d)),
        }
    }

    /// Fills omitted fields from the defaults for `layout`.
    pub fn resolve(&self, layout: &StageLayout, prec: u32) -> Result<FreeParameters, ConstructionError> {
        let mut fp = default_free_parameters(layout, prec);
        let num = |s: &String| parse_decimal(s, prec).map_err(ConstructionError::from);
        if let Some(q) = &self.q_nodes {
            fp.q_nodes = q.iter().map(num).collect::<Result<_, _>>()?;
        }
        if let Some(cs) = &self.cluster_splits {
            fp.cluster_splits = cs
                .iter()
                .map(|c| c.iter().map(num).collect::<Result<Vec<_>, _>>())
                .collect::<Result<_, _>>()?;
        }
        if let Some(m) = &self.free_a_q {
            fp.free_a_q = m.iter().map(|(k, v)| Ok((parse_key(k)?, num(v)?))).collect::<Result<_, ConstructionError>>()?;
        }
        if let Some(m) = &self.free_a_d {
            fp.free_a_d = m.iter().map(|(k, v)| Ok((parse_key(k)?, num(v)?))).collect::<Result<_, ConstructionError>>()?;
        }
        validate_free_parameters(layout, &fp, &lobatto_for(layout, prec)?)?;
        Ok(fp)
    }
}

/// Checks node distinctness, split sums, split signs and free-entry keys.
pub fn validate_free_parameters(
    layout: &StageLayout,
    fp: &FreeParameters,
    rule: &QuadratureRule,
) -> Result<(), ConstructionError> {
    let bad = |msg: String| Err(ConstructionError::InvalidParameters(msg));
    if fp.q_nodes.len() != layout.l {
        return bad(format!("expected {} q_nodes, got {}", layout.l, fp.q_nodes.len()));
    }
    let prec = rule.nodes[0].prec();
    let tol = pow2(-((prec / 2) as i32), prec);
    for grp in &layout.q_groups {
        for (a, &i) in grp.iter().enumerate() {
            let ci = &fp.q_nodes[i - 2];
            if Float::with_val(prec, ci.abs_ref()) < tol {
                return bad(format!("c{i} must be nonzero"));
            }
            for &j in &grp[..a] {
                let gap = Float::with_val(prec, ci - &fp.q_nodes[j - 2]).abs();
                if gap < tol {
                    return bad(format!("c{j} and c{i} coincide"));
                }
            }
        }
    }
    if fp.cluster_splits.len() != layout.clusters.len() {
        return bad(format!(
            "expected {} cluster splits, got {}",
            layout.clusters.len(),
            fp.cluster_splits.len()
        ));
    }
    for (i, (split, members)) in fp.cluster_splits.iter().zip(&layout.clusters).enumerate() {
        if split.len() != members.len() {
            return bad(format!("cluster {} has {} members, split has {}", i + 1, members.len(), split.len()));
        }
        let w = &rule.weights[layout.big_n - (i + 1) - 1];
        let total = split.iter().fold(Float::new(prec), |acc, x| acc + x);
        if Float::with_val(prec, &total - w).abs() > tol {
            return bad(format!("cluster {} weights do not sum to its quadrature weight", i + 1));
        }
        if split.iter().any(|x| Float::with_val(prec, x.abs_ref()) < tol) {
            return bad(format!("cluster {} has a zero weight", i + 1));
        }
    }
    let q_allowed = layout.free_q_entries();
    if let Some(k) = fp.free_a_q.keys().find(|k| !q_allowed.contains(k)) {
        return bad(format!("({}, {}) is not a free Q entry", k.0, k.1));
    }
    let d_allowed = layout.free_d_entries();
    if let Some(k) = fp.free_a_d.keys().find(|k| !d_allowed.contains(k)) {
        return bad(format!("({}, {}) is not a free D entry", k.0, k.1));
    }
    Ok(())
}

/// Node vector `c` for a layout and its free nodes.
pub fn stage_nodes(layout: &StageLayout, fp: &FreeParameters, rule: &QuadratureRule) -> DenseVector {
    let prec = rule.nodes[0].prec();
    layout
        .stage_nodes
        .iter()
        .map(|node| match *node {
            StageNode::Zero => Float::new(prec),
            StageNode::One => Float::with_val(prec, 1),
            StageNode::Free(k) => Float::with_val(prec, &fp.q_nodes[k]),
            StageNode::Lobatto(r) => rule.nodes[r - 1].clone(),
        })
        .collect()
}

/// Weight vector `b` for a layout and its cluster splits.
pub fn stage_weights(layout: &StageLayout, fp: &FreeParameters, rule: &QuadratureRule) -> DenseVector {
    let prec = rule.nodes[0].prec();
    let mut b = vec![Float::new(prec); layout.s];
    b[0] = rule.weights[0].clone();
    b[layout.s - 1] = rule.weights[layout.big_n - 1].clone();
    for (split, members) in fp.cluster_splits.iter().zip(&layout.clusters) {
        for (w, &k) in split.iter().zip(members) {
            b[k - 1] = Float::with_val(prec, w);
        }
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    D,
    Q,
}

/// A linear equation over entries of `A` (1-based), `Σ coeff·a_ij = rhs`.
#[derive(Clone, Debug)]
struct Equation {
    terms: Vec<(usize, usize, Float)>,
    rhs: Float,
    level: usize,
}

/// One diagonal block with its coupling to variables of earlier blocks.
#[derive(Clone, Debug)]
pub struct Block {
    /// Global indices (into `variable_order`) of this block's unknowns.
    pub variables: Range<usize>,
    pub matrix: DenseMatrix,
    pub rhs: DenseVector,
    /// `(equation, earlier variable, coefficient)`; the term moves to the
    /// right-hand side once that variable is known.
    pub coupling: Vec<(usize, usize, Float)>,
    pub variable_levels: Vec<usize>,
    pub equation_levels: Vec<usize>,
    /// Pivot column (D) or row (Q) the block was assembled for.
    pub anchor: usize,
}

/// Ordered unknowns of `A` and the per-block dense systems.
#[derive(Clone, Debug)]
pub struct BlockSystem {
    pub kind: SystemKind,
    pub variable_order: Vec<(usize, usize)>,
    pub blocks: Vec<Block>,
}

impl BlockSystem {
    pub fn variable_count(&self) -> usize {
        self.variable_order.len()
    }

    pub fn equation_count(&self) -> usize {
        self.blocks.iter().map(|b| b.rhs.len()).sum()
    }

    pub fn block_boundaries(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|b| b.variables.clone()).collect()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.rhs.len()).collect()
    }

    fn count_by_level(levels: impl Iterator<Item = usize>) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for k in levels {
            if out.len() < k {
                out.resize(k, 0);
            }
            out[k - 1] += 1;
        }
        out
    }

    /// Unknowns per level, `result[k − 1]` for level `k`.
    pub fn variable_level_counts(&self) -> Vec<usize> {
        Self::count_by_level(self.blocks.iter().flat_map(|b| b.variable_levels.iter().copied()))
    }

    /// Equations per level, `result[k − 1]` for level `k`.
    pub fn equation_level_counts(&self) -> Vec<usize> {
        Self::count_by_level(self.blocks.iter().flat_map(|b| b.equation_levels.iter().copied()))
    }
}

/// Role of an entry of `A` below the diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryRole {
    FreeQ,
    FreeD,
    QVar { level: usize },
    DVar { level: usize },
}

/// Classifies every strictly-lower entry; `roles[i − 1][j − 1]` for `j < i`.
pub fn entry_roles(layout: &StageLayout) -> Vec<Vec<Option<EntryRole>>> {
    let s = layout.s;
    let mut roles = vec![vec![None; s]; s];
    for (i, j) in layout.free_q_entries() {
        roles[i - 1][j - 1] = Some(EntryRole::FreeQ);
    }
    for (i, j) in layout.free_d_entries() {
        roles[i - 1][j - 1] = Some(EntryRole::FreeD);
    }
    for k in 1..=layout.n {
        for r in layout.d_level_rows(k) {
            for col in layout.l + 2..=layout.d_level_last_col(k) {
                roles[r - 1][col - 1] = Some(EntryRole::DVar { level: k });
            }
        }
    }
    for row in 2..=s {
        for k in 1..=layout.m.max(1) {
            if row < k * (k - 1) / 2 + 2 {
                break;
            }
            let cols: Vec<usize> = if k == 1 { vec![1] } else { layout.q_groups[k - 2].clone() };
            for col in cols {
                roles[row - 1][col - 1] = Some(EntryRole::QVar { level: k });
            }
        }
    }
    roles
}

fn initial_matrix(layout: &StageLayout, fp: &FreeParameters, prec: u32) -> Vec<Vec<Float>> {
    let s = layout.s;
    let mut values = vec![vec![Float::new(prec); s]; s];
    for (&(i, j), v) in fp.free_a_q.iter().chain(&fp.free_a_d) {
        values[i - 1][j - 1] = Float::with_val(prec, v);
    }
    values
}

fn assemble(
    kind: SystemKind,
    variable_groups: Vec<(usize, Vec<((usize, usize), usize)>, Vec<Equation>)>,
    known: &[Vec<Float>],
    s: usize,
    prec: u32,
) -> Result<BlockSystem, ConstructionError> {
    let mut var_index: Vec<Vec<Option<usize>>> = vec![vec![None; s]; s];
    let mut variable_order = Vec::new();
    for (anchor, vars, eqs) in &variable_groups {
        if vars.len() != eqs.len() {
            return Err(ConstructionError::Bookkeeping {
                kind,
                detail: format!("block at {anchor}: {} unknowns, {} equations", vars.len(), eqs.len()),
            });
        }
        for &((i, j), _) in vars {
            if var_index[i - 1][j - 1].is_some() {
                return Err(ConstructionError::Bookkeeping {
                    kind,
                    detail: format!("a{i},{j} is an unknown of two blocks"),
                });
            }
            var_index[i - 1][j - 1] = Some(variable_order.len());
            variable_order.push((i, j));
        }
    }
    let mut blocks = Vec::with_capacity(variable_groups.len());
    let mut start = 0;
    for (anchor, vars, eqs) in variable_groups {
        let range = start..start + vars.len();
        start = range.end;
        let mut matrix = DenseMatrix::zeros(eqs.len(), vars.len(), prec);
        let mut rhs = Vec::with_capacity(eqs.len());
        let mut coupling = Vec::new();
        for (e, eq) in eqs.iter().enumerate() {
            let mut r = Float::with_val(prec, &eq.rhs);
            for (i, j, coeff) in &eq.terms {
                match var_index[i - 1][j - 1] {
                    Some(g) if range.contains(&g) => {
                        *matrix.get_mut(e, g - range.start) += coeff;
                    }
                    Some(g) if g < range.start => coupling.push((e, g, coeff.clone())),
                    Some(_) => {
                        return Err(ConstructionError::Bookkeeping {
                            kind,
                            detail: format!("block at {anchor} references later unknown a{i},{j}"),
                        })
                    }
                    None => r -= Float::with_val(prec, coeff * &known[i - 1][j - 1]),
                }
            }
            rhs.push(r);
        }
        blocks.push(Block {
            variables: range,
            matrix,
            rhs,
            coupling,
            variable_levels: vars.iter().map(|v| v.1).collect(),
            equation_levels: eqs.iter().map(|e| e.level).collect(),
            anchor,
        });
    }
    Ok(BlockSystem {
        kind,
        variable_order,
        blocks,
    })
}

/// Assembles the D-system. `a_known` holds the free D entries; no Q-region
/// entry is referenced.
pub fn assemble_d_system(
    layout: &StageLayout,
    b: &[Float],
    c: &[Float],
    fp: &FreeParameters,
) -> Result<BlockSystem, ConstructionError> {
    let prec = c[0].prec();
    let s = layout.s;
    let known = initial_matrix(layout, fp, prec);
    let first_d_col = layout.l + layout.big_n;
    let mut groups = Vec::new();

    for col in (layout.l + 2..s).rev() {
        // test vector: unit vector on non-ghost columns, cluster indicator on ghosts
        let test: Vec<usize> = if col >= first_d_col {
            vec![col]
        } else {
            layout.clusters[col - layout.l - 2].clone()
        };
        let levels: Vec<usize> = (1..=layout.n).filter(|&k| col <= layout.d_level_last_col(k)).collect();

        let mut vars = Vec::new();
        for &k in &levels {
            let mut rows = layout.d_level_rows(k);
            rows.reverse();
            vars.extend(rows.into_iter().map(|r| ((r, col), k)));
        }

        let mut eqs = Vec::new();
        for &k in &levels {
            // d_{k−1} · v = 0
            let mut terms = Vec::new();
            let mut rhs = Float::new(prec);
            for &j in &test {
                for i in j + 1..=s {
                    let ck = Float::with_val(prec, (&c[i - 1]).pow((k - 1) as u32));
                    let coeff = Float::with_val(prec, &b[i - 1] * ck);
                    if !coeff.is_zero() {
                        terms.push((i, j, coeff));
                    }
                }
                let ck = Float::with_val(prec, (&c[j - 1]).pow(k as u32));
                let tail = (Float::with_val(prec, 1) - ck) / k as u32;
                rhs += Float::with_val(prec, &b[j - 1] * tail);
            }
            eqs.push(Equation { terms, rhs, level: k });
            // ε_{k−2,t}ᵀ A v = 0
            for t in 1..k.saturating_sub(1) {
                let top = layout.d_pos(k - 2, t);
                let ghost = layout.ghosts[t - 1];
                let mut terms = Vec::new();
                for &j in &test {
                    if top > j {
                        terms.push((top, j, Float::with_val(prec, 1)));
                    }
                    if ghost > j {
                        terms.push((ghost, j, Float::with_val(prec, -1)));
                    }
                }
                eqs.push(Equation {
                    terms,
                    rhs: Float::new(prec),
                    level: k,
                });
            }
        }
        groups.push((col, vars, eqs));
    }
    assemble(SystemKind::D, groups, &known, s, prec)
}

/// Assembles the Q-system; `a_partial` must already hold the D-region and
/// free entries.
pub fn assemble_q_system(
    layout: &StageLayout,
    c: &[Float],
    a_partial: &DenseMatrix,
) -> Result<BlockSystem, ConstructionError> {
    let prec = c[0].prec();
    let s = layout.s;
    let known = a_partial.to_rows();
    let mut groups = Vec::new();
    for row in 2..=s {
        let levels: Vec<usize> = (1..=layout.m.max(1)).take_while(|&k| row >= k * (k - 1) / 2 + 2).collect();
        let mut vars = Vec::new();
        for &k in &levels {
            let cols: Vec<usize> = if k == 1 { vec![1] } else { layout.q_groups[k - 2].clone() };
            vars.extend(cols.into_iter().map(|col| ((row, col), k)));
        }
        let mut eqs = Vec::new();
        for &k in &levels {
            // q_{k−1}[row] = 0
            let terms = (1..row)
                .map(|j| (row, j, Float::with_val(prec, (&c[j - 1]).pow((k - 1) as u32))))
                .filter(|t| !t.2.is_zero())
                .collect();
            let rhs = Float::with_val(prec, (&c[row - 1]).pow(k as u32)) / k as u32;
            eqs.push(Equation { terms, rhs, level: k });
            if k >= 3 {
                for &j in &layout.q_groups[k - 3] {
                    eqs.push(Equation {
                        terms: vec![(row, j, Float::with_val(prec, 1))],
                        rhs: Float::new(prec),
                        level: k,
                    });
                }
            }
        }
        groups.push((row, vars, eqs));
    }
    assemble(SystemKind::Q, groups, &known, s, prec)
}

/// Solution of a block system, aligned with `variable_order`.
#[derive(Clone, Debug)]
pub struct BlockSolution {
    pub kind: SystemKind,
    pub entries: Vec<((usize, usize), Float)>,
}

impl BlockSolution {
    pub fn apply(&self, a: &mut DenseMatrix) {
        for ((i, j), v) in &self.entries {
            a.set(i - 1, j - 1, v.clone());
        }
    }
}

/// Removes equations with a single nonzero coefficient, fixing their unknown directly. Returns the fixed local indices and values
/// plus the reduced matrix, right-hand side and surviving local indices.
fn pre_eliminate(
    matrix: &DenseMatrix,
    rhs: &[Float],
) -> (Vec<(usize, Float)>, DenseMatrix, DenseVector, Vec<usize>) {
    let n = rhs.len();
    let prec = rhs.first().map_or(64, Float::prec);
    let mut fixed = Vec::new();
    let mut eq_alive = vec![true; n];
    let mut var_alive = vec![true; n];
    let mut rhs: Vec<Float> = rhs.to_vec();
    loop {
        let mut changed = false;
        for e in 0..n {
            if !eq_alive[e] {
                continue;
            }
            let nz: Vec<usize> = (0..n).filter(|&v| var_alive[v] && !matrix.get(e, v).is_zero()).collect();
            if nz.len() != 1 {
                continue;
            }
            let v = nz[0];
            let value = Float::with_val(prec, &rhs[e] / matrix.get(e, v));
            for (f, r) in rhs.iter_mut().enumerate() {
                if eq_alive[f] && f != e && !matrix.get(f, v).is_zero() {
                    *r -= Float::with_val(prec, matrix.get(f, v) * &value);
                }
            }
            eq_alive[e] = false;
            var_alive[v] = false;
            fixed.push((v, value));
            changed = true;
        }
        if !changed {
            break;
        }
    }
    let eqs: Vec<usize> = (0..n).filter(|&e| eq_alive[e]).collect();
    let vars: Vec<usize> = (0..n).filter(|&v| var_alive[v]).collect();
    let rows = eqs
        .iter()
        .map(|&e| vars.iter().map(|&v| matrix.get(e, v).clone()).collect())
        .collect();
    let reduced = if eqs.is_empty() {
        DenseMatrix::zeros(0, 0, prec)
    } else {
        DenseMatrix::from_rows(rows).expect("rectangular")
    };
    let r = eqs.iter().map(|&e| rhs[e].clone()).collect();
    (fixed, reduced, r, vars)
}

/// Solves the blocks in order, moving earlier solutions into later
/// right-hand sides. Q blocks are pre-eliminated first.
pub fn solve_block_system(sys: &BlockSystem) -> Result<BlockSolution, ConstructionError> {
    let prec = sys
        .blocks
        .iter()
        .find_map(|b| b.rhs.first().map(Float::prec))
        .unwrap_or(crate::DEFAULT_PRECISION);
    let mut x: Vec<Option<Float>> = vec![None; sys.variable_count()];
    for (bi, block) in sys.blocks.iter().enumerate() {
        let mut rhs = block.rhs.clone();
        for (e, g, coeff) in &block.coupling {
            let xv = x[*g].as_ref().ok_or_else(|| ConstructionError::Bookkeeping {
                kind: sys.kind,
                detail: format!("block {bi} needs unsolved {:?}", sys.variable_order[*g]),
            })?;
            rhs[*e] -= Float::with_val(prec, coeff * xv);
        }
        let singular = |e: NumericsError| match e {
            NumericsError::Singular { .. } => ConstructionError::SingularBlock {
                kind: sys.kind,
                block: bi,
                level: block.variable_levels.iter().copied().max().unwrap_or(0),
                anchor: match sys.kind {
                    SystemKind::D => format!("column {}", block.anchor),
                    SystemKind::Q => format!("row {}", block.anchor),
                },
            },
            other => ConstructionError::Numerics(other),
        };
        let local = if sys.kind == SystemKind::Q {
            let (fixed, m, r, vars) = pre_eliminate(&block.matrix, &rhs);
            let sol = solve_dense(&m, &r).map_err(singular)?;
            let mut local = vec![Float::new(prec); rhs.len()];
            for (v, val) in fixed {
                local[v] = val;
            }
            for (v, val) in vars.into_iter().zip(sol) {
                local[v] = val;
            }
            local
        } else {
            solve_dense(&block.matrix, &rhs).map_err(singular)?
        };
        for (k, val) in local.into_iter().enumerate() {
            x[block.variables.start + k] = Some(val);
        }
    }
    Ok(BlockSolution {
        kind: sys.kind,
        entries: sys
            .variable_order
            .iter()
            .zip(x)
            .map(|(&ij, v)| (ij, v.expect("every block solved")))
            .collect(),
    })
}

pub fn solve_d_system(sys: &BlockSystem) -> Result<BlockSolution, ConstructionError> {
    solve_block_system(sys)
}

pub fn solve_q_system(sys: &BlockSystem) -> Result<BlockSolution, ConstructionError> {
    solve_block_system(sys)
}

/// `b̃ = b + d₁`.
pub fn embedded_weights(t: &ButcherTableau) -> DenseVector {
    let d1 = d_vector(t, 1, t.b());
    crate::numerics::add(t.b(), &d1)
}

/// Everything produced while building one tableau.
#[derive(Clone, Debug)]
pub struct Construction {
    pub layout: StageLayout,
    pub tableau: ButcherTableau,
    pub d_system: BlockSystem,
    pub q_system: BlockSystem,
}

/// Extra working precision for the construction solves.
pub const GUARD_BITS: u32 = 64;

/// Builds the order-`p` tableau for the given free parameters.
pub fn construct(p: usize, fp: &FreeParameters, prec: u32) -> Result<ButcherTableau, ConstructionError> {
    Ok(construct_detailed(p, fp, prec)?.tableau)
}

/// [`construct`] keeping the layout and both assembled systems.
///
/// The systems are solved with [`GUARD_BITS`] extra bits and the tableau is
/// rounded once to `prec`, so entries come out correctly rounded.
pub fn construct_detailed(p: usize, fp: &FreeParameters, prec: u32) -> Result<Construction, ConstructionError> {
    let layout = plan_layout(p)?;
    let work = prec + GUARD_BITS;
    let rule = lobatto_for(&layout, work)?;
    let fp = round_params(fp, work);
    validate_free_parameters(&layout, &fp, &rule)?;
    let c = stage_nodes(&layout, &fp, &rule);
    let b = stage_weights(&layout, &fp, &rule);

    let d_system = assemble_d_system(&layout, &b, &c, &fp)?;
    let d_sol = solve_d_system(&d_system)?;
    let mut a = DenseMatrix::from_rows(initial_matrix(&layout, &fp, work))?;
    d_sol.apply(&mut a);

    let q_system = assemble_q_system(&layout, &c, &a)?;
    let q_sol = solve_q_system(&q_system)?;
    q_sol.apply(&mut a);

    let t = ButcherTableau::new(c, b, a, None, Some(p))?;
    let be = embedded_weights(&t);
    let tableau = t.with_embedded(be)?.with_precision(prec);
    Ok(Construction {
        layout,
        tableau,
        d_system,
        q_system,
    })
}

fn round_params(fp: &FreeParameters, prec: u32) -> FreeParameters {
    let r = |x: &Float| Float::with_val(prec, x);
    FreeParameters {
        q_nodes: fp.q_nodes.iter().map(r).collect(),
        cluster_splits: fp.cluster_splits.iter().map(|c| c.iter().map(r).collect()).collect(),
        free_a_q: fp.free_a_q.iter().map(|(k, v)| (*k, r(v))).collect(),
        free_a_d: fp.free_a_d.iter().map(|(k, v)| (*k, r(v))).collect(),
    }
}

/// [`construct`] with [`default_free_parameters`].
pub fn construct_default(p: usize, prec: u32) -> Result<ButcherTableau, ConstructionError> {
    let layout = plan_layout(p)?;
    construct(p, &default_free_parameters(&layout, prec + GUARD_BITS), prec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p10_layout_positions() {
        let l = plan_layout(10).unwrap();
        assert_eq!((l.l, l.s2, l.s), (6, 15, 22));
        assert_eq!(l.ghosts, vec![8, 9, 10, 11]);
        assert_eq!(l.d_groups[3], vec![12, 13, 14, 15]);
        assert_eq!(l.d_groups[0], vec![21]);
        assert_eq!(l.clusters[3], vec![11, 15]);
    }

    #[test]
    fn p8_free_d_entries() {
        let l = plan_layout(8).unwrap();
        assert_eq!(
            l.free_d_entries(),
            vec![(6, 5), (7, 5), (7, 6), (9, 8), (10, 8), (10, 9), (12, 11)]
        );
        assert_eq!(l.free_q_entries(), vec![(4, 3)]);
    }
}
