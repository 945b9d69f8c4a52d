//! Flat encoding of the free parameters, the composite fitness, and a
//! seeded CMA-ES minimizer.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rug::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constructor::{
    construct, construct_default, default_free_parameters, lobatto_for, plan_layout, ConstructionError, FreeParameters,
    StageLayout,
};
use crate::stability::{stability_polynomial, stability_report, StabilityReport, DEFAULT_PROXY_LINES};
use crate::tableau::ButcherTableau;
use crate::trees::{default_tolerance, principal_error_norm_with, verify_with_forest, Forest};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Construction(#[from] ConstructionError),
    #[error("winner fails order {order} verification up to {precision} bits")]
    Verification { order: usize, precision: u32 },
}

/// Flat parameter vector with its field map.
///
/// Order: free nodes `c₂ … c_{l+1}`; per cluster, the weights of every
/// member after the ghost (the ghost takes the remainder of the cluster
/// weight); free Q entries; free D entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout_map: Vec<ParameterSlot>,
}

/// What one entry of a [`ParameterVector`] stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParameterSlot {
    Node(usize),
    Weight { cluster: usize, member: usize },
    FreeQ(usize, usize),
    FreeD(usize, usize),
}

pub fn parameter_slots(layout: &StageLayout) -> Vec<ParameterSlot> {
    let mut out: Vec<ParameterSlot> = (2..=layout.l + 1).map(ParameterSlot::Node).collect();
    for (i, members) in layout.clusters.iter().enumerate() {
        out.extend((1..members.len()).map(|k| ParameterSlot::Weight { cluster: i, member: k }));
    }
    out.extend(layout.free_q_entries().into_iter().map(|(i, j)| ParameterSlot::FreeQ(i, j)));
    out.extend(layout.free_d_entries().into_iter().map(|(i, j)| ParameterSlot::FreeD(i, j)));
    out
}

pub fn encode(layout: &StageLayout, fp: &FreeParameters) -> ParameterVector {
    let slots = parameter_slots(layout);
    let values = slots
        .iter()
        .map(|slot| match *slot {
            ParameterSlot::Node(k) => fp.q_nodes[k - 2].to_f64(),
            ParameterSlot::Weight { cluster, member } => fp.cluster_splits[cluster][member].to_f64(),
            ParameterSlot::FreeQ(i, j) => fp.free_a_q.get(&(i, j)).map_or(0.0, Float::to_f64),
            ParameterSlot::FreeD(i, j) => fp.free_a_d.get(&(i, j)).map_or(0.0, Float::to_f64),
        })
        .collect();
    ParameterVector {
        values,
        layout_map: slots,
    }
}

/// Inverse of [`encode`]; ghost weights absorb the remainder of each
/// cluster's quadrature weight.
pub fn decode(layout: &StageLayout, values: &[f64], prec: u32) -> Result<FreeParameters, OptimizerError> {
    let slots = parameter_slots(layout);
    if values.len() != slots.len() {
        return Err(OptimizerError::Length {
            expected: slots.len(),
            got: values.len(),
        });
    }
    let rule = lobatto_for(layout, prec)?;
    let mut fp = FreeParameters {
        q_nodes: vec![Float::new(prec); layout.l],
        cluster_splits: layout.clusters.iter().map(|c| vec![Float::new(prec); c.len()]).collect(),
        free_a_q: BTreeMap::new(),
        free_a_d: BTreeMap::new(),
    };
    for (slot, &v) in slots.iter().zip(values) {
        let x = Float::with_val(prec, v);
        match *slot {
            ParameterSlot::Node(k) => fp.q_nodes[k - 2] = x,
            ParameterSlot::Weight { cluster, member } => fp.cluster_splits[cluster][member] = x,
            ParameterSlot::FreeQ(i, j) => {
                fp.free_a_q.insert((i, j), x);
            }
            ParameterSlot::FreeD(i, j) => {
                fp.free_a_d.insert((i, j), x);
            }
        }
    }
    for (i, split) in fp.cluster_splits.iter_mut().enumerate() {
        let rest = split[1..].iter().fold(Float::new(prec), |acc, x| acc + x);
        split[0] = Float::with_val(prec, &rule.weights[layout.big_n - (i + 1) - 1] - rest);
    }
    Ok(fp)
}

/// Reads the free parameters back out of a tableau with the given layout.
pub fn extract_free_parameters(layout: &StageLayout, t: &ButcherTableau) -> FreeParameters {
    let prec = t.precision_bits();
    let get = |i: usize, j: usize| Float::with_val(prec, t.a().get(i - 1, j - 1));
    FreeParameters {
        q_nodes: (2..=layout.l + 1).map(|k| t.c()[k - 1].clone()).collect(),
        cluster_splits: layout
            .clusters
            .iter()
            .map(|members| members.iter().map(|&k| t.b()[k - 1].clone()).collect())
            .collect(),
        free_a_q: layout.free_q_entries().into_iter().map(|(i, j)| ((i, j), get(i, j))).collect(),
        free_a_d: layout.free_d_entries().into_iter().map(|(i, j)| ((i, j), get(i, j))).collect(),
    }
}

/// Fitness weights and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitnessConfig {
    pub w_err: f64,
    pub w_stab: f64,
    pub w_area: f64,
    pub w_interval: f64,
    pub w_convex: f64,
    pub proxy_lines: usize,
    pub precision: u32,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        FitnessConfig {
            w_err: 1.0,
            w_stab: 1.0,
            w_area: 1.0,
            w_interval: 1.0,
            w_convex: 10.0,
            proxy_lines: DEFAULT_PROXY_LINES,
            precision: 128,
        }
    }
}

impl FitnessConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let ws = [self.w_err, self.w_stab, self.w_area, self.w_interval, self.w_convex];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OptimizerError::Config("weights must be finite and nonnegative".into()));
        }
        if self.w_err == 0.0 && self.w_stab == 0.0 {
            return Err(OptimizerError::Config("w_err and w_stab are both zero".into()));
        }
        if self.proxy_lines < 2 {
            return Err(OptimizerError::Config("proxy_lines must be at least 2".into()));
        }
        Ok(())
    }
}

/// Base value returned for infeasible parameters.
pub const INFEASIBLE_PENALTY: f64 = 1e6;
/// Lower clamp of `J_err`.
pub const J_ERR_FLOOR: f64 = -1e12;
const NODE_GAP: f64 = 1e-3;

/// Terms of one fitness evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FitnessBreakdown {
    pub total: f64,
    pub error_norm: f64,
    pub j_err: f64,
    pub j_stab: f64,
    pub stability: Option<(f64, f64, f64)>,
}

/// Evaluates tableaux of a fixed order; holds the tree forest between calls.
pub struct FitnessEvaluator {
    pub p: usize,
    pub cfg: FitnessConfig,
    layout: StageLayout,
    forest: Forest,
}

impl FitnessEvaluator {
    pub fn new(p: usize, cfg: FitnessConfig) -> Result<Self, OptimizerError> {
        cfg.validate()?;
        Ok(FitnessEvaluator {
            p,
            layout: plan_layout(p)?,
            forest: Forest::new(p + 1),
            cfg,
        })
    }

    pub fn layout(&self) -> &StageLayout {
        &self.layout
    }

    /// `J = w_err J_err + w_stab J_stab`, with
    /// `J_err = −1/‖τ^(p+1)‖₂` and
    /// `J_stab = −w_area S − w_interval L + w_convex P`.
    pub fn of_tableau(&self, t: &ButcherTableau) -> FitnessBreakdown {
        let norm = principal_error_norm_with(t, &self.forest, self.p).to_f64();
        let j_err = if norm > 0.0 { (-1.0 / norm).max(J_ERR_FLOOR) } else { J_ERR_FLOOR };
        let (j_stab, stability) = if self.cfg.w_stab > 0.0 {
            let r = stability_report(&stability_polynomial(t), self.cfg.proxy_lines);
            let j = -self.cfg.w_area * r.area_proxy - self.cfg.w_interval * r.real_interval_length
                + self.cfg.w_convex * r.convexity_penalty;
            (j, Some((r.area_proxy, r.real_interval_length, r.convexity_penalty)))
        } else {
            (0.0, None)
        };
        FitnessBreakdown {
            total: self.cfg.w_err * j_err + self.cfg.w_stab * j_stab,
            error_norm: norm,
            j_err,
            j_stab,
            stability,
        }
    }

    /// Fitness of a flat parameter vector; infeasible vectors get
    /// [`INFEASIBLE_PENALTY`] plus their node-gap and weight shortfalls.
    pub fn evaluate(&self, values: &[f64]) -> f64 {
        let fp = match decode(&self.layout, values, self.cfg.precision) {
            Ok(fp) => fp,
            Err(_) => return INFEASIBLE_PENALTY * 10.0,
        };
        match construct(self.p, &fp, self.cfg.precision) {
            Ok(t) => {
                let f = self.of_tableau(&t).total;
                if f.is_finite() {
                    f
                } else {
                    INFEASIBLE_PENALTY
                }
            }
            Err(_) => INFEASIBLE_PENALTY + infeasibility(&self.layout, &fp),
        }
    }
}

fn infeasibility(layout: &StageLayout, fp: &FreeParameters) -> f64 {
    let mut short = 0.0;
    for grp in &layout.q_groups {
        for (a, &i) in grp.iter().enumerate() {
            let ci = fp.q_nodes[i - 2].to_f64();
            short += (NODE_GAP - ci.abs()).max(0.0);
            for &j in &grp[..a] {
                short += (NODE_GAP - (ci - fp.q_nodes[j - 2].to_f64()).abs()).max(0.0);
            }
        }
    }
    for split in &fp.cluster_splits {
        short += split.iter().map(|w| (NODE_GAP - w.to_f64().abs()).max(0.0)).sum::<f64>();
    }
    short
}

/// CMA-ES settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaConfig {
    pub sigma0: f64,
    pub generations: usize,
    /// Population size; `4 + ⌊3 ln n⌋` when absent.
    pub lambda: Option<usize>,
    pub seed: u64,
}

/// One generation of the search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_in_generation: f64,
    pub best_so_far: f64,
    pub sigma: f64,
}

/// State of the search after the last generation.
#[derive(Clone, Debug)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub covariance: DMatrix<f64>,
    pub path_sigma: DVector<f64>,
    pub path_c: DVector<f64>,
    pub generation: usize,
    pub best: (Vec<f64>, f64),
}

/// Result of [`cma_es_minimize`].
#[derive(Clone, Debug)]
pub struct CmaResult {
    pub best_params: Vec<f64>,
    pub best_fitness: f64,
    pub history: Vec<GenerationRecord>,
    pub state: CmaState,
}

/// `(μ/μ_w, λ)` CMA-ES with cumulative step-size adaptation and rank-one
/// plus rank-μ covariance updates. The starting point counts as the first
/// best-so-far.
pub fn cma_es_minimize<F>(f: F, x0: &[f64], cfg: &CmaConfig) -> Result<CmaResult, OptimizerError>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(OptimizerError::Config("empty parameter vector".into()));
    }
    if cfg.generations == 0 {
        return Err(OptimizerError::Config("budget must be at least one generation".into()));
    }
    if !(cfg.sigma0.is_finite() && cfg.sigma0 > 0.0) {
        return Err(OptimizerError::Config("sigma0 must be positive".into()));
    }
    let nf = n as f64;
    let lambda = cfg.lambda.unwrap_or(4 + (3.0 * nf.ln()).floor() as usize);
    if lambda < 2 {
        return Err(OptimizerError::Config(format!("population {lambda} is below 2")));
    }
    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu)
        .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
        .collect();
    let wsum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mean = DVector::from_column_slice(x0);
    let mut sigma = cfg.sigma0;
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut p_sigma = DVector::<f64>::zeros(n);
    let mut p_c = DVector::<f64>::zeros(n);
    let f0 = f(x0);
    let mut best = (x0.to_vec(), f0);
    let mut history = Vec::with_capacity(cfg.generations);

    for generation in 1..=cfg.generations {
        let (basis, scales) = decompose(&cov);
        let mut pop: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let z = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let y = &basis * z.component_mul(&scales);
            let x = &mean + sigma * &y;
            let fx = f(x.as_slice());
            pop.push((x, y, fx));
        }
        pop.sort_by(|a, b| a.2.total_cmp(&b.2));
        if pop[0].2 < best.1 {
            best = (pop[0].0.as_slice().to_vec(), pop[0].2);
        }

        let y_w = pop[..mu]
            .iter()
            .zip(&weights)
            .fold(DVector::<f64>::zeros(n), |acc, ((_, y, _), w)| acc + *w * y);
        mean += sigma * &y_w;

        let inv_sqrt = &basis * DMatrix::from_diagonal(&scales.map(|d| 1.0 / d)) * basis.transpose();
        p_sigma = (1.0 - c_sigma) * &p_sigma + (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt() * (&inv_sqrt * &y_w);
        let ps_norm = p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - c_sigma).powi(2 * generation as i32)).sqrt() / chi_n
            < 1.4 + 2.0 / (nf + 1.0);
        let h = if h_sigma { 1.0 } else { 0.0 };
        p_c = (1.0 - c_c) * &p_c + h * (c_c * (2.0 - c_c) * mu_eff).sqrt() * &y_w;

        let rank_mu = pop[..mu]
            .iter()
            .zip(&weights)
            .fold(DMatrix::<f64>::zeros(n, n), |acc, ((_, y, _), w)| acc + *w * y * y.transpose());
        let delta_h = (1.0 - h) * c_c * (2.0 - c_c);
        cov = (1.0 - c_1 - c_mu) * &cov + c_1 * (&p_c * p_c.transpose() + delta_h * &cov) + c_mu * rank_mu;
        cov = 0.5 * (&cov + cov.transpose());

        sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();

        history.push(GenerationRecord {
            generation,
            best_in_generation: pop[0].2,
            best_so_far: best.1,
            sigma,
        });
    }

    Ok(CmaResult {
        best_params: best.0.clone(),
        best_fitness: best.1,
        history,
        state: CmaState {
            mean,
            sigma,
            covariance: cov,
            path_sigma: p_sigma,
            path_c: p_c,
            generation: cfg.generations,
            best,
        },
    })
}

/// Eigenbasis and square-rooted eigenvalues, floored to keep `C` positive
/// definite.
fn decompose(cov: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let floor = top * 1e-14;
    let scales = eig.eigenvalues.map(|v| v.max(floor).sqrt());
    (eig.eigenvectors, scales)
}

/// Settings for [`optimize_method`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub fitness: FitnessConfig,
    pub sigma0: f64,
    pub lambda: Option<usize>,
    /// Bits for the final re-verification; doubled on failure up to 1024.
    pub verify_precision: u32,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            fitness: FitnessConfig::default(),
            sigma0: 0.02,
            lambda: None,
            verify_precision: 256,
        }
    }
}

/// Outcome of [`optimize_method`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub order: usize,
    pub seed: u64,
    pub generations: usize,
    pub config: OptimizeConfig,
    pub parameters: Vec<f64>,
    pub baseline_fitness: f64,
    pub best_fitness: f64,
    pub history: Vec<GenerationRecord>,
    pub error_norm: f64,
    pub baseline_error_norm: f64,
    pub real_interval_length: f64,
    pub baseline_real_interval_length: f64,
    pub area_proxy: f64,
    pub convexity_penalty: f64,
    pub verified_precision: u32,
}

fn metrics(t: &ButcherTableau, lines: usize) -> StabilityReport {
    stability_report(&stability_polynomial(t), lines)
}

/// Minimizes the fitness over the free parameters of the order-`p`
/// construction from the defaults, then rebuilds and re-verifies the winner.
pub fn optimize_method(
    p: usize,
    cfg: &OptimizeConfig,
    generations: usize,
    seed: u64,
) -> Result<(ButcherTableau, OptimizationReport), OptimizerError> {
    if p < 6 || p % 2 == 1 {
        return Err(OptimizerError::Config(format!("order must be even and at least 6, got {p}")));
    }
    let eval = FitnessEvaluator::new(p, cfg.fitness.clone())?;
    let layout = eval.layout().clone();
    let x0 = encode(&layout, &default_free_parameters(&layout, cfg.fitness.precision)).values;
    let result = cma_es_minimize(
        |x| eval.evaluate(x),
        &x0,
        &CmaConfig {
            sigma0: cfg.sigma0,
            generations,
            lambda: cfg.lambda,
            seed,
        },
    )?;

    let mut prec = cfg.verify_precision.max(64);
    let winner = loop {
        let fp = decode(&layout, &result.best_params, prec)?;
        let t = construct(p, &fp, prec)?;
        let forest = Forest::new(p);
        let rep = verify_with_forest(&t, &forest, t.b(), &default_tolerance(prec));
        if rep.order_verified >= p {
            break t;
        }
        if prec >= 1024 {
            return Err(OptimizerError::Verification { order: p, precision: prec });
        }
        prec *= 2;
    };

    let baseline = construct_default(p, prec)?;
    let (wm, bm) = (metrics(&winner, cfg.fitness.proxy_lines), metrics(&baseline, cfg.fitness.proxy_lines));
    let err_forest = Forest::new(p + 1);
    let report = OptimizationReport {
        order: p,
        seed,
        generations,
        config: cfg.clone(),
        parameters: result.best_params.clone(),
        baseline_fitness: eval.evaluate(&x0),
        best_fitness: result.best_fitness,
        history: result.history,
        error_norm: principal_error_norm_with(&winner, &err_forest, p).to_f64(),
        baseline_error_norm: principal_error_norm_with(&baseline, &err_forest, p).to_f64(),
        real_interval_length: wm.real_interval_length,
        baseline_real_interval_length: bm.real_interval_length,
        area_proxy: wm.area_proxy,
        convexity_penalty: wm.convexity_penalty,
        verified_precision: prec,
    };
    Ok((winner, report))
}
