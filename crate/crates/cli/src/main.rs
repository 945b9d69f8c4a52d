//! `qd-erk` command-line tool.
//!
//! Exit codes: 0 success, 2 validation error, 3 infeasible construction,
//! 4 verification failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rug::Float;

use qd_erk::constructor::{construct_detailed, plan_layout, ConstructionError, FreeParametersDocument};
use qd_erk::integrator::{
    self, convergence_csv, integrate_adaptive, predictability_time, AdaptiveConfig, OdeProblem,
};
use qd_erk::numerics::{format_decimal, format_digits};
use qd_erk::optimizer::{optimize_method, OptimizeConfig, OptimizerError};
use qd_erk::stability::{region_csv, stability_polynomial, stability_report, DEFAULT_PROXY_LINES};
use qd_erk::tableau::{self, ButcherTableau};
use qd_erk::trees::{default_tolerance, verify_order};
use qd_erk::{fixtures, DEFAULT_PRECISION};

#[derive(Parser, Debug)]
#[command(name = "qd-erk", version, about = "Build, verify and use high-order explicit Runge-Kutta methods")]
struct Cli {
    /// Significant digits for numbers printed to standard output.
    #[arg(long, global = true)]
    digits: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Construct an order-P tableau and write it as JSON.
    Construct(ConstructArgs),
    /// Check order conditions of a tableau.
    Verify(VerifyArgs),
    /// Stability interval, area proxy and a region grid.
    Stability(StabilityArgs),
    /// Integrate a built-in problem.
    Integrate(IntegrateArgs),
    /// Global error on y' = -y over [0, 1] for a list of step sizes.
    Converge(ConvergeArgs),
    /// Lorenz predictability time.
    Predict(PredictArgs),
    /// Tune the free parameters with CMA-ES.
    Optimize(OptimizeArgs),
    /// Print the stage layout for an order.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct TableauArg {
    /// Tableau JSON file, or the name of a bundled fixture.
    #[arg(long)]
    tableau: String,
}

#[derive(Args, Debug)]
struct ConstructArgs {
    #[arg(long)]
    order: usize,
    /// Free-parameter JSON; omitted fields take defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    precision: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightChoice {
    Main,
    Embedded,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    tableau: TableauArg,
    #[arg(long)]
    max_order: usize,
    #[arg(long, value_enum, default_value = "main")]
    weights: WeightChoice,
    /// Residual tolerance; defaults to 2^(-precision/2).
    #[arg(long)]
    tol: Option<String>,
    /// Write per-tree residuals as CSV.
    #[arg(long)]
    residuals: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[command(flatten)]
    tableau: TableauArg,
    /// RE0,RE1,IM0,IM1,NX,NY
    #[arg(long, default_value = "-6,1,-4,4,101,101", allow_hyphen_values = true)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Write the traced left boundary as CSV (y, leftmost_x).
    #[arg(long)]
    boundary: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProblemChoice {
    Exp,
    Dahlquist,
    Lorenz,
}

#[derive(Args, Debug)]
struct IntegrateArgs {
    #[command(flatten)]
    tableau: TableauArg,
    #[arg(long, value_enum)]
    problem: ProblemChoice,
    /// RE,IM for the dahlquist problem.
    #[arg(long, default_value = "-1,0", allow_hyphen_values = true)]
    lambda: String,
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 1e-10)]
    atol: f64,
    #[arg(long, default_value_t = 1e-10)]
    rtol: f64,
    #[arg(long)]
    tf: f64,
    /// Fixed step, or the initial step with --adaptive; `2^-k` is accepted.
    #[arg(long)]
    h: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    #[command(flatten)]
    tableau: TableauArg,
    /// Comma-separated step sizes; `2^-k` is accepted.
    #[arg(long, default_value = "1,2^-1,2^-2,2^-3,2^-4")]
    h_list: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    tableau: TableauArg,
    #[arg(long, default_value = "2^-8")]
    h: String,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 40.0)]
    t_end: f64,
    /// Discrepancy history CSV (t, discrepancy).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[arg(long)]
    order: usize,
    #[arg(long)]
    budget: usize,
    #[arg(long)]
    seed: u64,
    /// JSON object overriding fields of the optimizer configuration.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Winner tableau JSON.
    #[arg(long)]
    out: PathBuf,
    /// Report JSON; defaults to OUT with a `.report.json` suffix.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    order: usize,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Infeasible(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Verification(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Infeasible(m) | Failure::Verification(m) => m,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

impl From<ConstructionError> for Failure {
    fn from(e: ConstructionError) -> Self {
        match e {
            ConstructionError::InvalidOrder(_) | ConstructionError::InvalidParameters(_) => invalid(e),
            _ => Failure::Infeasible(e.to_string()),
        }
    }
}

impl From<OptimizerError> for Failure {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::Construction(c) => c.into(),
            OptimizerError::Verification { .. } => Failure::Verification(e.to_string()),
            _ => invalid(e),
        }
    }
}

impl From<integrator::IntegrationError> for Failure {
    fn from(e: integrator::IntegrationError) -> Self {
        invalid(e)
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    digits: Option<usize>,
    precision: u32,
}

impl Ctx {
    fn num(&self, x: &Float) -> String {
        match self.digits {
            Some(d) => format_digits(x, d),
            None => format_decimal(x),
        }
    }

    fn f64(&self, x: f64) -> String {
        match self.digits {
            Some(d) => format!("{:.*e}", d.saturating_sub(1), x),
            None => format!("{x}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let precision = match std::env::var("QD_ERK_PRECISION") {
        Ok(v) => match v.trim().parse::<u32>() {
            Ok(p) if p >= 32 => p,
            _ => {
                eprintln!("error: QD_ERK_PRECISION must be an integer of at least 32, got '{v}'");
                return ExitCode::from(2);
            }
        },
        Err(_) => DEFAULT_PRECISION,
    };
    let ctx = Ctx {
        digits: cli.digits,
        precision,
    };
    let result = match cli.command {
        Command::Construct(a) => cmd_construct(&ctx, a),
        Command::Verify(a) => cmd_verify(&ctx, a),
        Command::Stability(a) => cmd_stability(&ctx, a),
        Command::Integrate(a) => cmd_integrate(&ctx, a),
        Command::Converge(a) => cmd_converge(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Optimize(a) => cmd_optimize(&ctx, a),
        Command::Info(a) => cmd_info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn write_output(path: &Path, text: &str) -> Outcome {
    if path.as_os_str() == "-" {
        print!("{text}");
        return Ok(());
    }
    std::fs::write(path, text).map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))
}

fn read_input(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

fn load_tableau(ctx: &Ctx, arg: &TableauArg) -> Result<ButcherTableau, Failure> {
    let path = Path::new(&arg.tableau);
    if !path.exists() {
        if let Some(t) = fixtures::by_name(&arg.tableau, ctx.precision) {
            return Ok(t);
        }
    }
    tableau::deserialize(&read_input(path)?).map_err(invalid)
}

/// Parses a step size: a decimal or `2^-k`.
fn parse_step(s: &str) -> Result<f64, Failure> {
    let s = s.trim();
    let v = match s.strip_prefix("2^") {
        Some(e) => e.parse::<i32>().map(|k| 2f64.powi(k)).map_err(invalid)?,
        None => s.parse::<f64>().map_err(invalid)?,
    };
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(format!("step size must be positive, got '{s}'")))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize, what: &str) -> Result<Vec<T>, Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(invalid(format!("{what} needs {n} comma-separated values, got '{s}'")));
    }
    parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|_| invalid(format!("bad {what} value '{p}'"))))
        .collect()
}

fn cmd_construct(ctx: &Ctx, a: ConstructArgs) -> Outcome {
    let prec = a.precision.unwrap_or(ctx.precision);
    if prec < 32 {
        return Err(invalid("precision must be at least 32 bits"));
    }
    let layout = plan_layout(a.order)?;
    let fp = match &a.params {
        Some(path) => {
            let doc: FreeParametersDocument = serde_json::from_str(&read_input(path)?).map_err(invalid)?;
            doc.resolve(&layout, prec)?
        }
        None => qd_erk::default_free_parameters(&layout, prec + qd_erk::constructor::GUARD_BITS),
    };
    let built = construct_detailed(a.order, &fp, prec)?;
    write_output(&a.out, &tableau::serialize(&built.tableau))?;
    eprintln!("constructed order {} with {} stages", a.order, built.tableau.stages());
    Ok(())
}

fn verified_order(t: &ButcherTableau, max_order: usize, weights: &[Float], tol: &Float) -> (usize, Float) {
    let rep = verify_order(t, max_order, weights, tol);
    (rep.order_verified, rep.max_abs_through(max_order))
}

fn cmd_verify(ctx: &Ctx, a: VerifyArgs) -> Outcome {
    if a.max_order == 0 {
        return Err(invalid("max-order must be positive"));
    }
    let t = load_tableau(ctx, &a.tableau)?;
    let prec = t.precision_bits();
    let tol = match &a.tol {
        Some(s) => qd_erk::numerics::parse_decimal(s, prec).map_err(invalid)?,
        None => default_tolerance(prec),
    };
    let embedded = t
        .b_embedded()
        .map(<[Float]>::to_vec)
        .unwrap_or_else(|| qd_erk::constructor::embedded_weights(&t));
    let (weights, label) = match a.weights {
        WeightChoice::Main => (t.b().to_vec(), "order"),
        WeightChoice::Embedded => (embedded.clone(), "embedded_order"),
    };
    let rep = verify_order(&t, a.max_order, &weights, &tol);
    let mut out = String::new();
    let _ = writeln!(out, "stages {}", t.stages());
    let _ = writeln!(out, "{label} {}", rep.order_verified);
    if matches!(a.weights, WeightChoice::Main) {
        let (eo, _) = verified_order(&t, a.max_order, &embedded, &tol);
        let _ = writeln!(out, "embedded_order {eo}");
    }
    for (k, r) in rep.max_abs_residual_per_order.iter().enumerate() {
        let _ = writeln!(out, "max_residual_order_{} {}", k + 1, ctx.num(r));
    }
    print!("{out}");
    if let Some(path) = &a.residuals {
        write_output(path, &rep.to_csv())?;
    }
    let expected = match a.weights {
        WeightChoice::Main => t.claimed_order(),
        WeightChoice::Embedded => t.claimed_order().map(|p| p.saturating_sub(2)),
    };
    match expected {
        Some(p) if rep.order_verified < p.min(a.max_order) => Err(Failure::Verification(format!(
            "claimed {label} {p}, verified {}",
            rep.order_verified
        ))),
        _ => Ok(()),
    }
}

fn cmd_stability(ctx: &Ctx, a: StabilityArgs) -> Outcome {
    let t = load_tableau(ctx, &a.tableau)?;
    let g: Vec<f64> = parse_list(&a.grid, 6, "grid")?;
    let (nx, ny) = (g[4] as usize, g[5] as usize);
    if nx < 1 || ny < 1 || g[4].fract() != 0.0 || g[5].fract() != 0.0 || g[0] >= g[1] || g[2] >= g[3] {
        return Err(invalid(format!("bad grid '{}'", a.grid)));
    }
    let poly = stability_polynomial(&t);
    let rep = stability_report(&poly, DEFAULT_PROXY_LINES);
    write_output(&a.out, &region_csv(&poly, (g[0], g[1]), (g[2], g[3]), nx, ny))?;
    if let Some(path) = &a.boundary {
        let mut csv = String::from("y,leftmost_x\n");
        for (y, x) in &rep.boundary_samples {
            let _ = writeln!(csv, "{y},{x}");
        }
        write_output(path, &csv)?;
    }
    println!("real_interval_length {}", ctx.f64(rep.real_interval_length));
    println!("area_proxy {}", ctx.f64(rep.area_proxy));
    println!("convexity_penalty {}", ctx.f64(rep.convexity_penalty));
    let coeffs: Vec<String> = poly.coefficients.iter().map(|c| ctx.num(c)).collect();
    println!("coefficients {}", coeffs.join(","));
    Ok(())
}

fn cmd_integrate(ctx: &Ctx, a: IntegrateArgs) -> Outcome {
    let t = load_tableau(ctx, &a.tableau)?;
    if !(a.tf.is_finite() && a.tf > 0.0) {
        return Err(invalid("tf must be positive"));
    }
    let h = parse_step(&a.h)?;
    let prec = t.precision_bits();
    let problem = match a.problem {
        ProblemChoice::Exp => OdeProblem::exp_decay(a.tf, prec),
        ProblemChoice::Lorenz => OdeProblem::lorenz(a.tf, prec),
        ProblemChoice::Dahlquist => {
            let l: Vec<f64> = parse_list(&a.lambda, 2, "lambda")?;
            OdeProblem::dahlquist(Complex64::new(l[0], l[1]), a.tf, prec)
        }
    };
    if a.adaptive {
        let cfg = AdaptiveConfig {
            atol: a.atol,
            rtol: a.rtol,
            h0: h,
            ..AdaptiveConfig::default()
        };
        let t = if t.b_embedded().is_none() {
            let be = qd_erk::constructor::embedded_weights(&t);
            t.with_embedded(be).map_err(invalid)?
        } else {
            t
        };
        let run = integrate_adaptive(&t, &problem, &cfg)?;
        write_output(&a.out, &run.trajectory_csv())?;
        println!("accepted {}", run.accepted());
        println!("rejected {}", run.rejected());
        println!("evaluations {}", run.evaluations);
        print_state(ctx, run.final_state());
    } else {
        let n = (a.tf / h).round().max(1.0) as usize;
        let hf = Float::with_val(prec, a.tf) / n as u32;
        let mut csv = String::from("t");
        for k in 1..=problem.dimension() {
            let _ = write!(csv, ",y{k}");
        }
        csv.push('\n');
        let mut stepper = integrator::Stepper::new(&t, &problem);
        let mut y = problem.y0.clone();
        let mut time = Float::new(prec);
        push_row(&mut csv, &time, &y);
        for k in 1..=n {
            y = stepper.step_fixed(&time, &y, &hf)?;
            time = Float::with_val(prec, &hf * k as u32);
            push_row(&mut csv, &time, &y);
        }
        write_output(&a.out, &csv)?;
        println!("steps {n}");
        println!("evaluations {}", stepper.evaluations);
        print_state(ctx, &y);
    }
    Ok(())
}

fn push_row(csv: &mut String, t: &Float, y: &[Float]) {
    let _ = write!(csv, "{}", format_decimal(t));
    for v in y {
        let _ = write!(csv, ",{}", format_decimal(v));
    }
    csv.push('\n');
}

fn print_state(ctx: &Ctx, y: &[Float]) {
    let parts: Vec<String> = y.iter().map(|v| ctx.num(v)).collect();
    println!("final_state {}", parts.join(","));
}

fn cmd_converge(ctx: &Ctx, a: ConvergeArgs) -> Outcome {
    let t = load_tableau(ctx, &a.tableau)?;
    let hs = a.h_list.split(',').map(parse_step).collect::<Result<Vec<_>, _>>()?;
    if hs.iter().any(|h| (1.0 / h).fract() != 0.0) {
        return Err(invalid("every step size must divide 1"));
    }
    let rows = integrator::convergence_study(&t, &hs)?;
    let csv = convergence_csv(&rows);
    match &a.out {
        Some(path) => write_output(path, &csv)?,
        None => print!("{csv}"),
    }
    if ctx.digits.is_some() {
        for r in &rows {
            eprintln!("h={} err={}", r.h.to_f64(), ctx.num(&r.err));
        }
    }
    Ok(())
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> Outcome {
    let t = load_tableau(ctx, &a.tableau)?;
    let h = parse_step(&a.h)?;
    if a.tol.is_nan() || a.tol <= 0.0 || !(a.t_end > 0.0) {
        return Err(invalid("tol and t-end must be positive"));
    }
    let res = predictability_time(&t, h, a.tol, a.t_end)?;
    if let Some(path) = &a.out {
        let mut csv = String::from("t,discrepancy\n");
        for (ti, d) in &res.history {
            let _ = writeln!(csv, "{ti},{d:e}");
        }
        write_output(path, &csv)?;
    }
    println!("predictability_time {}", ctx.f64(res.time));
    Ok(())
}

fn cmd_optimize(_ctx: &Ctx, a: OptimizeArgs) -> Outcome {
    let cfg: OptimizeConfig = match &a.weights {
        Some(path) => serde_json::from_str(&read_input(path)?).map_err(invalid)?,
        None => OptimizeConfig::default(),
    };
    cfg.fitness.validate().map_err(invalid)?;
    let (winner, report) = optimize_method(a.order, &cfg, a.budget, a.seed)?;
    write_output(&a.out, &tableau::serialize(&winner))?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let json = serde_json::to_string_pretty(&report).map_err(invalid)?;
    if a.out.as_os_str() != "-" {
        write_output(&report_path, &json)?;
    }
    println!("best_fitness {}", report.best_fitness);
    println!("baseline_fitness {}", report.baseline_fitness);
    println!("real_interval_length {}", report.real_interval_length);
    println!("error_norm {:e}", report.error_norm);
    Ok(())
}

fn cmd_info(a: InfoArgs) -> Outcome {
    let l = plan_layout(a.order)?;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    println!("order {}", l.p);
    println!("m {}", l.m);
    println!("n {}", l.n);
    println!("N {}", l.big_n);
    println!("l {}", l.l);
    println!("s2 {}", l.s2);
    println!("s {}", l.s);
    println!("degrees_of_freedom {}", l.degrees_of_freedom());
    for (g, grp) in l.q_groups.iter().enumerate() {
        println!("q_group {} : {}", g + 1, join(grp));
    }
    for (j, grp) in l.d_groups.iter().enumerate() {
        println!("d_group {} : {}", j + 1, join(grp));
    }
    for (i, c) in l.clusters.iter().enumerate() {
        println!("cluster {} (node x{}) : {}", i + 1, l.big_n - (i + 1), join(c));
    }
    Ok(())
}
