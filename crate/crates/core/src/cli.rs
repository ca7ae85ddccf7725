//! The `krf` command line: subcommands over a content-addressed experiment directory.
//!
//! Layout of `OUT/<hash>/`:
//!
//! ```text
//! config.json                  resolved config and its hash
//! semiflat/rho.krf             fiberwise semi-flat potential
//! semiflat/base_density.krf    right-hand side of the base equation
//! static/psi.krf               base solution
//! static/phi_inf.krf           base solution pulled back to the full grid
//! static/solution.json         residual history
//! flow/diagnostics.csv         t,sup_phi,inf_phi,I_t,excess_IplusIprime,dist_static,max_residual,dt
//! flow/checkpoints/state_*.krf snapshots (φ) with state_*.dot.krf (last φ̇)
//! barriers/<name>.json         barrier constants
//! barriers/<name>_tK.krf       barrier fields at the sample times
//! verify/reports.json          check reports
//! report/                      plot-data bundle, see report/COLUMNS.md
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::barrier::{
    build_divisor_model, make_approx_subsolution, make_approx_supersolution, make_subsolution, make_supersolution, Barrier,
    BarrierParams, ExplicitBarrier,
};
use crate::config::{parse_config, CheckName, FormatName, RunConfig};
use crate::error::{KrfError, Result};
use crate::flow::{integral_diagnostic, run, Trajectory};
use crate::grid::ScalarField;
use crate::io;
use crate::ma::HessianStencil;
use crate::model::{base_density, build_product_problem, semiflat_solve, FlowProblem};
use crate::static_solver::solve_static_with;
use crate::verify::{calibrate_tolerance, classify_viscosity, convergence_rate_fit, discrete_comparison_stress, sandwich_check};

#[derive(Debug, Parser)]
#[command(name = "krf", version, about = "Normalized Kähler-Ricci flow laboratory on toric-periodic models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "KRF_CONFIG")]
    pub config: Option<PathBuf>,
    /// Root of the experiment directories (default: `output.dir` of the config).
    #[arg(long, global = true, env = "KRF_OUT")]
    pub out: Option<PathBuf>,
    /// Seed of the comparison stress generator.
    #[arg(long, global = true, env = "KRF_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "KRF_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, env = "KRF_VERBOSE")]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the flow and write checkpoints plus the diagnostic CSV.
    RunFlow,
    /// Solve the limit equation.
    SolveStatic,
    /// Solve the fiberwise semi-flat equation.
    Semiflat,
    /// Build the explicit barriers from the stored artifacts.
    Barriers,
    /// Run the configured checks; the exit status is 1 when any fails.
    Verify,
    /// Collate CSV/JSON artifacts into a plot-data bundle.
    Report,
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(e: &KrfError) -> i32 {
    match e {
        KrfError::Config { .. } | KrfError::Parse { .. } | KrfError::Io(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

struct Context {
    config: RunConfig,
    problem: FlowProblem,
    dir: PathBuf,
    hash: String,
    verbose: bool,
    started: Instant,
}

impl Context {
    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("[{:8.2}s] {msg}", self.started.elapsed().as_secs_f64());
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn sidecar(&self, kind: &str) -> io::Sidecar {
        io::Sidecar::new(kind, Some(&self.hash))
    }

    fn wants(&self, f: FormatName) -> bool {
        self.config.output.formats.contains(&f)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigRecord {
    hash: String,
    config: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct StaticRecord {
    method: String,
    residual_history: Vec<(usize, f64)>,
    final_residual: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SemiflatRecord {
    fiber_constants: Vec<f64>,
    residual: f64,
    iterations: usize,
}

/// One entry of `verify/reports.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckEntry {
    pub check: String,
    pub pass: bool,
    pub summary: String,
    pub detail: serde_json::Value,
}

/// Parses `args` (including the program name) and runs the command; returns the exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn context(common: &Common) -> Result<Context> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| KrfError::config("--config", "a configuration file is required"))?;
    let mut config = parse_config(path)?;
    if let Some(seed) = common.seed {
        config.verify.seed = seed;
    }
    if let Some(threads) = common.threads {
        if threads == 0 {
            return Err(KrfError::config("--threads", "must be at least 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let hash = config.hash();
    let root = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.output.dir));
    let dir = io::experiment_dir(&root, &hash)?;
    io::save_json(&dir.join("config.json"), &ConfigRecord { hash: hash.clone(), config: config.clone() })?;
    let problem = build_product_problem(&config.model_spec()?)?;
    Ok(Context {
        config,
        problem,
        dir,
        hash,
        verbose: common.verbose,
        started: Instant::now(),
    })
}

fn execute(cli: &Cli) -> Result<bool> {
    let ctx = context(&cli.common)?;
    ctx.log(&format!("experiment directory {}", ctx.dir.display()));
    match cli.command {
        Command::Semiflat => cmd_semiflat(&ctx).map(|_| true),
        Command::SolveStatic => cmd_solve_static(&ctx).map(|_| true),
        Command::RunFlow => cmd_run_flow(&ctx).map(|_| true),
        Command::Barriers => cmd_barriers(&ctx).map(|_| true),
        Command::Verify => cmd_verify(&ctx),
        Command::Report => cmd_report(&ctx).map(|_| true),
    }
}

fn cmd_semiflat(ctx: &Context) -> Result<ScalarField> {
    let sf = semiflat_solve(&ctx.problem, ctx.config.solver.semiflat_tol)?;
    save_semiflat(ctx, &sf)?;
    Ok(sf.rho)
}

fn save_semiflat(ctx: &Context, sf: &crate::model::SemiFlatField) -> Result<()> {
    ctx.log(&format!("semi-flat residual {:.3e} after {} iterations", sf.residual, sf.iterations));
    let w = base_density(&ctx.problem, sf)?;
    io::save_field(&ctx.path("semiflat/rho.krf"), &sf.rho, &ctx.sidecar("rho"))?;
    io::save_field(&ctx.path("semiflat/base_density.krf"), &w, &ctx.sidecar("base_density"))?;
    io::save_json(
        &ctx.path("semiflat/semiflat.json"),
        &SemiflatRecord {
            fiber_constants: sf.fiber_constants.clone(),
            residual: sf.residual,
            iterations: sf.iterations,
        },
    )?;
    println!("semiflat: residual {:.3e}, {} iterations", sf.residual, sf.iterations);
    Ok(())
}

fn load_or<T>(path: &Path, make: impl FnOnce() -> Result<T>, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if path.exists() {
        load(path)
    } else {
        make()
    }
}

fn cmd_solve_static(ctx: &Context) -> Result<ScalarField> {
    let sf = semiflat_solve(&ctx.problem, ctx.config.solver.semiflat_tol)?;
    if !ctx.path("semiflat/rho.krf").exists() {
        save_semiflat(ctx, &sf)?;
    }
    let s = &ctx.config.solver;
    let sol = solve_static_with(&ctx.problem, &sf, ctx.config.static_method(), s.tol, s.max_iter)?;
    let lifted = sol.lifted.clone().ok_or_else(|| KrfError::Invariant("static solution was not lifted".into()))?;
    io::save_field(&ctx.path("static/psi.krf"), &sol.psi, &ctx.sidecar("psi"))?;
    io::save_field(&ctx.path("static/phi_inf.krf"), &lifted, &ctx.sidecar("phi_inf"))?;
    io::save_json(
        &ctx.path("static/solution.json"),
        &StaticRecord {
            method: format!("{:?}", ctx.config.static_method()),
            residual_history: sol.residual_history.clone(),
            final_residual: sol.final_residual(),
        },
    )?;
    println!(
        "solve-static: residual {:.3e} after {} iterations",
        sol.final_residual(),
        sol.residual_history.len().saturating_sub(1)
    );
    Ok(lifted)
}

fn initial_potential(ctx: &Context) -> Result<ScalarField> {
    let e = crate::expr::Expr::parse(&ctx.config.flow.initial)?;
    ScalarField::from_fn(ctx.problem.grid().clone(), |y| e.eval(y, 0.0))
}

fn cmd_run_flow(ctx: &Context) -> Result<Trajectory> {
    let phi_inf = load_or(&ctx.path("static/phi_inf.krf"), || cmd_solve_static(ctx), |p| io::load_field(p).map(|f| f.0))?;
    let phi0 = initial_potential(ctx)?;
    let f = &ctx.config.flow;
    ctx.log(&format!("running the flow to t = {}", f.t_end));
    let traj = run(&ctx.problem, &phi0, f.t_end, &ctx.config.flow_options()?, &f.snapshots, Some(&phi_inf))?;
    let integral = integral_diagnostic(&ctx.problem, &traj).ok();
    if ctx.wants(FormatName::Csv) {
        io::write_diagnostics_csv(&ctx.path("flow/diagnostics.csv"), &traj.diagnostics, integral.as_ref())?;
    }
    let cp = ctx.path("flow/checkpoints");
    if cp.exists() {
        std::fs::remove_dir_all(&cp)?;
    }
    for (k, s) in traj.snapshots.iter().enumerate() {
        io::save_checkpoint(&cp, k, s, Some(&ctx.hash))?;
    }
    let last = traj.diagnostics.last().expect("a trajectory has a first row");
    println!(
        "run-flow: {} steps to t = {}, dist_static {:.6e}, {} rejected halvings",
        traj.diagnostics.len() - 1,
        last.t,
        last.dist_static.unwrap_or(f64::NAN),
        traj.rejected_halvings
    );
    Ok(traj)
}

struct Artifacts {
    phi_inf: ScalarField,
    rho: ScalarField,
    trajectory: Trajectory,
}

fn load_artifacts(ctx: &Context) -> Result<Artifacts> {
    Ok(Artifacts {
        phi_inf: io::load_field(&ctx.path("static/phi_inf.krf"))?.0,
        rho: io::load_field(&ctx.path("semiflat/rho.krf"))?.0,
        trajectory: io::load_trajectory(&ctx.path("flow/checkpoints"), &ctx.path("flow/diagnostics.csv"))?,
    })
}

fn profile(ctx: &Context) -> Result<ScalarField> {
    let e = crate::expr::Expr::parse(&ctx.config.barrier.divisor_profile)?;
    ScalarField::from_fn(ctx.problem.grid().clone(), |y| e.eval(y, 0.0))
}

fn build_barriers(ctx: &Context, a: &Artifacts) -> Result<Vec<(String, ExplicitBarrier)>> {
    let p = &ctx.problem;
    let phi0 = &a.trajectory.snapshots[0].phi;
    let mut out = vec![
        ("sub".to_string(), make_subsolution(p, &a.phi_inf, &a.rho, phi0)?),
        ("super".to_string(), make_supersolution(p, &a.phi_inf, &a.rho, phi0)?),
    ];
    let divisor = build_divisor_model(p, &profile(ctx)?)?;
    let opts = ctx.config.approx_options();
    for &eps in &ctx.config.barrier.epsilons {
        out.push((
            format!("approx_sub_eps{eps}"),
            make_approx_subsolution(p, &a.phi_inf, &a.rho, &divisor, eps, &a.trajectory, &opts)?,
        ));
        out.push((
            format!("approx_super_eps{eps}"),
            make_approx_supersolution(p, &a.phi_inf, &a.rho, &divisor, eps, &a.trajectory, &opts)?,
        ));
    }
    Ok(out)
}

fn cmd_barriers(ctx: &Context) -> Result<()> {
    let a = load_artifacts(ctx)?;
    let barriers = build_barriers(ctx, &a)?;
    for (name, b) in &barriers {
        io::save_json(&ctx.path(&format!("barriers/{name}.json")), &b.params)?;
        if ctx.wants(FormatName::Bin) {
            for (k, &t) in ctx.config.barrier.sample_times.iter().enumerate() {
                if t >= b.t_start() {
                    let mut side = ctx.sidecar(name);
                    side.t = Some(t);
                    io::save_field(&ctx.path(&format!("barriers/{name}_t{k}.krf")), &b.value(t), &side)?;
                }
            }
        }
        println!("barriers: {name} C = {:.6e}, B = {:.6e}, T0 = {}", b.params.c, b.params.b, b.params.t0);
    }
    Ok(())
}

/// Rebuilt barriers must match the stored constants.
fn check_stored(ctx: &Context, barriers: &[(String, ExplicitBarrier)]) -> Result<()> {
    for (name, b) in barriers {
        let path = ctx.path(&format!("barriers/{name}.json"));
        let stored: BarrierParams = io::load_json(&path)?;
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs()));
        if stored.kind != b.params.kind || !close(stored.c, b.params.c) || !close(stored.b, b.params.b) || !close(stored.t0, b.params.t0) {
            return Err(KrfError::Dependency {
                path: path.display().to_string(),
                message: "stored barrier constants do not match the artifacts; rerun `barriers`".into(),
            });
        }
    }
    Ok(())
}

fn entry<T: Serialize>(check: &str, pass: bool, summary: String, detail: &T) -> Result<CheckEntry> {
    Ok(CheckEntry {
        check: check.into(),
        pass,
        summary,
        detail: serde_json::to_value(detail)?,
    })
}

fn cmd_verify(ctx: &Context) -> Result<bool> {
    let a = load_artifacts(ctx)?;
    let v = &ctx.config.verify;
    let needs_barriers = v.checks.iter().any(|c| matches!(c, CheckName::Sandwich | CheckName::Viscosity | CheckName::Approx));
    let barriers = if needs_barriers {
        let b = build_barriers(ctx, &a)?;
        check_stored(ctx, &b)?;
        b
    } else {
        vec![]
    };
    let find = |name: &str| barriers.iter().find(|(n, _)| n == name).map(|(_, b)| b);
    let times: Vec<f64> = a.trajectory.snapshot_times().into_iter().filter(|&t| t > 0.0).collect();
    let central = HessianStencil::central(ctx.problem.dims());
    let mut entries = vec![];
    for check in &v.checks {
        ctx.log(&format!("check {check:?}"));
        match check {
            CheckName::Sandwich => {
                let tol = match v.sandwich_tol {
                    Some(t) => t,
                    None => {
                        let amp = a.trajectory.snapshots[0].phi.zip_map(&a.phi_inf, |x, y| x - y)?.sup_norm();
                        let cal = calibrate_tolerance(ctx.config.model.points[0], ctx.config.flow.dt_max, ctx.config.flow.t_end.min(2.0), amp)?;
                        ctx.log(&format!("calibrated sandwich tolerance {:.3e}", cal.tolerance));
                        cal.tolerance
                    }
                };
                let r = sandwich_check(&a.trajectory, find("sub").unwrap(), find("super").unwrap(), tol)?;
                entries.push(entry("sandwich", r.pass, r.summary(), &r)?);
            }
            CheckName::Viscosity => {
                for name in ["sub", "super"] {
                    let r = classify_viscosity(&ctx.problem, find(name).unwrap(), &times, v.viscosity_tol, &central)?;
                    entries.push(entry(&format!("viscosity_{name}"), r.pass, r.summary(), &r)?);
                }
            }
            CheckName::Approx => {
                for (name, b) in barriers.iter().filter(|(n, _)| n.starts_with("approx")) {
                    let r = classify_viscosity(&ctx.problem, b, &times, v.viscosity_tol, &central)?;
                    entries.push(entry(name, r.pass, r.summary(), &r)?);
                }
            }
            CheckName::Rate => {
                let fit = convergence_rate_fit(&a.trajectory, (v.rate_window[0], v.rate_window[1]))?;
                let pass = fit.slope >= v.rate_range[0] && fit.slope <= v.rate_range[1];
                let s = format!("{} rate: slope {:.4} in [{}, {}]", if pass { "PASS" } else { "FAIL" }, fit.slope, v.rate_range[0], v.rate_range[1]);
                entries.push(entry("rate", pass, s, &fit)?);
            }
            CheckName::Integral => {
                let r = integral_diagnostic(&ctx.problem, &a.trajectory)?;
                let pass = r.max_excess <= v.integral_tol;
                let s = format!("{} integral: max excess {:.3e} (tol {:.1e})", if pass { "PASS" } else { "FAIL" }, r.max_excess, v.integral_tol);
                entries.push(entry("integral", pass, s, &r)?);
            }
            CheckName::Stress => {
                let r = discrete_comparison_stress(&ctx.problem, v.stress_pairs, v.seed, &ctx.config.stress_options())?;
                entries.push(entry("stress", r.wide.pass, r.wide.summary(), &r)?);
            }
        }
    }
    io::save_json(&ctx.path("verify/reports.json"), &entries)?;
    let text: String = entries.iter().map(|e| format!("{}\n", e.summary)).collect();
    io::write_text(&ctx.path("verify/summary.txt"), &text)?;
    print!("{text}");
    Ok(entries.iter().all(|e| e.pass))
}

const COLUMNS: &str = "\
# Plot-data bundle

diagnostics.csv
  t                   time
  sup_phi, inf_phi    extrema of the potential
  I_t                 sum of phi * f_mu * cell volume
  excess_IplusIprime  I' + I - B(t); nonpositive up to the difference quotient error
  dist_static         sup |phi_t - phi_inf|
  max_residual        sup |F(t, phi) - realized phi_dot| of the step
  dt                  step size

envelope.csv
  t                   snapshot time
  sub_gap             max (u - phi_t); nonpositive when the subsolution lies below
  super_gap           max (phi_t - v); nonpositive when the supersolution lies above
  width               max (v - u)

rate.json             fits of log dist_static over the configured window
";

fn cmd_report(ctx: &Context) -> Result<()> {
    let a = load_artifacts(ctx)?;
    let dir = ctx.path("report");
    let integral = integral_diagnostic(&ctx.problem, &a.trajectory).ok();
    io::write_diagnostics_csv(&dir.join("diagnostics.csv"), &a.trajectory.diagnostics, integral.as_ref())?;
    let phi0 = &a.trajectory.snapshots[0].phi;
    let u = make_subsolution(&ctx.problem, &a.phi_inf, &a.rho, phi0)?;
    let v = make_supersolution(&ctx.problem, &a.phi_inf, &a.rho, phi0)?;
    let rows: Vec<Vec<Option<f64>>> = a
        .trajectory
        .snapshots
        .iter()
        .map(|s| {
            let (uv, vv) = (u.value(s.t), v.value(s.t));
            let max = |f: &dyn Fn(usize) -> f64| (0..uv.values().len()).map(f).fold(f64::NEG_INFINITY, f64::max);
            vec![
                Some(s.t),
                Some(max(&|i| uv.get(i) - s.phi.get(i))),
                Some(max(&|i| s.phi.get(i) - vv.get(i))),
                Some(max(&|i| vv.get(i) - uv.get(i))),
            ]
        })
        .collect();
    io::write_table_csv(&dir.join("envelope.csv"), &["t", "sub_gap", "super_gap", "width"], &rows)?;
    let w = ctx.config.verify.rate_window;
    if let Ok(fit) = convergence_rate_fit(&a.trajectory, (w[0], w[1])) {
        io::save_json(&dir.join("rate.json"), &fit)?;
    }
    io::write_text(&dir.join("COLUMNS.md"), COLUMNS)?;
    println!("report: bundle written to {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(["krf"]), EXIT_USAGE);
        assert_eq!(run_cli(["krf", "bogus"]), EXIT_USAGE);
        assert_eq!(run_cli(["krf", "--help"]), EXIT_PASS);
    }

    #[test]
    fn exit_codes_follow_error_kinds() {
        assert_eq!(exit_code(&KrfError::config("x", "y")), EXIT_USAGE);
        assert_eq!(exit_code(&KrfError::Dependency { path: "p".into(), message: "m".into() }), EXIT_RUNTIME);
        assert_eq!(exit_code(&KrfError::Hypothesis("h".into())), EXIT_RUNTIME);
    }
}
