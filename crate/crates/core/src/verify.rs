//! Falsifiable checks: barrier sandwich, viscosity classification, convergence
//! rate, discrete comparison stress and grid-calibrated tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{Barrier, BarrierKind};
use crate::error::{KrfError, Result};
use crate::expr::Expr;
use crate::flow::{run, FlowOptions, FlowState, Stepper, TimeScheme, Trajectory};
use crate::grid::ScalarField;
use crate::ma::{self, HessianStencil, ResidualOptions, WideOperator};
use crate::model::{build_product_problem, FlowProblem, ModelSpec, ReactionSpec};

/// Worst signed violation at one time; negative values are slack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: f64,
    pub node: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub points: Vec<usize>,
    pub dt: Option<f64>,
    pub epsilon: Option<f64>,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub check: String,
    pub per_time: Vec<Violation>,
    pub worst: Violation,
    pub tolerance: f64,
    pub pass: bool,
    /// Nodes counted as failures for reasons other than the signed magnitude.
    pub failed_nodes: usize,
    pub meta: ReportMeta,
}

impl ComparisonReport {
    fn assemble(check: &str, per_time: Vec<Violation>, tolerance: f64, failed_nodes: usize, meta: ReportMeta) -> Self {
        let worst = per_time
            .iter()
            .copied()
            .reduce(|a, b| if b.magnitude > a.magnitude { b } else { a })
            .unwrap_or(Violation {
                t: f64::NAN,
                node: 0,
                magnitude: f64::NEG_INFINITY,
            });
        Self {
            check: check.to_string(),
            pass: worst.magnitude <= tolerance && failed_nodes == 0,
            per_time,
            worst,
            tolerance,
            failed_nodes,
            meta,
        }
    }

    /// One line for human-readable summaries.
    pub fn summary(&self) -> String {
        format!(
            "{} {}: worst {:.3e} at t = {:.4}, node {} (tol {:.3e}, failed nodes {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.check,
            self.worst.magnitude,
            self.worst.t,
            self.worst.node,
            self.tolerance,
            self.failed_nodes
        )
    }
}

fn worst_over(values: impl IndexedParallelIterator<Item = Option<f64>>) -> Option<(usize, f64)> {
    values
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .reduce_with(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
}

fn meta_for(points: &[usize], barriers: &[&dyn Barrier]) -> ReportMeta {
    let approx = barriers.iter().filter_map(|b| b.params()).find(|p| p.epsilon > 0.0);
    ReportMeta {
        points: points.to_vec(),
        dt: None,
        epsilon: approx.map(|p| p.epsilon),
        r: approx.map(|p| p.r),
    }
}

/// `u(t) - tol <= φ_t <= v(t) + tol` at every in-mask node of every snapshot
/// at or after both barriers' start times.
pub fn sandwich_check(trajectory: &Trajectory, u: &dyn Barrier, v: &dyn Barrier, tol: f64) -> Result<ComparisonReport> {
    if u.kind() != BarrierKind::Sub || v.kind() != BarrierKind::Super {
        return Err(KrfError::Argument("sandwich needs a subsolution and a supersolution".into()));
    }
    let start = u.t_start().max(v.t_start());
    let snaps: Vec<&FlowState> = trajectory.snapshots.iter().filter(|s| s.t >= start - 1e-12).collect();
    if snaps.is_empty() {
        return Err(KrfError::Argument(format!(
            "trajectory ends at t = {} before the barriers start at t = {start}",
            trajectory.last().t
        )));
    }
    let grid = snaps[0].phi.grid().clone();
    let per_time = snaps
        .iter()
        .map(|s| {
            let (uv, vv) = (u.value(s.t), v.value(s.t));
            if **uv.grid() != *grid {
                return Err(KrfError::Argument("barriers and trajectory live on different grids".into()));
            }
            let (um, vm) = (u.mask(), v.mask());
            let w = worst_over((0..grid.node_count()).into_par_iter().map(|i| {
                let below = um.is_none_or(|m| m[i]).then(|| uv.get(i) - s.phi.get(i));
                let above = vm.is_none_or(|m| m[i]).then(|| s.phi.get(i) - vv.get(i));
                match (below, above) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                }
            }));
            Ok(w.map(|(node, magnitude)| Violation { t: s.t, node, magnitude }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(ComparisonReport::assemble("sandwich", per_time, tol, 0, meta_for(grid.points(), &[u, v])))
}

/// Evaluates the flow residual of a barrier with its exact time derivative.
///
/// A subsolution needs an admissible matrix and residual `>= -tol` at every
/// in-mask node; a supersolution needs residual `<= tol`. The reported
/// magnitude is `-r` (resp. `r`), so negative values are slack.
pub fn classify_viscosity(
    problem: &FlowProblem,
    barrier: &dyn Barrier,
    times: &[f64],
    tol: f64,
    stencil: &HessianStencil,
) -> Result<ComparisonReport> {
    let times: Vec<f64> = times.iter().copied().filter(|&t| t >= barrier.t_start() - 1e-12).collect();
    if times.is_empty() {
        return Err(KrfError::Argument("no sample time at or after the barrier start".into()));
    }
    let opts = ResidualOptions {
        tol,
        ..ResidualOptions::default()
    };
    let kind = barrier.kind();
    let mask = barrier.mask();
    let mut per_time = vec![];
    let mut failed = 0;
    for &t in &times {
        let value = barrier.value(t);
        let dot = barrier.time_derivative(t);
        let field = ma::residual(problem, t, &value, &dot, stencil, &opts)?;
        let inside = |i: usize| mask.is_none_or(|m| m[i]);
        if kind == BarrierKind::Sub {
            failed += (0..field.admissible.len()).filter(|&i| inside(i) && !field.admissible[i]).count();
        }
        let w = worst_over((0..field.tags.len()).into_par_iter().map(|i| {
            inside(i).then(|| match kind {
                BarrierKind::Sub => -field.residual.get(i),
                BarrierKind::Super => field.residual.get(i),
            })
        }));
        if let Some((node, magnitude)) = w {
            per_time.push(Violation { t, node, magnitude });
        }
    }
    let check = match kind {
        BarrierKind::Sub => "viscosity_sub",
        BarrierKind::Super => "viscosity_super",
    };
    Ok(ComparisonReport::assemble(check, per_time, tol, failed, meta_for(problem.grid().points(), &[barrier])))
}

/// Least-squares fits of the distance to the static solution on a time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Exponential rate `s` of `log d = a + p log(1+t) + s t`.
    pub slope: f64,
    /// `e^a` of the same fit.
    pub c_fit: f64,
    /// Power of `1+t` of the same fit.
    pub power: f64,
    /// Slope of `log d - log(1+t)` against `t`.
    pub literal_slope: f64,
    /// Slope of `log d` against `t`.
    pub plain_slope: f64,
    /// Whether `d` is nonincreasing over the window.
    pub monotone: bool,
    pub window: (f64, f64),
    pub points: usize,
    pub warnings: Vec<String>,
}

/// Distances below this are treated as having reached the rounding floor.
pub const DIST_FLOOR: f64 = 1e-13;

fn least_squares(rows: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let k = rows[0].len();
    let mut a = nalgebra::DMatrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let b = nalgebra::DVector::from_column_slice(rhs);
    let svd = a.svd(true, true);
    svd.solve(&b, 1e-14).ok().map(|x| x.iter().copied().collect())
}

pub fn convergence_rate_fit(trajectory: &Trajectory, window: (f64, f64)) -> Result<RateFit> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(KrfError::Argument(format!("empty fit window [{t0}, {t1}]")));
    }
    let mut warnings = vec![];
    let mut pts: Vec<(f64, f64)> = vec![];
    for row in trajectory.diagnostics.iter().filter(|r| r.t >= t0 - 1e-12 && r.t <= t1 + 1e-12) {
        let d = row
            .dist_static
            .ok_or_else(|| KrfError::Argument("trajectory was run without a static solution".into()))?;
        if d <= DIST_FLOOR {
            warnings.push(format!("distance reached the floor {DIST_FLOOR:e} at t = {}; window shortened", row.t));
            break;
        }
        pts.push((row.t, d));
    }
    if pts.len() < 4 {
        return Err(KrfError::Argument(format!("only {} usable points in the fit window", pts.len())));
    }
    if pts.last().unwrap().0 < t1 - 1e-9 && warnings.is_empty() {
        warnings.push(format!("trajectory ends at t = {} inside the window", pts.last().unwrap().0));
    }
    let logs: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let full = least_squares(&pts.iter().map(|p| vec![1.0, p.0.ln_1p(), p.0]).collect::<Vec<_>>(), &logs)
        .ok_or_else(|| KrfError::Invariant("rate fit is singular".into()))?;
    let line = |y: Vec<f64>| least_squares(&pts.iter().map(|p| vec![1.0, p.0]).collect::<Vec<_>>(), &y).map(|x| x[1]);
    let literal = line(pts.iter().zip(&logs).map(|(p, l)| l - p.0.ln_1p()).collect())
        .ok_or_else(|| KrfError::Invariant("rate fit is singular".into()))?;
    let plain = line(logs.clone()).ok_or_else(|| KrfError::Invariant("rate fit is singular".into()))?;
    let monotone = pts.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-12));
    Ok(RateFit {
        slope: full[2],
        c_fit: full[0].exp(),
        power: full[1],
        literal_slope: literal,
        plain_slope: plain,
        monotone,
        window: (pts[0].0, pts.last().unwrap().0),
        points: pts.len(),
        warnings,
    })
}

/// Knobs for [`discrete_comparison_stress`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressOptions {
    pub t_end: f64,
    pub radius: usize,
    /// Largest amplitude of the random initial potential.
    pub amplitude: f64,
    /// Largest height of the nonnegative bump.
    pub bump_height: f64,
    /// Use a zero bump (the two runs coincide).
    pub zero_bump: bool,
    /// Fraction of the monotone step bound used as `dt`.
    pub cfl: f64,
    /// Also run the central stencil on the same pairs.
    pub central: bool,
}

impl Default for StressOptions {
    fn default() -> Self {
        Self {
            t_end: 0.5,
            radius: 2,
            amplitude: 0.05,
            bump_height: 0.05,
            zero_bump: false,
            cfl: 0.9,
            central: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingStats {
    pub pairs: usize,
    pub pairs_with_crossing: usize,
    /// Largest `φ - ψ` seen over all pairs and steps.
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub wide: ComparisonReport,
    pub wide_stats: CrossingStats,
    /// Informational; the central stencil is not monotone.
    pub central: Option<CrossingStats>,
    pub seed: u64,
}

/// Rounding allowance for a crossing: a few ulps of the potential.
fn crossing_tol(phi: &ScalarField) -> f64 {
    64.0 * f64::EPSILON * (1.0 + phi.sup_norm())
}

struct PairRun {
    /// `(t, node, φ - ψ)` at every step.
    trace: Vec<Violation>,
    crossed: bool,
}

fn random_pair(grid: &std::sync::Arc<crate::grid::TorusGrid>, rng: &mut ChaCha8Rng, opts: &StressOptions) -> Result<(ScalarField, ScalarField)> {
    let n = grid.n_dims();
    let modes: Vec<(Vec<f64>, f64, f64)> = (0..4)
        .map(|_| {
            let k: Vec<f64> = (0..n).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
            (k, rng.gen_range(-1.0..1.0) * opts.amplitude / 4.0, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let centre: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let height = if opts.zero_bump { 0.0 } else { rng.gen_range(0.2..1.0) * opts.bump_height };
    let width = rng.gen_range(1.0..3.0);
    let phi = ScalarField::from_fn(grid.clone(), |y| {
        modes
            .iter()
            .map(|(k, a, p)| a * (k.iter().zip(y).map(|(k, y)| k * y).sum::<f64>() + p).cos())
            .sum()
    })?;
    let bump = ScalarField::from_fn(grid.clone(), |y| {
        height * (width * y.iter().zip(&centre).map(|(y, c)| (y - c).cos() - 1.0).sum::<f64>()).exp()
    })?;
    let psi = phi.zip_map(&bump, |a, b| a + b)?;
    Ok((phi, psi))
}

fn run_pair(problem: &FlowProblem, stencil: &HessianStencil, phi0: &ScalarField, psi0: &ScalarField, opts: &StressOptions) -> Result<PairRun> {
    let grid = problem.grid();
    let options = FlowOptions {
        scheme: TimeScheme::SemiImplicit,
        stencil: Some(stencil.clone()),
        adaptive: false,
        ..FlowOptions::default()
    };
    let wide = match stencil.scheme() {
        ma::StencilScheme::WideStencil => Some(WideOperator::new(grid, stencil)),
        ma::StencilScheme::Central => None,
    };
    let mut sa = Stepper::new(problem, options.clone())?;
    let mut sb = Stepper::new(problem, options)?;
    let mut a = FlowState::initial(phi0.clone());
    let mut b = FlowState::initial(psi0.clone());
    let n = problem.dims();
    let h2 = grid.min_spacing().powi(2);
    let mut trace = vec![];
    let mut crossed = false;
    let check = |a: &FlowState, b: &FlowState| {
        let w = worst_over((0..grid.node_count()).into_par_iter().map(|i| Some(a.phi.get(i) - b.phi.get(i)))).unwrap();
        (w, crossing_tol(&a.phi).max(crossing_tol(&b.phi)))
    };
    let (w0, _) = check(&a, &b);
    trace.push(Violation {
        t: 0.0,
        node: w0.0,
        magnitude: w0.1,
    });
    while a.t < opts.t_end - 1e-12 {
        let bound = match &wide {
            Some(w) => {
                let coupling = |s: &FlowState| {
                    (0..grid.node_count())
                        .into_par_iter()
                        .map_init(
                            || vec![0.0; n * n],
                            |theta, node| {
                                problem.theta_into(node, s.t, theta);
                                w.self_coupling(theta, s.phi.values(), node)
                            },
                        )
                        .reduce(|| 0.0, f64::max)
                };
                coupling(&a).max(coupling(&b))
            }
            None => 4.0 * n as f64 / h2,
        };
        let dt = (opts.cfl / (bound + problem.reaction().slope())).min(opts.t_end - a.t);
        let (mut na, ra) = sa.step(&a, dt)?;
        let (mut nb, rb) = sb.step(&b, dt)?;
        if ra.dt != rb.dt {
            let d = ra.dt.min(rb.dt);
            (na, _) = sa.step(&a, d)?;
            (nb, _) = sb.step(&b, d)?;
        }
        a = na;
        b = nb;
        let ((node, gap), tol) = check(&a, &b);
        crossed |= gap > tol;
        trace.push(Violation { t: a.t, node, magnitude: gap });
    }
    Ok(PairRun { trace, crossed })
}

/// Runs `pair_count` seeded ordered pairs `φ0 <= ψ0 = φ0 + bump` under
/// identical step schedules and reports any nodewise crossing.
///
/// The wide stencil with the semi-implicit step at `dt <= cfl / self-coupling`
/// is monotone, so crossings there are failures; central-stencil crossings are
/// reported only.
pub fn discrete_comparison_stress(problem: &FlowProblem, pair_count: usize, seed: u64, opts: &StressOptions) -> Result<StressReport> {
    if pair_count == 0 {
        return Err(KrfError::Argument("pair_count must be at least 1".into()));
    }
    let grid = problem.grid();
    let wide = HessianStencil::wide(grid, opts.radius)?;
    let central = HessianStencil::central(grid.n_dims());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..pair_count).map(|_| random_pair(grid, &mut rng, opts)).collect::<Result<Vec<_>>>()?;
    let mut per_time = vec![];
    let mut wide_stats = CrossingStats {
        pairs: pair_count,
        pairs_with_crossing: 0,
        worst: f64::NEG_INFINITY,
    };
    let mut central_stats = opts.central.then_some(CrossingStats {
        pairs: pair_count,
        pairs_with_crossing: 0,
        worst: f64::NEG_INFINITY,
    });
    let mut worst_tol: f64 = 0.0;
    for (phi0, psi0) in &pairs {
        let w = run_pair(problem, &wide, phi0, psi0, opts)?;
        wide_stats.pairs_with_crossing += w.crossed as usize;
        let pw = w.trace.iter().copied().reduce(|x, y| if y.magnitude > x.magnitude { y } else { x }).unwrap();
        wide_stats.worst = wide_stats.worst.max(pw.magnitude);
        worst_tol = worst_tol.max(crossing_tol(phi0)).max(crossing_tol(psi0));
        per_time.push(pw);
        if let Some(cs) = central_stats.as_mut() {
            match run_pair(problem, &central, phi0, psi0, opts) {
                Ok(c) => {
                    cs.pairs_with_crossing += c.crossed as usize;
                    cs.worst = c.trace.iter().map(|v| v.magnitude).fold(cs.worst, f64::max);
                }
                Err(_) => cs.pairs_with_crossing += 1,
            }
        }
    }
    let mut report = ComparisonReport::assemble("comparison_stress", per_time, worst_tol, wide_stats.pairs_with_crossing, ReportMeta {
        points: grid.points().to_vec(),
        ..Default::default()
    });
    report.pass = wide_stats.pairs_with_crossing == 0;
    Ok(StressReport {
        wide: report,
        wide_stats,
        central: central_stats,
        seed,
    })
}

/// Scheme-error constants measured on the constant model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub points: usize,
    pub dt: f64,
    pub t_end: f64,
    /// `sup |φ_{dt} - φ_{dt/2}|` over the snapshot times.
    pub e_time: f64,
    /// `sup |φ_N - φ_{2N}|` on the shared nodes.
    pub e_space: f64,
    pub tolerance: f64,
}

/// Resolution study on the constant `n = 2`, `κ = 1` model with initial data
/// `amplitude · cos(y1) cos(y2)`; the tolerance is ten times the measured
/// time plus space error of the `points`-per-axis run with step `dt`.
pub fn calibrate_tolerance(points: usize, dt: f64, t_end: f64, amplitude: f64) -> Result<Calibration> {
    let build = |p: usize| {
        build_product_problem(&ModelSpec {
            dims: 2,
            points: vec![p, p],
            kappa: 1,
            a0: ["1", "0", "0", "1"].iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>()?,
            achi: vec![Expr::constant(1.0)],
            f_mu: Expr::constant(1.0),
            reaction: ReactionSpec::Identity,
        })
    };
    let sched: Vec<f64> = (1..=8).map(|k| t_end * k as f64 / 8.0).collect();
    let fixed = |dt: f64| FlowOptions {
        dt0: dt,
        dt_max: dt,
        adaptive: false,
        ..FlowOptions::default()
    };
    let init = |p: &FlowProblem| ScalarField::from_fn(p.grid().clone(), |y| amplitude * y[0].cos() * y[1].cos());
    let coarse = build(points)?;
    let fine = build(2 * points)?;
    let runs = [(&coarse, dt), (&coarse, dt / 2.0), (&fine, dt)];
    let trajs = runs
        .par_iter()
        .map(|(p, d)| run(p, &init(p)?, t_end, &fixed(*d), &sched, None))
        .collect::<Result<Vec<_>>>()?;
    let fg = fine.grid();
    let mut e_time: f64 = 0.0;
    let mut e_space: f64 = 0.0;
    for &t in &sched {
        let (a, b, c) = (
            trajs[0].snapshot_at(t).ok_or_else(|| KrfError::Invariant(format!("missing snapshot at {t}")))?,
            trajs[1].snapshot_at(t).ok_or_else(|| KrfError::Invariant(format!("missing snapshot at {t}")))?,
            trajs[2].snapshot_at(t).ok_or_else(|| KrfError::Invariant(format!("missing snapshot at {t}")))?,
        );
        e_time = a.phi.values().iter().zip(b.phi.values()).map(|(x, y)| (x - y).abs()).fold(e_time, f64::max);
        for node in 0..coarse.grid().node_count() {
            let idx: Vec<isize> = coarse.grid().multi_index(node).iter().map(|&i| 2 * i as isize).collect();
            e_space = e_space.max((a.phi.get(node) - c.phi.get(fg.wrap_index(&idx))).abs());
        }
    }
    Ok(Calibration {
        points,
        dt,
        t_end,
        e_time,
        e_space,
        tolerance: 10.0 * (e_time + e_space),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{make_subsolution, make_supersolution, ConstantBarrier};
    use crate::flow::DiagnosticRow;
    use crate::grid::TorusGrid;
    use crate::static_solver::{solve_static, StaticMethod};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn constant_model(p: usize) -> FlowProblem {
        build_product_problem(&ModelSpec {
            dims: 2,
            points: vec![p, p],
            kappa: 1,
            a0: ["1", "0", "0", "1"].iter().map(|s| Expr::parse(s).unwrap()).collect(),
            achi: vec![Expr::constant(1.0)],
            f_mu: Expr::constant(1.0),
            reaction: ReactionSpec::Identity,
        })
        .unwrap()
    }

    fn generic_model(p: usize) -> FlowProblem {
        build_product_problem(&ModelSpec {
            dims: 2,
            points: vec![p, p],
            kappa: 1,
            a0: ["1+0.2*cos(y1)", "0", "0", "1"].iter().map(|s| Expr::parse(s).unwrap()).collect(),
            achi: vec![Expr::parse("1+0.3*cos(y1)").unwrap()],
            f_mu: Expr::parse("1+0.3*sin(y1)").unwrap(),
            reaction: ReactionSpec::Identity,
        })
        .unwrap()
    }

    fn grid() -> Arc<TorusGrid> {
        Arc::new(TorusGrid::uniform(2, 8, 1).unwrap())
    }

    fn constant_traj(value: f64) -> Trajectory {
        let g = grid();
        let s = FlowState::initial(ScalarField::constant(g, value));
        let mut t = s.clone();
        t.t = 1.0;
        Trajectory {
            snapshots: vec![s, t],
            diagnostics: vec![],
            rejected_halvings: 0,
        }
    }

    #[test]
    fn constant_sandwich_reports_slack() {
        let g = grid();
        let u = ConstantBarrier { kind: BarrierKind::Sub, field: ScalarField::constant(g.clone(), 0.0) };
        let v = ConstantBarrier { kind: BarrierKind::Super, field: ScalarField::constant(g.clone(), 1.0) };
        let r = sandwich_check(&constant_traj(0.5), &u, &v, 0.0).unwrap();
        assert!(r.pass);
        assert_eq!(r.worst.magnitude, -0.5);
        assert!(sandwich_check(&constant_traj(0.5), &v, &u, 0.0).is_err());
    }

    #[test]
    fn corrupted_barrier_fails_by_its_deficit() {
        let p = constant_model(16);
        let g = p.grid().clone();
        let zero = ScalarField::constant(g.clone(), 0.0);
        let phi0 = ScalarField::from_fn(g.clone(), |y| 0.05 * y[0].cos()).unwrap();
        let traj = run(&p, &phi0, 1.0, &FlowOptions::default(), &[0.5], Some(&zero)).unwrap();
        let u = make_subsolution(&p, &zero, &zero, &phi0).unwrap();
        let v = make_supersolution(&p, &zero, &zero, &phi0).unwrap();
        assert!(sandwich_check(&traj, &u, &v, 1e-3).unwrap().pass);
        let bad = v.with_c(v.params.c - 1.0);
        let r = sandwich_check(&traj, &u, &bad, 1e-3).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst.t, 0.0);
        assert!((r.worst.magnitude - 1.0).abs() < 0.05 + 1e-12, "{}", r.worst.magnitude);
    }

    #[test]
    fn sandwich_rejects_disjoint_times() {
        let g = grid();
        let u = ConstantBarrier { kind: BarrierKind::Sub, field: ScalarField::constant(g.clone(), 0.0) };
        struct Late(ConstantBarrier);
        impl Barrier for Late {
            fn kind(&self) -> BarrierKind {
                self.0.kind
            }
            fn value(&self, t: f64) -> ScalarField {
                self.0.value(t)
            }
            fn time_derivative(&self, t: f64) -> ScalarField {
                self.0.time_derivative(t)
            }
            fn mask(&self) -> Option<&[bool]> {
                None
            }
            fn t_start(&self) -> f64 {
                5.0
            }
        }
        let v = Late(ConstantBarrier { kind: BarrierKind::Super, field: ScalarField::constant(g, 1.0) });
        assert!(matches!(sandwich_check(&constant_traj(0.5), &u, &v, 0.0), Err(KrfError::Argument(_))));
    }

    #[test]
    fn exact_barriers_classify_on_generic_model() {
        let p = generic_model(24);
        let sol = solve_static(&p, StaticMethod::DampedNewton, 1e-12, 50).unwrap();
        let lifted = sol.lifted.clone().unwrap();
        let rho = crate::model::semiflat_solve(&p, 1e-12).unwrap().rho;
        let phi0 = ScalarField::from_fn(p.grid().clone(), |y| 0.1 * y[0].sin()).unwrap();
        let u = make_subsolution(&p, &lifted, &rho, &phi0).unwrap();
        let v = make_supersolution(&p, &lifted, &rho, &phi0).unwrap();
        let times = [0.05, 0.3, 1.0, 3.0, 8.0];
        let c = HessianStencil::central(2);
        let rs = classify_viscosity(&p, &u, &times, 1e-8, &c).unwrap();
        let rv = classify_viscosity(&p, &v, &times, 1e-8, &c).unwrap();
        assert!(rs.pass, "{}", rs.summary());
        assert!(rv.pass, "{}", rv.summary());
    }

    #[test]
    fn static_solution_is_both() {
        let g = Arc::new(TorusGrid::uniform(2, 12, 2).unwrap());
        let metric = crate::grid::MetricField::from_fn(g.clone(), 2, |y| vec![1.0 + 0.2 * y[0].cos(), 0.0, 0.0, 1.0]).unwrap();
        let w = ScalarField::from_fn(g.clone(), |y| 1.0 + 0.3 * y[1].sin()).unwrap();
        let sol = crate::static_solver::solve_base_equation(&metric, &w, StaticMethod::DampedNewton, 1e-13, 50).unwrap();
        let p = FlowProblem::unnormalized(metric, w).unwrap();
        let c = HessianStencil::central(2);
        for kind in [BarrierKind::Sub, BarrierKind::Super] {
            let b = ConstantBarrier { kind, field: sol.psi.clone() };
            let r = classify_viscosity(&p, &b, &[0.0, 1.0], 1e-10, &c).unwrap();
            assert!(r.pass, "{}", r.summary());
        }
    }

    #[test]
    fn scalar_decay_has_unit_rate() {
        let p = constant_model(8);
        let zero = ScalarField::constant(p.grid().clone(), 0.0);
        let phi0 = ScalarField::constant(p.grid().clone(), 0.3);
        let traj = run(&p, &phi0, 10.0, &FlowOptions::default(), &[], Some(&zero)).unwrap();
        let fit = convergence_rate_fit(&traj, (2.0, 9.0)).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.plain_slope + 1.0).abs() < 1e-3, "{fit:?}");
        assert!(fit.monotone);
        assert!(convergence_rate_fit(&traj, (3.0, 3.0)).is_err());
    }

    #[test]
    fn floor_shortens_window() {
        let rows = (0..=100)
            .map(|i| {
                let t = i as f64 * 0.5;
                DiagnosticRow { t, sup_phi: 0.0, inf_phi: 0.0, integral: 0.0, dist_static: Some((1.0 + t) * (-t).exp()), max_residual: None, dt: 0.5 }
            })
            .collect();
        let traj = Trajectory { snapshots: vec![], diagnostics: rows, rejected_halvings: 0 };
        let fit = convergence_rate_fit(&traj, (2.0, 50.0)).unwrap();
        assert!(!fit.warnings.is_empty());
        assert!(fit.window.1 < 35.0);
        assert!((fit.slope + 1.0).abs() < 1e-9 && (fit.power - 1.0).abs() < 1e-8);
        assert!((fit.literal_slope + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_bump_pairs_coincide() {
        let p = constant_model(12);
        let opts = StressOptions { zero_bump: true, t_end: 0.1, central: false, ..StressOptions::default() };
        let r = discrete_comparison_stress(&p, 1, 7, &opts).unwrap();
        assert!(r.wide.pass);
        assert_eq!(r.wide_stats.worst, 0.0);
        assert!(discrete_comparison_stress(&p, 0, 7, &opts).is_err());
    }

    #[test]
    fn stress_is_deterministic_and_ordered() {
        let p = generic_model(12);
        let opts = StressOptions { t_end: 0.1, ..StressOptions::default() };
        let a = discrete_comparison_stress(&p, 3, 11, &opts).unwrap();
        let b = discrete_comparison_stress(&p, 3, 11, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.wide.pass, "{}", a.wide.summary());
        assert!(a.central.is_some());
    }

    #[test]
    fn calibration_is_small_and_positive() {
        let c = calibrate_tolerance(16, 0.02, 1.0, 0.05).unwrap();
        assert!(c.e_space > 0.0 && c.e_time > 0.0);
        assert!(c.tolerance < 1e-2, "{c:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn report_fails_iff_worst_exceeds_tol(mags in proptest::collection::vec(-1.0f64..1.0, 1..10), tol in 0.0f64..0.5) {
            let per: Vec<Violation> = mags.iter().enumerate().map(|(i, &m)| Violation { t: i as f64, node: i, magnitude: m }).collect();
            let r = ComparisonReport::assemble("x", per, tol, 0, ReportMeta::default());
            let worst = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(r.pass, worst <= tol);
            prop_assert_eq!(r.worst.magnitude, worst);
        }
    }
}
