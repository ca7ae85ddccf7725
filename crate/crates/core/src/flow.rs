//! Time stepping of the normalized flow
//! `∂_t φ = log det(θ_t + D²φ) - log(C(n,κ) e^{-(n-κ)t} f) - F(t, x, φ)`.
//!
//! Two schemes are available. [`TimeScheme::SemiImplicit`] treats the reaction
//! implicitly and the Monge-Ampère term explicitly; its stable step shrinks like
//! `e^{-t} h²` on collapsing fibers. [`TimeScheme::Rosenbrock`] is the two-stage
//! second-order Rosenbrock method ROS2 with the linearized operator
//! `tr((θ_t + D²φ)^{-1} D²·) - F_r` factored once per step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KrfError, Result};
use crate::grid::{stable_sum, ScalarField};
use crate::linalg;
use crate::ma::{CentralStencil, HessianStencil, Operator, StencilScheme};
use crate::model::FlowProblem;
use crate::sparse::SparsePattern;

const ROS2_GAMMA: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    SemiImplicit,
    #[default]
    Rosenbrock,
}

/// Step control.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOptions {
    pub scheme: TimeScheme,
    /// `None` selects the central stencil.
    pub stencil: Option<HessianStencil>,
    pub dt0: f64,
    pub dt_max: f64,
    pub dt_min: f64,
    /// Grow or shrink `dt` from the change of `sup|φ̇|` per step, relative to
    /// `max(sup|φ̇|, 1)`; steps landing on a snapshot time keep `dt`.
    pub adaptive: bool,
    pub target_change: f64,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            scheme: TimeScheme::Rosenbrock,
            stencil: None,
            dt0: 1e-3,
            dt_max: 0.02,
            dt_min: 1e-8,
            adaptive: true,
            target_change: 0.1,
            max_steps: 1_000_000,
        }
    }
}

impl FlowOptions {
    pub fn stencil_for(&self, n_dims: usize) -> HessianStencil {
        self.stencil.clone().unwrap_or_else(|| HessianStencil::central(n_dims))
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt0 > 0.0) || !self.dt0.is_finite() {
            return Err(KrfError::Argument(format!("time step must be positive, got {}", self.dt0)));
        }
        if !(self.dt_min > 0.0) || !(self.dt_max >= self.dt_min) {
            return Err(KrfError::config("flow.dt_max", "need 0 < dt_min <= dt_max"));
        }
        if !(self.target_change > 0.0) {
            return Err(KrfError::config("flow.target_change", "must be positive"));
        }
        Ok(())
    }
}

/// A point of a discrete trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub phi: ScalarField,
    /// `(φ^{k+1} - φ^k) / dt` of the last accepted step (zero initially).
    pub last_phi_dot: ScalarField,
    pub step_index: usize,
}

impl FlowState {
    pub fn initial(phi0: ScalarField) -> Self {
        let zero = ScalarField::constant(phi0.grid().clone(), 0.0);
        Self {
            t: 0.0,
            phi: phi0,
            last_phi_dot: zero,
            step_index: 0,
        }
    }
}

/// Per-node log determinants at one state, and optionally the linearization weights.
pub(crate) struct Evaluation {
    pub t: f64,
    pub phi: Vec<f64>,
    /// `f(t, φ)`, the right-hand side of the flow.
    pub rhs: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Outcome of an accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub dt: f64,
    pub halvings: usize,
    /// `sup |f(t_{k+1}, φ^{k+1}) - φ̇|` with `φ̇` the realized time derivative.
    pub max_residual: f64,
}

/// Reusable stepping machinery for one problem.
pub struct Stepper<'a> {
    problem: &'a FlowProblem,
    options: FlowOptions,
    op: Operator,
    central: Option<CentralStencil>,
    pattern: Option<SparsePattern>,
    cache: Option<Evaluation>,
}

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a FlowProblem, options: FlowOptions) -> Result<Self> {
        options.validate()?;
        let grid = problem.grid();
        let stencil = options.stencil_for(grid.n_dims());
        let op = Operator::new(grid, &stencil)?;
        let (central, pattern) = match options.scheme {
            TimeScheme::SemiImplicit => (None, None),
            TimeScheme::Rosenbrock => {
                if stencil.scheme() != StencilScheme::Central {
                    return Err(KrfError::config("flow.scheme", "the Rosenbrock scheme needs the central stencil"));
                }
                let c = CentralStencil::new(grid);
                let p = SparsePattern::new(grid.node_count(), &c.sparse_pairs())?;
                (Some(c), Some(p))
            }
        };
        Ok(Self {
            problem,
            options,
            op,
            central,
            pattern,
            cache: None,
        })
    }

    pub fn options(&self) -> &FlowOptions {
        &self.options
    }

    pub(crate) fn jacobian_pattern(&self) -> Option<(&CentralStencil, &SparsePattern)> {
        Some((self.central.as_ref()?, self.pattern.as_ref()?))
    }

    /// Right-hand side at `(t, φ)`, or the first node (and its smallest
    /// eigenvalue) where `θ_t + D²φ` is not positive definite.
    pub(crate) fn evaluate(&self, t: f64, phi: &[f64], jacobian: bool) -> std::result::Result<Evaluation, (usize, f64)> {
        let p = self.problem;
        let n = p.dims();
        let nn = phi.len();
        let log_collapse = p.log_collapse(t);
        let log_f = p.log_f_eq();
        let slope = p.reaction().slope();
        let offset = p.reaction().offset_field(p.grid(), t);
        let rhs_at = |node: usize, logdet: f64| {
            logdet - log_collapse - log_f[node] - slope * phi[node] - offset.as_ref().map_or(0.0, |b| b[node])
        };
        let mut weights = vec![];
        let out: Vec<std::result::Result<f64, f64>> = match (&self.central, jacobian) {
            (Some(c), true) => {
                let slots = c.slots();
                weights = vec![0.0; nn * slots];
                weights
                    .par_chunks_mut(slots)
                    .enumerate()
                    .map_init(
                        || (vec![0.0; n * n], vec![0.0; n * n]),
                        |(theta, scratch), (node, w)| {
                            p.theta_into(node, t, theta);
                            c.hessian(phi, node, scratch);
                            theta.iter_mut().zip(scratch.iter()).for_each(|(a, b)| *a += b);
                            if !linalg::is_positive_definite(theta, n) {
                                return Err(linalg::min_eigenvalue(theta, n));
                            }
                            let minv = linalg::inverse(theta, n).ok_or(0.0)?;
                            c.trace_weights(&minv, w);
                            Ok(rhs_at(node, linalg::det(theta, n).ln()))
                        },
                    )
                    .collect()
            }
            _ => (0..nn)
                .into_par_iter()
                .map_init(
                    || (vec![0.0; n * n], vec![0.0; n * n]),
                    |(theta, scratch), node| {
                        p.theta_into(node, t, theta);
                        self.op.det_strict(theta, phi, node, scratch).map(|d| rhs_at(node, d.ln()))
                    },
                )
                .collect(),
        };
        let mut rhs = Vec::with_capacity(nn);
        for (node, r) in out.into_iter().enumerate() {
            match r {
                Ok(v) if v.is_finite() => rhs.push(v),
                Ok(_) => return Err((node, 0.0)),
                Err(low) => return Err((node, low)),
            }
        }
        Ok(Evaluation {
            t,
            phi: phi.to_vec(),
            rhs,
            weights,
        })
    }

    fn current(&mut self, state: &FlowState) -> Result<Evaluation> {
        if let Some(c) = self.cache.take() {
            if c.t == state.t && c.phi == state.phi.values() && (self.central.is_none() || !c.weights.is_empty()) {
                return Ok(c);
            }
        }
        self.evaluate(state.t, state.phi.values(), self.central.is_some())
            .map_err(|(node, min_eigenvalue)| KrfError::Admissibility { node, min_eigenvalue })
    }

    /// Attempts one step of size `dt`, halving on loss of admissibility.
    pub fn step(&mut self, state: &FlowState, dt: f64) -> Result<(FlowState, StepReport)> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(KrfError::Argument(format!("time step must be positive, got {dt}")));
        }
        if **state.phi.grid() != **self.problem.grid() {
            return Err(KrfError::Argument("state lives on a different grid".into()));
        }
        let start = self.current(state)?;
        let slope = self.problem.reaction().slope();
        let phi = state.phi.values();
        let mut dt = dt;
        let mut halvings = 0;
        loop {
            let attempt = match self.options.scheme {
                TimeScheme::SemiImplicit => {
                    let next: Vec<f64> = phi
                        .iter()
                        .zip(&start.rhs)
                        .map(|(&v, &f)| (v + dt * (f + slope * v)) / (1.0 + slope * dt))
                        .collect();
                    self.evaluate(state.t + dt, &next, false)
                }
                TimeScheme::Rosenbrock => self.ros2(&start, dt)?,
            };
            match attempt {
                Ok(eval) => {
                    let new_phi = eval.phi.clone();
                    let phi_dot: Vec<f64> = new_phi.iter().zip(phi).map(|(a, b)| (a - b) / dt).collect();
                    let max_residual = eval.rhs.iter().zip(&phi_dot).map(|(f, d)| (f - d).abs()).fold(0.0, f64::max);
                    let grid = state.phi.grid().clone();
                    let next = FlowState {
                        t: eval.t,
                        phi: ScalarField::from_values_unchecked(grid.clone(), new_phi),
                        last_phi_dot: ScalarField::from_values_unchecked(grid, phi_dot),
                        step_index: state.step_index + 1,
                    };
                    self.cache = Some(eval);
                    return Ok((next, StepReport { dt, halvings, max_residual }));
                }
                Err((node, _)) => {
                    dt *= 0.5;
                    halvings += 1;
                    if dt < self.options.dt_min {
                        self.cache = Some(start);
                        return Err(KrfError::Stability { t: state.t, dt, node });
                    }
                }
            }
        }
    }

    fn ros2(&self, start: &Evaluation, dt: f64) -> Result<std::result::Result<Evaluation, (usize, f64)>> {
        let c = self.central.as_ref().expect("Rosenbrock stepper has a stencil");
        let pattern = self.pattern.as_ref().expect("Rosenbrock stepper has a pattern");
        let slots = c.slots();
        let g = ROS2_GAMMA * dt;
        let slope = self.problem.reaction().slope();
        let mut values: Vec<f64> = start.weights.iter().map(|w| -g * w).collect();
        values.par_chunks_mut(slots).for_each(|row| row[0] += 1.0 + g * slope);
        let lu = pattern.factorize(&values)?;
        let k1 = lu.solve(&start.rhs)?;
        let stage: Vec<f64> = start.phi.iter().zip(&k1).map(|(p, k)| p + dt * k).collect();
        let t1 = start.t + dt;
        let mid = match self.evaluate(t1, &stage, false) {
            Ok(e) => e,
            Err(e) => return Ok(Err(e)),
        };
        let rhs2: Vec<f64> = mid.rhs.iter().zip(&k1).map(|(f, k)| f - 2.0 * k).collect();
        let k2 = lu.solve(&rhs2)?;
        let next: Vec<f64> = start
            .phi
            .iter()
            .zip(k1.iter().zip(&k2))
            .map(|(p, (a, b))| p + dt * (1.5 * a + 0.5 * b))
            .collect();
        Ok(self.evaluate(t1, &next, true))
    }
}

/// One semi-implicit step `φ^{k+1} = (φ^k + dt (G - b)) / (1 + F_r dt)`, halving
/// `dt` while the new iterate is not admissible.
pub fn step(problem: &FlowProblem, state: &FlowState, dt: f64, stencil: &HessianStencil) -> Result<FlowState> {
    let options = FlowOptions {
        scheme: TimeScheme::SemiImplicit,
        stencil: Some(stencil.clone()),
        dt0: if dt > 0.0 && dt.is_finite() { dt } else { 1.0 },
        dt_max: f64::MAX,
        ..FlowOptions::default()
    };
    Stepper::new(problem, options)?.step(state, dt).map(|(s, _)| s)
}

/// One row of the diagnostic series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub t: f64,
    pub sup_phi: f64,
    pub inf_phi: f64,
    /// `I(t) = Σ φ_t f_mu ΔV`.
    pub integral: f64,
    pub dist_static: Option<f64>,
    pub max_residual: Option<f64>,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<FlowState>,
    pub diagnostics: Vec<DiagnosticRow>,
    pub rejected_halvings: usize,
}

impl Trajectory {
    pub fn snapshot_at(&self, t: f64) -> Option<&FlowState> {
        self.snapshots.iter().find(|s| (s.t - t).abs() <= 1e-9 * (1.0 + t))
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> &FlowState {
        self.snapshots.last().expect("a trajectory holds its initial state")
    }
}

fn diagnostics(problem: &FlowProblem, state: &FlowState, phi_inf: Option<&ScalarField>, max_residual: Option<f64>, dt: f64) -> Result<DiagnosticRow> {
    let cv = problem.grid().cell_volume();
    let phi = state.phi.values();
    let integral = stable_sum(phi.iter().zip(problem.f_mu().values()).map(|(p, f)| p * f * cv));
    let dist_static = phi_inf.map(|pi| phi.iter().zip(pi.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    let row = DiagnosticRow {
        t: state.t,
        sup_phi: state.phi.max(),
        inf_phi: state.phi.min(),
        integral,
        dist_static,
        max_residual,
        dt,
    };
    if !(row.sup_phi.is_finite() && row.inf_phi.is_finite() && row.integral.is_finite()) {
        return Err(KrfError::Invariant(format!("non-finite diagnostics at t = {}", state.t)));
    }
    Ok(row)
}

/// Runs the flow from `phi0` to `t_end`, landing exactly on every snapshot
/// time in `schedule` (plus `0` and `t_end`).
pub fn run(
    problem: &FlowProblem,
    phi0: &ScalarField,
    t_end: f64,
    options: &FlowOptions,
    schedule: &[f64],
    phi_inf: Option<&ScalarField>,
) -> Result<Trajectory> {
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(KrfError::Argument(format!("t_end must be finite and nonnegative, got {t_end}")));
    }
    if **phi0.grid() != **problem.grid() {
        return Err(KrfError::Argument("initial potential lives on a different grid".into()));
    }
    if let Some(pi) = phi_inf {
        phi0.check_same_grid(pi)?;
    }
    let mut stepper = Stepper::new(problem, options.clone())?;
    let mut state = FlowState::initial(phi0.clone());
    let first = stepper.current(&state)?;
    let mut last_sup_dot = first.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    stepper.cache = Some(first);

    let mut targets: Vec<f64> = schedule.iter().cloned().filter(|&s| s > 0.0 && s < t_end).collect();
    targets.push(t_end);
    targets.sort_by(f64::total_cmp);
    targets.dedup();

    let mut traj = Trajectory {
        snapshots: vec![state.clone()],
        diagnostics: vec![diagnostics(problem, &state, phi_inf, None, 0.0)?],
        rejected_halvings: 0,
    };
    if t_end == 0.0 {
        return Ok(traj);
    }
    let mut dt = options.dt0.min(options.dt_max);
    for target in targets {
        while state.t < target {
            if state.step_index >= options.max_steps {
                return Err(KrfError::Solver {
                    message: format!("step limit {} reached at t = {}", options.max_steps, state.t),
                    history: vec![],
                });
            }
            let remaining = target - state.t;
            let landing = dt >= remaining * (1.0 - 1e-9);
            let trial = if landing { remaining } else { dt };
            let (mut next, report) = stepper.step(&state, trial)?;
            traj.rejected_halvings += report.halvings;
            if landing && report.halvings == 0 {
                next.t = target;
                if let Some(c) = stepper.cache.as_mut() {
                    c.t = target;
                }
            }
            let sup_dot = next.last_phi_dot.sup_norm();
            if options.adaptive && !(landing && report.halvings == 0) {
                let change = (sup_dot - last_sup_dot).abs() / last_sup_dot.max(1.0);
                let factor = (options.target_change / change.max(1e-300)).clamp(0.5, 2.0);
                dt = (report.dt * factor).clamp(options.dt_min, options.dt_max);
            } else if report.halvings > 0 {
                dt = report.dt;
            }
            last_sup_dot = sup_dot;
            state = next;
            traj.diagnostics.push(diagnostics(problem, &state, phi_inf, Some(report.max_residual), report.dt)?);
        }
        traj.snapshots.push(state.clone());
    }
    Ok(traj)
}

/// Jensen check `I'(t) + I(t) <= B(t)` along a trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegralReport {
    pub times: Vec<f64>,
    /// `I'(t) + I(t)` by finite differences in `t`.
    pub lhs: Vec<f64>,
    /// `B(t) = log(c Σ det θ_t ΔV / (C(n,κ) e^{-(n-κ)t}))`.
    pub bound: Vec<f64>,
    pub excess: Vec<f64>,
    pub max_excess: f64,
}

/// Evaluates both sides of the integral inequality on the diagnostic series.
/// Needs at least two rows.
pub fn integral_diagnostic(problem: &FlowProblem, trajectory: &Trajectory) -> Result<IntegralReport> {
    let rows = &trajectory.diagnostics;
    if rows.len() < 2 {
        return Err(KrfError::Argument("the integral diagnostic needs at least two samples".into()));
    }
    let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let i: Vec<f64> = rows.iter().map(|r| r.integral).collect();
    let m = rows.len();
    let derivative = |k: usize| -> f64 {
        if k == 0 {
            (i[1] - i[0]) / (t[1] - t[0])
        } else if k == m - 1 {
            (i[m - 1] - i[m - 2]) / (t[m - 1] - t[m - 2])
        } else {
            let (h0, h1) = (t[k] - t[k - 1], t[k + 1] - t[k]);
            (-h1 / (h0 * (h0 + h1))) * i[k - 1] + ((h1 - h0) / (h0 * h1)) * i[k] + (h0 / (h1 * (h0 + h1))) * i[k + 1]
        }
    };
    let n = problem.dims();
    let cv = problem.grid().cell_volume();
    let c = problem.normalization().volume_factor;
    let bound_at = |tt: f64| -> f64 {
        let total = (0..problem.grid().node_count())
            .into_par_iter()
            .map_init(
                || vec![0.0; n * n],
                |theta, node| {
                    problem.theta_into(node, tt, theta);
                    linalg::det(theta, n)
                },
            )
            .collect::<Vec<f64>>();
        (c * stable_sum(total) * cv).ln() - problem.log_collapse(tt)
    };
    let lhs: Vec<f64> = (0..m).map(|k| derivative(k) + i[k]).collect();
    let bound: Vec<f64> = t.iter().map(|&tt| bound_at(tt)).collect();
    let excess: Vec<f64> = lhs.iter().zip(&bound).map(|(a, b)| a - b).collect();
    let max_excess = excess.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(IntegralReport {
        times: t,
        lhs,
        bound,
        excess,
        max_excess,
    })
}
