//! The limit equation `det(Achi + D²ψ) = e^ψ W` on the base, and its lift.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{KrfError, Result};
use crate::flow::{FlowOptions, FlowState, Stepper, TimeScheme};
use crate::grid::{MetricField, ScalarField};
use crate::linalg;
use crate::model::{self, FlowProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticMethod {
    DampedNewton,
    PseudoTime,
}

#[derive(Debug, Clone)]
pub struct StaticSolution {
    pub psi: ScalarField,
    /// Right-hand side `W` the equation was solved with.
    pub density: ScalarField,
    /// `(iteration, sup|det - e^ψ W| / sup W)`.
    pub residual_history: Vec<(usize, f64)>,
    /// `ψ` pulled back to the full grid; `None` for a bare base solve.
    pub lifted: Option<ScalarField>,
}

impl StaticSolution {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().map_or(f64::INFINITY, |r| r.1)
    }
}

fn relative_residual(rhs: &[f64], psi: &[f64], w: &[f64], w_sup: f64) -> f64 {
    // rhs = log det - log W - ψ, so det - e^ψ W = e^ψ W (e^rhs - 1).
    rhs.iter()
        .zip(psi.iter().zip(w))
        .map(|(r, (p, wv))| (p.exp() * wv * r.exp_m1()).abs())
        .fold(0.0, f64::max)
        / w_sup
}

/// Solves `det(achi + D²ψ) = e^ψ w` on a grid with `κ = n`.
pub fn solve_base_equation(achi: &MetricField, w: &ScalarField, method: StaticMethod, tol: f64, max_iter: usize) -> Result<StaticSolution> {
    if !(tol > 0.0) {
        return Err(KrfError::config("static.tol", "must be positive"));
    }
    if let Some(i) = w.values().iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(KrfError::Model(format!("density is not positive at base node {i}")));
    }
    let problem = FlowProblem::unnormalized(achi.clone(), w.clone())?;
    let grid = problem.grid().clone();
    let n = grid.n_dims();
    let w_sup = w.max();
    let log_ratio: Vec<f64> = (0..grid.node_count())
        .map(|i| linalg::det(achi.matrix(i), n).ln() - w.get(i).ln())
        .collect();
    let psi0 = log_ratio.iter().sum::<f64>() / log_ratio.len() as f64;
    let mut psi = vec![psi0; grid.node_count()];

    let options = FlowOptions {
        scheme: TimeScheme::Rosenbrock,
        dt0: 0.5,
        dt_max: 1e8,
        adaptive: false,
        ..FlowOptions::default()
    };
    let mut stepper = Stepper::new(&problem, options)?;
    let eval = |stepper: &Stepper, psi: &[f64], jac: bool| {
        stepper
            .evaluate(0.0, psi, jac)
            .map_err(|(node, min_eigenvalue)| KrfError::Admissibility { node, min_eigenvalue })
    };
    let mut current = eval(&stepper, &psi, true)?;
    let mut res = relative_residual(&current.rhs, &psi, w.values(), w_sup);
    let mut history = vec![(0, res)];
    let finish = |psi: Vec<f64>, history: Vec<(usize, f64)>| StaticSolution {
        psi: ScalarField::from_values_unchecked(grid.clone(), psi),
        density: w.clone(),
        residual_history: history,
        lifted: None,
    };
    let fail = |message: &str, history: &[(usize, f64)]| KrfError::Solver {
        message: message.into(),
        history: history.iter().map(|h| h.1).collect(),
    };

    match method {
        StaticMethod::DampedNewton => {
            for iter in 1..=max_iter {
                if res <= tol {
                    return Ok(finish(psi, history));
                }
                let (stencil, pattern) = stepper.jacobian_pattern().expect("central stencil");
                let slots = stencil.slots();
                let mut values = current.weights.clone();
                values.chunks_mut(slots).for_each(|row| row[0] -= 1.0);
                let rhs: Vec<f64> = current.rhs.iter().map(|r| -r).collect();
                let delta = pattern.factorize(&values)?.solve(&rhs)?;
                let norm = current.rhs.iter().fold(0.0f64, |m, r| m.max(r.abs()));
                let mut step = 1.0;
                loop {
                    let trial: Vec<f64> = psi.iter().zip(&delta).map(|(p, d)| p + step * d).collect();
                    if let Ok(e) = stepper.evaluate(0.0, &trial, true) {
                        let trial_norm = e.rhs.iter().fold(0.0f64, |m, r| m.max(r.abs()));
                        if trial_norm < norm || trial_norm == 0.0 {
                            psi = trial;
                            current = e;
                            break;
                        }
                    }
                    step *= 0.5;
                    if step < 1e-12 {
                        return Err(fail("no damped Newton step keeps the matrix positive definite and reduces the residual", &history));
                    }
                }
                res = relative_residual(&current.rhs, &psi, w.values(), w_sup);
                history.push((iter, res));
            }
        }
        StaticMethod::PseudoTime => {
            let mut state = FlowState::initial(ScalarField::from_values_unchecked(grid.clone(), psi.clone()));
            let mut dt: f64 = 0.5;
            for iter in 1..=max_iter {
                if res <= tol {
                    return Ok(finish(psi, history));
                }
                // The problem is autonomous, so time is reset to keep the cache keyed on ψ only.
                state.t = 0.0;
                let (next, report) = stepper.step(&state, dt)?;
                state = next;
                state.t = 0.0;
                let e = eval(&stepper, state.phi.values(), false)?;
                res = relative_residual(&e.rhs, state.phi.values(), w.values(), w_sup);
                history.push((iter, res));
                psi = state.phi.values().to_vec();
                dt = (report.dt * 2.0).min(1e8);
            }
        }
    }
    if res <= tol {
        return Ok(finish(psi, history));
    }
    Err(fail("maximum number of iterations reached", &history))
}

/// Solves the limit equation of `problem` with `W` from the fiber integral of
/// the density and the semi-flat constants, and lifts the solution.
pub fn solve_static(problem: &FlowProblem, method: StaticMethod, tol: f64, max_iter: usize) -> Result<StaticSolution> {
    let semiflat = model::semiflat_solve(problem, 1e-12)?;
    solve_static_with(problem, &semiflat, method, tol, max_iter)
}

pub fn solve_static_with(problem: &FlowProblem, semiflat: &model::SemiFlatField, method: StaticMethod, tol: f64, max_iter: usize) -> Result<StaticSolution> {
    let w = model::base_density(problem, semiflat)?;
    let base = Arc::new(problem.grid().base_grid());
    let k = problem.kappa();
    let fc = problem.grid().fiber_count();
    let n = problem.dims();
    let data = (0..base.node_count())
        .flat_map(|b| model::block(problem.achi().matrix(b * fc), n, 0, k))
        .collect();
    let achi = MetricField::from_data_unchecked(base, k, data);
    let mut sol = solve_base_equation(&achi, &w, method, tol, max_iter)?;
    sol.lifted = Some(lift_to_total(problem, &sol.psi)?);
    Ok(sol)
}

/// `ψ ∘ j`: the base field repeated along every fiber.
pub fn lift_to_total(problem: &FlowProblem, psi: &ScalarField) -> Result<ScalarField> {
    let grid = problem.grid();
    if **psi.grid() != grid.base_grid() {
        return Err(KrfError::Argument("ψ does not live on the base grid of the problem".into()));
    }
    let values = (0..grid.node_count()).map(|node| psi.get(grid.base_index(node))).collect();
    Ok(ScalarField::from_values_unchecked(grid.clone(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::model::{build_product_problem, pushforward_density, ModelSpec, ReactionSpec};
    use crate::expr::Expr;
    use std::f64::consts::PI;

    fn base_grid(n: usize, p: usize) -> Arc<TorusGrid> {
        Arc::new(TorusGrid::uniform(n, p, n).unwrap())
    }

    fn identity(g: &Arc<TorusGrid>, a: f64) -> MetricField {
        let n = g.n_dims();
        MetricField::from_fn(g.clone(), n, |_| (0..n * n).map(|q| if q % (n + 1) == 0 { a } else { 0.0 }).collect()).unwrap()
    }

    #[test]
    fn constant_model_has_closed_form_solution() {
        for method in [StaticMethod::DampedNewton, StaticMethod::PseudoTime] {
            let g = base_grid(2, 8);
            let w = ScalarField::constant(g.clone(), 0.7);
            let sol = solve_base_equation(&identity(&g, 1.5), &w, method, 1e-12, 50).unwrap();
            let expected = (1.5f64 * 1.5 / 0.7).ln();
            assert!(sol.psi.values().iter().all(|v| (v - expected).abs() < 1e-12));
            // Scaling w by e^δ shifts ψ by -δ.
            let w2 = w.map(|v| v * 0.25f64.exp());
            let sol2 = solve_base_equation(&identity(&g, 1.5), &w2, method, 1e-12, 50).unwrap();
            assert!((sol2.psi.get(3) - (expected - 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_and_pseudo_time_agree() {
        let g = base_grid(1, 64);
        let raw = ScalarField::from_fn(g.clone(), |y| (0.2 * y[0].cos()).exp()).unwrap();
        let z = raw.integral();
        let w = raw.map(|v| v / z);
        let achi = identity(&g, 1.0);
        let a = solve_base_equation(&achi, &w, StaticMethod::DampedNewton, 1e-10, 50).unwrap();
        let b = solve_base_equation(&achi, &w, StaticMethod::PseudoTime, 1e-10, 200).unwrap();
        assert!(a.final_residual() <= 1e-8 && b.final_residual() <= 1e-8);
        let diff = a.psi.values().iter().zip(b.psi.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "diff {diff}");
        // Substitution oracle: plug ψ back into the discrete equation.
        let h = g.spacing()[0];
        let p = a.psi.values();
        let m = p.len();
        for i in 0..m {
            let d2 = (p[(i + 1) % m] - 2.0 * p[i] + p[(i + m - 1) % m]) / (h * h);
            assert!(((1.0 + d2) - p[i].exp() * w.get(i)).abs() <= 1e-8 * w.max());
        }
    }

    #[test]
    fn newton_converges_quadratically() {
        let g = base_grid(2, 16);
        let w = ScalarField::from_fn(g.clone(), |y| 0.1 * (1.0 + 0.5 * y[0].cos() * y[1].sin())).unwrap();
        let sol = solve_base_equation(&identity(&g, 1.0), &w, StaticMethod::DampedNewton, 1e-13, 50).unwrap();
        let r: Vec<f64> = sol.residual_history.iter().map(|h| h.1).collect();
        let k = r.iter().position(|&v| v < 1e-3).unwrap();
        if k + 1 < r.len() && r[k + 1] > 1e-13 {
            assert!(r[k + 1] <= 10.0 * r[k] * r[k], "{r:?}");
        }
    }

    #[test]
    fn rejects_zero_density_and_reports_history() {
        let g = base_grid(1, 8);
        let mut w = ScalarField::constant(g.clone(), 1.0);
        w.values_mut()[3] = 0.0;
        assert!(matches!(
            solve_base_equation(&identity(&g, 1.0), &w, StaticMethod::DampedNewton, 1e-10, 10),
            Err(KrfError::Model(_))
        ));
        let w = ScalarField::from_fn(g.clone(), |y| 1.0 + 0.9 * y[0].cos()).unwrap();
        match solve_base_equation(&identity(&g, 1.0), &w, StaticMethod::PseudoTime, 1e-14, 1) {
            Err(KrfError::Solver { history, .. }) => assert_eq!(history.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lift_is_constant_along_fibers() {
        let p = build_product_problem(&ModelSpec {
            dims: 2,
            points: vec![8, 8],
            kappa: 1,
            a0: ["1", "0", "0", "1"].iter().map(|s| Expr::parse(s).unwrap()).collect(),
            achi: vec![Expr::parse("1").unwrap()],
            f_mu: Expr::parse("1").unwrap(),
            reaction: ReactionSpec::Identity,
        })
        .unwrap();
        let base = Arc::new(p.grid().base_grid());
        let psi = ScalarField::from_fn(base, |y| y[0].cos()).unwrap();
        let lifted = lift_to_total(&p, &psi).unwrap();
        for node in 0..p.grid().node_count() {
            let y = p.grid().coords(node);
            assert_eq!(lifted.get(node), y[0].cos());
            assert_eq!(lifted.get(node), lifted.get(p.grid().shift(node, 1, 1)));
        }
        assert!(lift_to_total(&p, &lifted).is_err());

        // Constant product model: w = 1/(2π), c = 1/(2π²), so W = 2w/(2πc) = 1 and ψ = 0.
        let sol = solve_static(&p, StaticMethod::DampedNewton, 1e-12, 20).unwrap();
        assert!(sol.lifted.unwrap().values().iter().all(|v| v.abs() < 1e-12));
        assert!(sol.density.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!((pushforward_density(&p).get(0) - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }
}
