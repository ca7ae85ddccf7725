//! Python bindings: `krflab.Lab` drives one configured experiment in memory,
//! `krflab.main` runs the command line.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use krf_core::barrier::{barrier_g, barrier_h};
use krf_core::config::{parse_config_str, RunConfig};
use krf_core::error::KrfError;
use krf_core::expr::Expr;
use krf_core::flow::{run, Trajectory};
use krf_core::grid::ScalarField;
use krf_core::model::{build_product_problem, semiflat_solve, FlowProblem};
use krf_core::static_solver::solve_static_with;
use krf_core::verify::convergence_rate_fit;

fn to_py(e: KrfError) -> PyErr {
    match e {
        KrfError::Config { .. } | KrfError::Parse { .. } | KrfError::Argument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// One experiment: a parsed config, its model, and the results computed so far.
#[pyclass]
struct Lab {
    config: RunConfig,
    problem: FlowProblem,
    phi_inf: Option<ScalarField>,
    trajectory: Option<Trajectory>,
}

#[pymethods]
impl Lab {
    /// Parses a TOML config (no environment overrides) and builds the model.
    #[new]
    fn new(config_toml: &str) -> PyResult<Self> {
        let config = parse_config_str(config_toml, std::iter::empty()).map_err(to_py)?;
        let problem = build_product_problem(&config.model_spec().map_err(to_py)?).map_err(to_py)?;
        Ok(Self {
            config,
            problem,
            phi_inf: None,
            trajectory: None,
        })
    }

    /// Content hash of the resolved config.
    #[getter]
    fn hash(&self) -> String {
        self.config.hash()
    }

    #[getter]
    fn points(&self) -> Vec<usize> {
        self.problem.grid().points().to_vec()
    }

    /// Solves the semi-flat and limit equations; returns `φ∞` (row-major, last axis fastest).
    fn solve_static(&mut self) -> PyResult<Vec<f64>> {
        let s = &self.config.solver;
        let sf = semiflat_solve(&self.problem, s.semiflat_tol).map_err(to_py)?;
        let sol = solve_static_with(&self.problem, &sf, self.config.static_method(), s.tol, s.max_iter).map_err(to_py)?;
        let lifted = sol.lifted.ok_or_else(|| PyRuntimeError::new_err("limit solution was not lifted"))?;
        let out = lifted.values().to_vec();
        self.phi_inf = Some(lifted);
        Ok(out)
    }

    /// Runs the flow to `flow.t_end`; returns the diagnostic series as a dict of columns.
    fn run_flow<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        if self.phi_inf.is_none() {
            self.solve_static()?;
        }
        let f = &self.config.flow;
        let init = Expr::parse(&f.initial).map_err(to_py)?;
        let phi0 = ScalarField::from_fn(self.problem.grid().clone(), |y| init.eval(y, 0.0)).map_err(to_py)?;
        let opts = self.config.flow_options().map_err(to_py)?;
        let traj = py
            .detach(|| run(&self.problem, &phi0, f.t_end, &opts, &f.snapshots, self.phi_inf.as_ref()))
            .map_err(to_py)?;
        let rows = &traj.diagnostics;
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("t", rows.iter().map(|r| r.t).collect::<Vec<_>>())?;
        dict.set_item("sup_phi", rows.iter().map(|r| r.sup_phi).collect::<Vec<_>>())?;
        dict.set_item("inf_phi", rows.iter().map(|r| r.inf_phi).collect::<Vec<_>>())?;
        dict.set_item("I_t", rows.iter().map(|r| r.integral).collect::<Vec<_>>())?;
        dict.set_item("dist_static", rows.iter().map(|r| r.dist_static).collect::<Vec<_>>())?;
        dict.set_item("dt", rows.iter().map(|r| r.dt).collect::<Vec<_>>())?;
        self.trajectory = Some(traj);
        Ok(dict)
    }

    /// `(slope, c_fit, power)` of `log d = log c + power·log(1+t) + slope·t` on `[t0, t1]`.
    fn rate_fit(&self, t0: f64, t1: f64) -> PyResult<(f64, f64, f64)> {
        let traj = self
            .trajectory
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("run_flow has not been called"))?;
        let fit = convergence_rate_fit(traj, (t0, t1)).map_err(to_py)?;
        Ok((fit.slope, fit.c_fit, fit.power))
    }
}

/// Lower barrier correction `h(t)` for Kodaira dimension `kappa`.
#[pyfunction]
fn ode_h(kappa: usize, t: f64) -> PyResult<f64> {
    Ok(barrier_h(kappa).map_err(to_py)?.eval(t))
}

/// Upper barrier correction `g(t)` with constant `b`.
#[pyfunction]
fn ode_g(kappa: usize, b: f64, t: f64) -> PyResult<f64> {
    Ok(barrier_g(kappa, b).map_err(to_py)?.eval(t))
}

/// Runs the `krf` command line with `args` (without the program name); returns the exit status.
#[pyfunction]
fn main(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("krf".to_string()).chain(args).collect();
    py.detach(|| krf_core::cli::run_cli(argv))
}

#[pymodule]
fn krflab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lab>()?;
    m.add_function(wrap_pyfunction!(ode_h, m)?)?;
    m.add_function(wrap_pyfunction!(ode_g, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
