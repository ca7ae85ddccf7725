//! Toric-periodic model geometries.
//!
//! A torus-invariant potential depends only on the `n` imaginary coordinates,
//! so `(ω + dd^c φ)^n` becomes `det(A(y) + D²φ(y))` up to a constant, with `A`
//! the metric matrix. The first `κ` axes play the role of the base of the
//! fibration; pulling back from the base means being constant along the
//! remaining axes.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KrfError, Result};
use crate::expr::Expr;
use crate::grid::{stable_sum, MetricField, ScalarField, TorusGrid};
use crate::linalg;
use crate::ma::CentralStencil;
use crate::sparse::SparsePattern;

/// The reaction term `F(t, x, r)` of the flow.
#[derive(Debug, Clone, PartialEq)]
pub enum ReactionSpec {
    /// `F(t, x, r) = r`, the normalized Kähler-Ricci flow.
    Identity,
    /// `F(t, x, r) = slope * r + offset(t, x)` with `slope >= 0`.
    Affine { slope: f64, offset: Expr },
}

impl ReactionSpec {
    pub fn affine(slope: f64, offset: Expr) -> Result<Self> {
        if !(slope >= 0.0) || !slope.is_finite() {
            return Err(KrfError::config("reaction.slope", "must be finite and nonnegative"));
        }
        Ok(ReactionSpec::Affine { slope, offset })
    }

    pub fn slope(&self) -> f64 {
        match self {
            ReactionSpec::Identity => 1.0,
            ReactionSpec::Affine { slope, .. } => *slope,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, ReactionSpec::Identity)
    }

    pub fn eval(&self, y: &[f64], t: f64, r: f64) -> f64 {
        match self {
            ReactionSpec::Identity => r,
            ReactionSpec::Affine { slope, offset } => slope * r + offset.eval(y, t),
        }
    }

    /// Offset `b(t, ·)` sampled on the grid, or `None` when it vanishes.
    pub fn offset_field(&self, grid: &TorusGrid, t: f64) -> Option<Vec<f64>> {
        match self {
            ReactionSpec::Identity => None,
            ReactionSpec::Affine { offset, .. } => Some(
                (0..grid.node_count())
                    .into_par_iter()
                    .map(|i| offset.eval(&grid.coords(i), t))
                    .collect(),
            ),
        }
    }
}

/// Rescaling applied at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Mass of the density as supplied.
    pub density_mass: f64,
    /// Factor applied to the density so that its mass is 1.
    pub density_scale: f64,
    /// Mass of the mixed volume `χ^κ ∧ ω₀^{n-κ}` before rescaling.
    pub mixed_mass: f64,
    /// Constant of the real reduction that brings the mixed-volume mass to 1.
    pub volume_factor: f64,
}

/// A complete model geometry for the flow.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    grid: Arc<TorusGrid>,
    a0: MetricField,
    achi: MetricField,
    f_mu: ScalarField,
    log_f_eq: Vec<f64>,
    reaction: ReactionSpec,
    binom: f64,
    normalization: Normalization,
}

fn check_positive_density(f: &ScalarField) -> Result<()> {
    if let Some(i) = f.values().iter().position(|&v| !(v > 0.0)) {
        return Err(KrfError::Model(format!("density is not positive at node {i} (value {})", f.get(i))));
    }
    Ok(())
}

impl FlowProblem {
    /// Validates the data and normalizes both the density and the mixed volume to mass 1.
    pub fn new(a0: MetricField, achi: MetricField, f_mu: ScalarField, reaction: ReactionSpec) -> Result<Self> {
        let grid = a0.grid().clone();
        if **achi.grid() != *grid || **f_mu.grid() != *grid {
            return Err(KrfError::Argument("model fields live on different grids".into()));
        }
        let n = grid.n_dims();
        let k = grid.base_dims();
        if a0.dim() != n || achi.dim() != n {
            return Err(KrfError::Argument("metric fields must be n x n".into()));
        }
        for node in 0..grid.node_count() {
            let m = a0.matrix(node);
            if !linalg::is_positive_definite(m, n) {
                return Err(KrfError::Model(format!(
                    "A0 is not positive definite at node {node} (smallest eigenvalue {:e})",
                    linalg::min_eigenvalue(m, n)
                )));
            }
        }
        let fc = grid.fiber_count();
        for node in 0..grid.node_count() {
            let m = achi.matrix(node);
            let scale = linalg::max_abs(m).max(1.0);
            for i in 0..n {
                for j in 0..n {
                    if (i >= k || j >= k) && m[i * n + j] != 0.0 {
                        return Err(KrfError::Model(format!("Achi has a fiber component at node {node}")));
                    }
                }
            }
            let block = block(m, n, 0, k);
            if !linalg::is_positive_definite(&block, k) {
                return Err(KrfError::Model(format!(
                    "base block of Achi is not positive definite at node {node} (smallest eigenvalue {:e})",
                    linalg::min_eigenvalue(&block, k)
                )));
            }
            let first = achi.matrix(grid.base_index(node) * fc);
            if m.iter().zip(first).any(|(a, b)| (a - b).abs() > 1e-12 * scale) {
                return Err(KrfError::Model(format!("Achi varies along the fiber through node {node}")));
            }
        }
        check_positive_density(&f_mu)?;

        let density_mass = f_mu.integral();
        let density_scale = 1.0 / density_mass;
        let f_mu = f_mu.map(|v| v * density_scale);
        let binom = linalg::binomial(n, k);
        let cv = grid.cell_volume();
        let mixed_mass = stable_sum((0..grid.node_count()).map(|node| {
            let (a, c) = (a0.matrix(node), achi.matrix(node));
            linalg::det(&block(c, n, 0, k), k) * linalg::det(&block(a, n, k, n - k), n - k) / binom * cv
        }));
        let volume_factor = 1.0 / mixed_mass;
        let normalization = Normalization {
            density_mass,
            density_scale,
            mixed_mass,
            volume_factor,
        };
        Ok(Self::assemble(a0, achi, f_mu, reaction, normalization))
    }

    /// A problem on a grid with `κ = n` whose density is used as given
    /// (volume factor 1). This is the form of the limit equation on the base.
    pub fn unnormalized(metric: MetricField, density: ScalarField) -> Result<Self> {
        let grid = metric.grid().clone();
        if grid.base_dims() != grid.n_dims() {
            return Err(KrfError::Argument("unnormalized problems live on the base (kappa = n)".into()));
        }
        if **density.grid() != *grid {
            return Err(KrfError::Argument("density lives on a different grid".into()));
        }
        let n = grid.n_dims();
        for node in 0..grid.node_count() {
            if !linalg::is_positive_definite(metric.matrix(node), n) {
                return Err(KrfError::Model(format!("metric is not positive definite at node {node}")));
            }
        }
        check_positive_density(&density)?;
        let normalization = Normalization {
            density_mass: density.integral(),
            density_scale: 1.0,
            mixed_mass: 1.0,
            volume_factor: 1.0,
        };
        Ok(Self::assemble(metric.clone(), metric, density, ReactionSpec::Identity, normalization))
    }

    fn assemble(a0: MetricField, achi: MetricField, f_mu: ScalarField, reaction: ReactionSpec, normalization: Normalization) -> Self {
        let grid = a0.grid().clone();
        let log_c = normalization.volume_factor.ln();
        let log_f_eq = f_mu.values().iter().map(|v| v.ln() - log_c).collect();
        let binom = linalg::binomial(grid.n_dims(), grid.base_dims());
        Self {
            grid,
            a0,
            achi,
            f_mu,
            log_f_eq,
            reaction,
            binom,
            normalization,
        }
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn dims(&self) -> usize {
        self.grid.n_dims()
    }

    pub fn kappa(&self) -> usize {
        self.grid.base_dims()
    }

    pub fn a0(&self) -> &MetricField {
        &self.a0
    }

    pub fn achi(&self) -> &MetricField {
        &self.achi
    }

    /// The normalized density (mass 1).
    pub fn f_mu(&self) -> &ScalarField {
        &self.f_mu
    }

    pub fn reaction(&self) -> &ReactionSpec {
        &self.reaction
    }

    pub fn with_reaction(mut self, reaction: ReactionSpec) -> Self {
        self.reaction = reaction;
        self
    }

    /// `C(n, κ)`.
    pub fn binom(&self) -> f64 {
        self.binom
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Log of the reference density `f_mu / c` appearing in the discrete equation.
    pub fn log_f_eq(&self) -> &[f64] {
        &self.log_f_eq
    }

    pub fn f_eq(&self) -> ScalarField {
        ScalarField::from_values_unchecked(self.grid.clone(), self.log_f_eq.iter().map(|v| v.exp()).collect())
    }

    /// `log(C(n, κ) e^{-(n-κ)t})`.
    pub fn log_collapse(&self, t: f64) -> f64 {
        self.binom.ln() - (self.dims() - self.kappa()) as f64 * t
    }

    /// Writes `θ_t` at `node` into `out`.
    pub fn theta_into(&self, node: usize, t: f64, out: &mut [f64]) {
        let e = (-t).exp();
        let (a, c) = (self.a0.matrix(node), self.achi.matrix(node));
        for i in 0..out.len() {
            out[i] = c[i] + e * (a[i] - c[i]);
        }
    }
}

/// The `size x size` diagonal block starting at `start`.
pub(crate) fn block(m: &[f64], n: usize, start: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for i in start..start + size {
        out.extend_from_slice(&m[i * n + start..i * n + start + size]);
    }
    out
}

/// Expressions describing a product model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub dims: usize,
    pub points: Vec<usize>,
    pub kappa: usize,
    /// `n x n` entries of `A0`, row-major.
    pub a0: Vec<Expr>,
    /// `κ x κ` entries of the base block of `Achi`, row-major.
    pub achi: Vec<Expr>,
    pub f_mu: Expr,
    pub reaction: ReactionSpec,
}

/// Builds and normalizes the model described by `spec`.
pub fn build_product_problem(spec: &ModelSpec) -> Result<FlowProblem> {
    let grid = Arc::new(TorusGrid::new(spec.dims, &spec.points, spec.kappa)?);
    let (n, k) = (spec.dims, spec.kappa);
    if spec.a0.len() != n * n {
        return Err(KrfError::config("model.a0", format!("expected {n}x{n} entries")));
    }
    if spec.achi.len() != k * k {
        return Err(KrfError::config("model.achi", format!("expected {k}x{k} entries")));
    }
    for (name, e) in spec.a0.iter().map(|e| ("model.a0", e)).chain(spec.achi.iter().map(|e| ("model.achi", e))) {
        if e.max_coordinate() > n {
            return Err(KrfError::config(name, format!("`{}` refers to a coordinate beyond y{n}", e.source())));
        }
    }
    if let Some(e) = spec.achi.iter().find(|e| e.max_coordinate() > k) {
        return Err(KrfError::config("model.achi", format!("`{}` depends on a fiber coordinate", e.source())));
    }
    let a0 = MetricField::from_fn(grid.clone(), n, |y| spec.a0.iter().map(|e| e.eval(y, 0.0)).collect())
        .map_err(|e| KrfError::Model(format!("A0: {e}")))?;
    let achi = MetricField::from_fn(grid.clone(), n, |y| {
        let mut m = vec![0.0; n * n];
        for i in 0..k {
            for j in 0..k {
                m[i * n + j] = spec.achi[i * k + j].eval(y, 0.0);
            }
        }
        m
    })
    .map_err(|e| KrfError::Model(format!("Achi: {e}")))?;
    let f_values: Vec<f64> = (0..grid.node_count()).map(|i| spec.f_mu.eval(&grid.coords(i), 0.0)).collect();
    if let Some(i) = f_values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(KrfError::Model(format!("f_mu is not positive at node {i} (value {})", f_values[i])));
    }
    let f_mu = ScalarField::new(grid, f_values)?;
    FlowProblem::new(a0, achi, f_mu, spec.reaction.clone())
}

/// `θ_t = e^{-t} A0 + (1 - e^{-t}) Achi` at every node.
pub fn theta_at(problem: &FlowProblem, t: f64) -> Result<MetricField> {
    if !(t >= 0.0) {
        return Err(KrfError::Argument(format!("time must be nonnegative, got {t}")));
    }
    let n = problem.dims();
    let mut data = vec![0.0; problem.grid().node_count() * n * n];
    data.par_chunks_mut(n * n)
        .enumerate()
        .for_each(|(node, out)| problem.theta_into(node, t, out));
    Ok(MetricField::from_data_unchecked(problem.grid().clone(), n, data))
}

/// Fiber integral `w(y_b) = Σ_f f_mu(y_b, y_f) · (fiber cell volume)` on the base grid.
pub fn pushforward_density(problem: &FlowProblem) -> ScalarField {
    let grid = problem.grid();
    let fc = grid.fiber_count();
    let fcv = grid.fiber_cell_volume();
    let values = problem
        .f_mu()
        .values()
        .chunks(fc)
        .map(|fib| stable_sum(fib.iter().cloned()) * fcv)
        .collect();
    ScalarField::from_values_unchecked(Arc::new(grid.base_grid()), values)
}

/// Fiberwise Ricci-flat potentials and their compatibility constants.
#[derive(Debug, Clone)]
pub struct SemiFlatField {
    pub rho: ScalarField,
    /// `c(y_b)` with `det(A0_ff + D²_f ρ) = c(y_b)` along the fiber over `y_b`.
    pub fiber_constants: Vec<f64>,
    /// Largest relative deviation `|det - c| / c` over all nodes.
    pub residual: f64,
    /// Newton iterations of the slowest fiber.
    pub iterations: usize,
}

/// Smallest tolerance accepted by [`semiflat_solve`].
pub const MIN_SEMIFLAT_TOL: f64 = 1e-14;

/// Solves `det(A0_ff + D²_f ρ) = c(y_b)` on every fiber, with `ρ` of fiber mean zero.
///
/// The unknowns per fiber are the fiber values of `ρ` and `λ = log c`; the
/// extra equation is the zero-mean constraint. Newton steps on the log form are
/// halved until the fiber matrices stay positive definite and the residual drops.
pub fn semiflat_solve(problem: &FlowProblem, tol: f64) -> Result<SemiFlatField> {
    if !(tol >= MIN_SEMIFLAT_TOL) {
        return Err(KrfError::Solver {
            message: format!("tolerance {tol:e} is below the attainable minimum {MIN_SEMIFLAT_TOL:e}"),
            history: vec![],
        });
    }
    let grid = problem.grid();
    let (n, k) = (grid.n_dims(), grid.base_dims());
    let nb = grid.base_count();
    let Some(fgrid) = grid.fiber_grid() else {
        return Ok(SemiFlatField {
            rho: ScalarField::constant(grid.clone(), 0.0),
            fiber_constants: vec![1.0; nb],
            residual: 0.0,
            iterations: 0,
        });
    };
    let nf = n - k;
    let fc = grid.fiber_count();
    let blocks: Vec<f64> = (0..grid.node_count())
        .flat_map(|node| block(problem.a0().matrix(node), n, k, nf))
        .collect();
    for node in 0..grid.node_count() {
        let b = &blocks[node * nf * nf..(node + 1) * nf * nf];
        if !linalg::is_positive_definite(b, nf) {
            return Err(KrfError::Model(format!("fiber block of A0 is not positive definite at node {node}")));
        }
    }
    let stencil = CentralStencil::new(&fgrid);
    let mut pairs = stencil.sparse_pairs();
    for i in 0..fc {
        pairs.push((i, fc));
        pairs.push((fc, i));
    }
    let pattern = SparsePattern::new(fc + 1, &pairs)?;

    let fibers: Vec<(Vec<f64>, f64, f64, usize)> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let a = &blocks[b * fc * nf * nf..(b + 1) * fc * nf * nf];
            solve_fiber(a, nf, &stencil, &pattern, tol)
        })
        .collect::<Result<_>>()?;

    let mut rho = Vec::with_capacity(grid.node_count());
    let mut constants = Vec::with_capacity(nb);
    let mut residual: f64 = 0.0;
    let mut iterations = 0;
    for (r, c, res, it) in fibers {
        rho.extend(r);
        constants.push(c);
        residual = residual.max(res);
        iterations = iterations.max(it);
    }
    Ok(SemiFlatField {
        rho: ScalarField::new(grid.clone(), rho)?,
        fiber_constants: constants,
        residual,
        iterations,
    })
}

fn solve_fiber(a: &[f64], nf: usize, stencil: &CentralStencil, pattern: &SparsePattern, tol: f64) -> Result<(Vec<f64>, f64, f64, usize)> {
    let m = nf * nf;
    let fc = a.len() / m;
    let first = &a[..m];
    let scale = linalg::max_abs(first);
    if a.chunks(m).all(|b| b.iter().zip(first).all(|(x, y)| (x - y).abs() <= 1e-15 * scale)) {
        return Ok((vec![0.0; fc], linalg::det(first, nf), 0.0, 0));
    }

    let mut scratch = vec![0.0; m];
    let mut mat = vec![0.0; m];
    // Returns per-node log det, or None if some matrix is not positive definite.
    let eval = |rho: &[f64], mat: &mut [f64], scratch: &mut [f64]| -> Option<Vec<f64>> {
        (0..fc)
            .map(|i| {
                stencil.hessian(rho, i, scratch);
                for q in 0..m {
                    mat[q] = a[i * m + q] + scratch[q];
                }
                linalg::is_positive_definite(mat, nf).then(|| linalg::det(mat, nf).ln())
            })
            .collect()
    };
    let measure = |logdet: &[f64], lambda: f64| logdet.iter().map(|l| (l - lambda).exp_m1().abs()).fold(0.0, f64::max);

    let mut rho = vec![0.0; fc];
    let mut logdet = eval(&rho, &mut mat, &mut scratch).expect("checked positive definite");
    let mut lambda = logdet.iter().sum::<f64>() / fc as f64;
    let mut res = measure(&logdet, lambda);
    let mut history = vec![res];
    let slots = stencil.slots();
    let mut weights = vec![0.0; slots];
    for iter in 0..60 {
        if res <= tol {
            let mean = rho.iter().sum::<f64>() / fc as f64;
            rho.iter_mut().for_each(|r| *r -= mean);
            return Ok((rho, lambda.exp(), res, iter));
        }
        let mut values = Vec::with_capacity(pattern.entries());
        for i in 0..fc {
            stencil.hessian(&rho, i, &mut scratch);
            for q in 0..m {
                mat[q] = a[i * m + q] + scratch[q];
            }
            let minv = linalg::inverse(&mat, nf).expect("positive definite");
            stencil.trace_weights(&minv, &mut weights);
            values.extend_from_slice(&weights);
        }
        for _ in 0..fc {
            values.push(-1.0);
            values.push(1.0 / fc as f64);
        }
        let mut rhs: Vec<f64> = logdet.iter().map(|l| lambda - l).collect();
        rhs.push(-rho.iter().sum::<f64>() / fc as f64);
        let delta = pattern.factorize(&values)?.solve(&rhs)?;

        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = rho.iter().zip(&delta).map(|(r, d)| r + step * d).collect();
            let trial_lambda = lambda + step * delta[fc];
            if let Some(ld) = eval(&trial, &mut mat, &mut scratch) {
                let r = measure(&ld, trial_lambda);
                if r < res || r <= tol {
                    rho = trial;
                    lambda = trial_lambda;
                    logdet = ld;
                    res = r;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-10 {
                return Err(KrfError::Solver {
                    message: "semi-flat Newton step could not be damped into the admissible set".into(),
                    history,
                });
            }
        }
        history.push(res);
    }
    Err(KrfError::Solver {
        message: "semi-flat Newton did not converge".into(),
        history,
    })
}

/// Right-hand side `W` of the limit equation `det(Achi + D²ψ) = e^ψ W` on the base.
///
/// `W = C(n, κ) · w / (c · c(y_b) · |fiber|)`, with `w` the pushforward density,
/// `c` the volume factor, `c(y_b)` the semi-flat constants and `|fiber|` the
/// fiber volume `(2π)^{n-κ}`.
pub fn base_density(problem: &FlowProblem, semiflat: &SemiFlatField) -> Result<ScalarField> {
    let w = pushforward_density(problem);
    if semiflat.fiber_constants.len() != w.values().len() {
        return Err(KrfError::Argument("semi-flat data belongs to another grid".into()));
    }
    let fiber_volume = (2.0 * PI).powi((problem.dims() - problem.kappa()) as i32);
    let factor = problem.binom() / (problem.normalization().volume_factor * fiber_volume);
    let values = w
        .values()
        .iter()
        .zip(&semiflat.fiber_constants)
        .map(|(wv, c)| factor * wv / c)
        .collect();
    ScalarField::new(w.grid().clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularitySample {
    pub t: f64,
    pub t_prime: f64,
    pub e: f64,
}

/// Two-sided comparability of `θ_t` at nearby times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityCertificate {
    pub epsilon: f64,
    pub e_of_epsilon: f64,
    pub samples: Vec<RegularitySample>,
    /// `c` in the lower bound `θ_t >= c · Achi`.
    pub floor_constant: f64,
    pub floor_holds: bool,
}

/// Measures `E(ε)`: the smallest `E` with `(1 + E) θ_t >= θ_t'` and
/// `θ_t' >= (1 - E) θ_t` over sampled pairs with `|t - t'| = ε` (the supremum
/// over `|t - t'| < ε` is attained in this limit).
///
/// Also checks `θ_t >= c · Achi` with `c = min(1, 1 / λ_max(Achi, A0))`.
pub fn check_regular_family(problem: &FlowProblem, epsilon: f64, t_max: f64, sample_count: usize) -> Result<RegularityCertificate> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(KrfError::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(t_max >= 0.0) || sample_count == 0 {
        return Err(KrfError::Argument("need t_max >= 0 and at least one sample".into()));
    }
    let n = problem.dims();
    let nodes = problem.grid().node_count();
    let times: Vec<f64> = (0..sample_count)
        .map(|i| if sample_count == 1 { 0.0 } else { t_max * i as f64 / (sample_count - 1) as f64 })
        .collect();
    let mut pairs = vec![];
    for &t in &times {
        pairs.push((t, t + epsilon));
        if t - epsilon >= 0.0 {
            pairs.push((t, t - epsilon));
        }
    }
    let pencil_e = |t: f64, tp: f64| -> Result<f64> {
        (0..nodes)
            .into_par_iter()
            .map(|node| {
                let (mut a, mut b) = (vec![0.0; n * n], vec![0.0; n * n]);
                problem.theta_into(node, t, &mut a);
                problem.theta_into(node, tp, &mut b);
                let ev = linalg::generalized_eigenvalues(&b, &a, n).ok_or_else(|| {
                    KrfError::Invariant(format!("theta_t is not positive definite at node {node}, t = {t}"))
                })?;
                Ok((ev[n - 1] - 1.0).max(1.0 - ev[0]).max(0.0))
            })
            .try_reduce(|| 0.0, |x, y| Ok(x.max(y)))
    };
    let mut samples = Vec::with_capacity(pairs.len());
    for (t, tp) in pairs {
        samples.push(RegularitySample { t, t_prime: tp, e: pencil_e(t, tp)? });
    }
    let e_of_epsilon = samples.iter().map(|s| s.e).fold(0.0, f64::max);

    let mu = (0..nodes)
        .map(|node| {
            linalg::generalized_eigenvalues(problem.achi().matrix(node), problem.a0().matrix(node), n)
                .map(|ev| ev[n - 1])
                .unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max);
    let floor_constant = if mu > 0.0 { (1.0 / mu).min(1.0) } else { 1.0 };
    let floor_holds = times.iter().all(|&t| {
        (0..nodes).all(|node| {
            let mut th = vec![0.0; n * n];
            problem.theta_into(node, t, &mut th);
            let c = problem.achi().matrix(node);
            let diff: Vec<f64> = th.iter().zip(c).map(|(x, y)| x - floor_constant * y).collect();
            linalg::min_eigenvalue(&diff, n) >= -1e-12 * linalg::max_abs(&th)
        })
    });
    Ok(RegularityCertificate {
        epsilon,
        e_of_epsilon,
        samples,
        floor_constant,
        floor_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize, k: usize, p: usize, a0: &[&str], achi: &[&str], f: &str) -> ModelSpec {
        ModelSpec {
            dims: n,
            points: vec![p; n],
            kappa: k,
            a0: a0.iter().map(|s| Expr::parse(s).unwrap()).collect(),
            achi: achi.iter().map(|s| Expr::parse(s).unwrap()).collect(),
            f_mu: Expr::parse(f).unwrap(),
            reaction: ReactionSpec::Identity,
        }
    }

    #[test]
    fn constant_product_model_normalizes() {
        let p = build_product_problem(&spec(2, 1, 8, &["1", "0", "0", "1"], &["1"], "3")).unwrap();
        let target = 1.0 / (4.0 * PI * PI);
        assert!(p.f_mu().values().iter().all(|v| (v - target).abs() < 1e-15));
        assert!((p.normalization().mixed_mass * p.normalization().volume_factor - 1.0).abs() < 1e-14);
        assert!((p.f_mu().integral() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn one_dimensional_density_mass() {
        let p = build_product_problem(&spec(1, 1, 32, &["2"], &["2"], "1 + 0.3*cos(y1)")).unwrap();
        // Quadrature oracle: the cosine has zero mean, so the mass is 2π.
        assert!((p.normalization().density_mass - 2.0 * PI).abs() < 1e-12);
        assert!((p.normalization().density_scale - 1.0 / (2.0 * PI)).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            build_product_problem(&spec(2, 1, 8, &["1 - 1.1*cos(y1)^2", "0", "0", "1"], &["1"], "1")),
            Err(KrfError::Model(_))
        ));
        assert!(matches!(
            build_product_problem(&spec(2, 1, 8, &["1", "0", "0", "1"], &["1"], "cos(y1)")),
            Err(KrfError::Model(_))
        ));
        assert!(matches!(
            build_product_problem(&spec(2, 1, 8, &["1", "0", "0", "1"], &["1 + 0.1*cos(y2)"], "1")),
            Err(KrfError::Config { .. })
        ));
    }

    #[test]
    fn theta_examples() {
        let p = build_product_problem(&spec(2, 1, 4, &["2", "0", "0", "2"], &["1"], "1")).unwrap();
        assert_eq!(theta_at(&p, 0.0).unwrap(), *p.a0());
        let th = theta_at(&p, 2f64.ln()).unwrap();
        let expected = [1.5, 0.0, 0.0, 1.0];
        assert!(th.matrix(3).iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-15));
        let late = theta_at(&p, 800.0).unwrap();
        assert_eq!(late.matrix(0), p.achi().matrix(0));
        assert!(theta_at(&p, -1.0).is_err());
    }

    #[test]
    fn pushforward_examples() {
        let p = build_product_problem(&spec(2, 1, 16, &["1", "0", "0", "1"], &["1"], "1")).unwrap();
        let w = pushforward_density(&p);
        assert!(w.values().iter().all(|v| (v - 1.0 / (2.0 * PI)).abs() < 1e-15));

        let p = build_product_problem(&spec(2, 1, 32, &["1", "0", "0", "1"], &["1"], "(1 + 0.5*cos(y1))*(1 + 0.5*cos(y2))")).unwrap();
        let w = pushforward_density(&p);
        for (i, v) in w.values().iter().enumerate() {
            let yb = w.grid().coords(i)[0];
            assert!((v - (1.0 + 0.5 * yb.cos()) / (2.0 * PI)).abs() < 1e-14);
        }
    }

    #[test]
    fn semiflat_flat_fibers_give_zero_potential() {
        let p = build_product_problem(&spec(2, 1, 8, &["1 + 0.2*cos(y1)", "0", "0", "2 + cos(y1)"], &["1"], "1")).unwrap();
        let sf = semiflat_solve(&p, 1e-12).unwrap();
        assert!(sf.rho.values().iter().all(|&v| v == 0.0));
        for (b, c) in sf.fiber_constants.iter().enumerate() {
            let yb = p.grid().base_grid().coords(b)[0];
            assert!((c - (2.0 + yb.cos())).abs() < 1e-15);
        }
        assert!(matches!(semiflat_solve(&p, 0.0), Err(KrfError::Solver { .. })));
    }

    #[test]
    fn semiflat_one_dimensional_fiber_matches_analytic_potential() {
        // a = 1 + 0.2 cos(y_f) cos(y_b): the discrete fiber equation is linear,
        // ρ'' = c - a with c the fiber mean of a, so ρ = 0.2 cos(y_f) cos(y_b) · h²/(2 - 2cos h).
        let p = build_product_problem(&spec(2, 1, 32, &["1", "0", "0", "1 + 0.2*cos(y2)*cos(y1)"], &["1"], "1")).unwrap();
        let sf = semiflat_solve(&p, 1e-13).unwrap();
        let h = p.grid().spacing()[1];
        let factor = h * h / (2.0 - 2.0 * h.cos());
        for node in 0..p.grid().node_count() {
            let y = p.grid().coords(node);
            let expected = 0.2 * y[1].cos() * y[0].cos() * factor;
            assert!((sf.rho.get(node) - expected).abs() < 1e-12);
        }
        assert!(sf.fiber_constants.iter().all(|c| (c - 1.0).abs() < 1e-12));
        assert!(sf.residual <= 1e-13);
    }

    #[test]
    fn regular_family_examples() {
        let p = build_product_problem(&spec(2, 2, 4, &["1", "0", "0", "1"], &["1", "0", "0", "1"], "1")).unwrap();
        let cert = check_regular_family(&p, 0.1, 5.0, 6).unwrap();
        assert!(cert.e_of_epsilon < 1e-14);

        let p = build_product_problem(&spec(2, 1, 4, &["2", "0", "0", "2"], &["1"], "1")).unwrap();
        let es: Vec<f64> = [0.4, 0.2, 0.1, 0.05]
            .iter()
            .map(|&e| check_regular_family(&p, e, 10.0, 11).unwrap().e_of_epsilon)
            .collect();
        assert!(es[3] > 0.0);
        assert!(es.windows(2).all(|w| w[1] < w[0]));
        assert!(check_regular_family(&p, 0.0, 1.0, 3).is_err());
        assert!(check_regular_family(&p, 0.1, 10.0, 11).unwrap().floor_holds);
    }

    proptest! {
        #[test]
        fn theta_is_affine_in_exp_minus_t(t in 0.0f64..30.0) {
            let p = build_product_problem(&spec(2, 1, 4, &["2 + 0.3*cos(y2)", "0.1", "0.1", "1 + 0.2*sin(y1)"], &["1 + 0.5*cos(y1)"], "1")).unwrap();
            let th = theta_at(&p, t).unwrap();
            let e = (-t).exp();
            for node in 0..p.grid().node_count() {
                for q in 0..4 {
                    let a = p.a0().matrix(node)[q];
                    let c = p.achi().matrix(node)[q];
                    prop_assert!((th.matrix(node)[q] - (c + e * (a - c))).abs() <= 1e-14);
                }
            }
        }

        #[test]
        fn pushforward_preserves_mass(a in -0.9f64..0.9, b in -0.9f64..0.9, s in 0.0f64..6.0) {
            let f = format!("(1 + {a}*cos(y1 + {s}))*(1 + {b}*sin(2*y2)) + 0.005*cos(y1 - y2)");
            let p = build_product_problem(&spec(2, 1, 16, &["1", "0", "0", "1"], &["1"], &f)).unwrap();
            let w = pushforward_density(&p);
            prop_assert!((w.integral() - p.f_mu().integral()).abs() <= 1e-12);
        }
    }
}
