//! Discrete Monge-Ampère operators on periodic grids.
//!
//! The central scheme uses standard second differences on the axes and the
//! four-point cross difference off the diagonal. The wide-stencil scheme
//! replaces the determinant by a minimum over orthogonal lattice bases of
//! products of direction-wise second differences; it is monotone, which is what
//! the discrete comparison tests rely on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KrfError, Result};
use crate::grid::{MetricField, ScalarField, TorusGrid};
use crate::linalg;
use crate::model::FlowProblem;

pub use crate::linalg::det_plus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilScheme {
    Central,
    WideStencil,
}

/// Choice of second-difference stencil.
///
/// For the central scheme the direction set is the coordinate axes. For the wide
/// stencil it is every primitive lattice vector with max-norm at most `radius`,
/// and `bases` lists the orthogonal (in physical coordinates) `n`-tuples of them.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianStencil {
    scheme: StencilScheme,
    radius: usize,
    directions: Vec<Vec<isize>>,
    bases: Vec<Vec<usize>>,
}

impl HessianStencil {
    pub fn central(n_dims: usize) -> Self {
        let directions = (0..n_dims)
            .map(|d| (0..n_dims).map(|e| (d == e) as isize).collect())
            .collect();
        Self {
            scheme: StencilScheme::Central,
            radius: 1,
            directions,
            bases: vec![(0..n_dims).collect()],
        }
    }

    pub fn wide(grid: &TorusGrid, radius: usize) -> Result<Self> {
        let n = grid.n_dims();
        if radius == 0 {
            return Err(KrfError::config("stencil_radius", "must be at least 1"));
        }
        if grid.points().iter().any(|&p| 2 * radius >= p) {
            return Err(KrfError::config("stencil_radius", "stencil wider than half the grid"));
        }
        let r = radius as isize;
        let mut directions: Vec<Vec<isize>> = vec![];
        let total = (2 * radius + 1).pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let v: Vec<isize> = (0..n)
                .map(|_| {
                    let x = (c % (2 * radius + 1)) as isize - r;
                    c /= 2 * radius + 1;
                    x
                })
                .collect();
            let first = v.iter().find(|&&x| x != 0);
            if first.is_none_or(|&x| x < 0) {
                continue;
            }
            let g = v.iter().fold(0usize, |g, &x| gcd(g, x.unsigned_abs()));
            if g == 1 {
                directions.push(v);
            }
        }
        let h = grid.spacing();
        let phys = |v: &[isize]| -> Vec<f64> { v.iter().zip(h).map(|(&x, &s)| x as f64 * s).collect() };
        let orthogonal = |a: usize, b: usize| {
            let (pa, pb) = (phys(&directions[a]), phys(&directions[b]));
            let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
            let scale = pa.iter().map(|x| x * x).sum::<f64>().sqrt() * pb.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot.abs() <= 1e-12 * scale
        };
        let mut bases = vec![];
        let mut current = vec![];
        collect_bases(directions.len(), n, 0, &mut current, &orthogonal, &mut bases);
        if bases.is_empty() {
            return Err(KrfError::config("stencil_radius", "no orthogonal direction basis on this grid"));
        }
        Ok(Self {
            scheme: StencilScheme::WideStencil,
            radius,
            directions,
            bases,
        })
    }

    pub fn scheme(&self) -> StencilScheme {
        self.scheme
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn directions(&self) -> &[Vec<isize>] {
        &self.directions
    }

    pub fn bases(&self) -> &[Vec<usize>] {
        &self.bases
    }

    fn check_grid(&self, grid: &TorusGrid) -> Result<()> {
        if self.directions.first().map_or(0, |d| d.len()) != grid.n_dims() {
            return Err(KrfError::Argument("stencil dimension does not match grid".into()));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn collect_bases(
    count: usize,
    n: usize,
    start: usize,
    current: &mut Vec<usize>,
    orthogonal: &dyn Fn(usize, usize) -> bool,
    out: &mut Vec<Vec<usize>>,
) {
    if current.len() == n {
        out.push(current.clone());
        return;
    }
    for i in start..count {
        if current.iter().all(|&j| orthogonal(i, j)) {
            current.push(i);
            collect_bases(count, n, i + 1, current, orthogonal, out);
            current.pop();
        }
    }
}

/// Neighbor tables and weights of the central Hessian on one grid.
///
/// Slot layout per node: `0` the node, `1 + 2d` and `2 + 2d` the `±e_d`
/// neighbors, then four slots per axis pair `d < e`: `(+,+)`, `(-,-)`, `(+,-)`, `(-,+)`.
#[derive(Debug, Clone)]
pub(crate) struct CentralStencil {
    n: usize,
    slots: usize,
    nbrs: Vec<usize>,
    inv_h2: Vec<f64>,
    inv_cross: Vec<f64>,
    axis_pairs: Vec<(usize, usize)>,
}

impl CentralStencil {
    pub fn new(grid: &TorusGrid) -> Self {
        let n = grid.n_dims();
        let axis_pairs: Vec<(usize, usize)> = (0..n).flat_map(|d| (d + 1..n).map(move |e| (d, e))).collect();
        let slots = 1 + 2 * n + 4 * axis_pairs.len();
        let mut nbrs = Vec::with_capacity(grid.node_count() * slots);
        let mut off = vec![0isize; n];
        for node in 0..grid.node_count() {
            nbrs.push(node);
            for d in 0..n {
                nbrs.push(grid.shift(node, d, 1));
                nbrs.push(grid.shift(node, d, -1));
            }
            for &(d, e) in &axis_pairs {
                for (sd, se) in [(1, 1), (-1, -1), (1, -1), (-1, 1)] {
                    off.iter_mut().for_each(|o| *o = 0);
                    off[d] = sd;
                    off[e] = se;
                    nbrs.push(grid.offset(node, &off));
                }
            }
        }
        let h = grid.spacing();
        Self {
            n,
            slots,
            nbrs,
            inv_h2: h.iter().map(|s| 1.0 / (s * s)).collect(),
            inv_cross: axis_pairs.iter().map(|&(d, e)| 0.25 / (h[d] * h[e])).collect(),
            axis_pairs,
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.nbrs[node * self.slots..(node + 1) * self.slots]
    }

    /// Writes the central Hessian of `v` at `node` into `out` (row-major `n x n`).
    pub fn hessian(&self, v: &[f64], node: usize, out: &mut [f64]) {
        let n = self.n;
        let nb = self.neighbors(node);
        let c = v[nb[0]];
        for d in 0..n {
            out[d * n + d] = (v[nb[1 + 2 * d]] - 2.0 * c + v[nb[2 + 2 * d]]) * self.inv_h2[d];
        }
        for (p, &(d, e)) in self.axis_pairs.iter().enumerate() {
            let b = 1 + 2 * n + 4 * p;
            let x = (v[nb[b]] + v[nb[b + 1]] - v[nb[b + 2]] - v[nb[b + 3]]) * self.inv_cross[p];
            out[d * n + e] = x;
            out[e * n + d] = x;
        }
    }

    /// Slot weights of the linear map `v -> tr(minv · D²v)` at one node.
    pub fn trace_weights(&self, minv: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut diag = 0.0;
        for d in 0..n {
            let w = minv[d * n + d] * self.inv_h2[d];
            out[1 + 2 * d] = w;
            out[2 + 2 * d] = w;
            diag -= 2.0 * w;
        }
        out[0] = diag;
        for (p, &(d, e)) in self.axis_pairs.iter().enumerate() {
            let b = 1 + 2 * n + 4 * p;
            let k = (minv[d * n + e] + minv[e * n + d]) * self.inv_cross[p];
            out[b] = k;
            out[b + 1] = k;
            out[b + 2] = -k;
            out[b + 3] = -k;
        }
    }

    /// `(row, col)` pairs of the stencil operator, row-major over nodes and slots.
    pub fn sparse_pairs(&self) -> Vec<(usize, usize)> {
        let count = self.nbrs.len() / self.slots;
        (0..count)
            .flat_map(|node| self.neighbors(node).iter().map(move |&c| (node, c)))
            .collect()
    }
}

/// Direction tables of the wide stencil on one grid.
#[derive(Debug, Clone)]
pub(crate) struct WideOperator {
    n: usize,
    bases: Vec<Vec<usize>>,
    plus: Vec<Vec<usize>>,
    minus: Vec<Vec<usize>>,
    unit: Vec<Vec<f64>>,
    inv_norm2: Vec<f64>,
}

impl WideOperator {
    pub fn new(grid: &TorusGrid, stencil: &HessianStencil) -> Self {
        let h = grid.spacing();
        let mut plus = vec![];
        let mut minus = vec![];
        let mut unit = vec![];
        let mut inv_norm2 = vec![];
        for v in stencil.directions() {
            let neg: Vec<isize> = v.iter().map(|x| -x).collect();
            plus.push((0..grid.node_count()).map(|i| grid.offset(i, v)).collect());
            minus.push((0..grid.node_count()).map(|i| grid.offset(i, &neg)).collect());
            let p: Vec<f64> = v.iter().zip(h).map(|(&x, &s)| x as f64 * s).collect();
            let norm2: f64 = p.iter().map(|x| x * x).sum();
            unit.push(p.iter().map(|x| x / norm2.sqrt()).collect());
            inv_norm2.push(1.0 / norm2);
        }
        Self {
            n: grid.n_dims(),
            bases: stencil.bases().to_vec(),
            plus,
            minus,
            unit,
            inv_norm2,
        }
    }

    fn factor(&self, theta: &[f64], v: &[f64], node: usize, dir: usize) -> f64 {
        let n = self.n;
        let u = &self.unit[dir];
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += u[i] * theta[i * n + j] * u[j];
            }
        }
        q + (v[self.plus[dir][node]] - 2.0 * v[node] + v[self.minus[dir][node]]) * self.inv_norm2[dir]
    }

    /// Minimum over bases of the product of clamped directional factors, and the
    /// smallest factor of the minimizing basis.
    pub fn value(&self, theta: &[f64], v: &[f64], node: usize) -> (f64, f64) {
        let mut best = f64::INFINITY;
        let mut worst_factor = f64::INFINITY;
        for basis in &self.bases {
            let mut prod = 1.0;
            let mut low = f64::INFINITY;
            for &dir in basis {
                let a = self.factor(theta, v, node, dir);
                low = low.min(a);
                prod *= a.max(0.0);
            }
            if prod < best || (prod == best && low < worst_factor) {
                best = prod;
                worst_factor = low;
            }
        }
        (best, worst_factor)
    }

    /// Largest `Σ 2 / (|p|² a)` over bases at a node: the self-coupling of the
    /// log operator, which bounds the monotone explicit step.
    pub fn self_coupling(&self, theta: &[f64], v: &[f64], node: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for basis in &self.bases {
            let mut s = 0.0;
            for &dir in basis {
                let a = self.factor(theta, v, node, dir);
                if a <= 0.0 {
                    return f64::INFINITY;
                }
                s += 2.0 * self.inv_norm2[dir] / a;
            }
            worst = worst.max(s);
        }
        worst
    }
}

/// Either operator prepared for one grid.
#[derive(Debug, Clone)]
pub(crate) enum Operator {
    Central(CentralStencil),
    Wide(WideOperator),
}

impl Operator {
    pub fn new(grid: &TorusGrid, stencil: &HessianStencil) -> Result<Self> {
        stencil.check_grid(grid)?;
        Ok(match stencil.scheme() {
            StencilScheme::Central => Operator::Central(CentralStencil::new(grid)),
            StencilScheme::WideStencil => Operator::Wide(WideOperator::new(grid, stencil)),
        })
    }

    /// Clamped determinant of `theta + D²v` at `node`; `theta` is overwritten.
    pub fn det_plus(&self, theta: &mut [f64], v: &[f64], node: usize, scratch: &mut [f64]) -> f64 {
        match self {
            Operator::Central(c) => {
                c.hessian(v, node, scratch);
                theta.iter_mut().zip(scratch.iter()).for_each(|(a, b)| *a += b);
                linalg::det_plus_unchecked(theta, c.n)
            }
            Operator::Wide(w) => w.value(theta, v, node).0,
        }
    }

    /// Determinant when strictly admissible, otherwise `Err(smallest eigenvalue or factor)`.
    pub fn det_strict(&self, theta: &mut [f64], v: &[f64], node: usize, scratch: &mut [f64]) -> std::result::Result<f64, f64> {
        match self {
            Operator::Central(c) => {
                c.hessian(v, node, scratch);
                theta.iter_mut().zip(scratch.iter()).for_each(|(a, b)| *a += b);
                if linalg::is_positive_definite(theta, c.n) {
                    Ok(linalg::det(theta, c.n))
                } else {
                    Err(linalg::min_eigenvalue(theta, c.n))
                }
            }
            Operator::Wide(w) => {
                let (value, low) = w.value(theta, v, node);
                if low > 0.0 {
                    Ok(value)
                } else {
                    Err(low)
                }
            }
        }
    }
}

/// Central-difference Hessian of a field.
///
/// The wide stencil has no matrix-valued Hessian of its own: its radius-one
/// direction differences reproduce exactly these entries, so the same matrix is
/// returned for either scheme. The wide scheme differs only inside [`ma_density`].
pub fn discrete_hessian(field: &ScalarField, stencil: &HessianStencil) -> Result<MetricField> {
    let grid = field.grid();
    stencil.check_grid(grid)?;
    let n = grid.n_dims();
    let c = CentralStencil::new(grid);
    let mut data = vec![0.0; grid.node_count() * n * n];
    data.par_chunks_mut(n * n)
        .enumerate()
        .for_each(|(node, out)| c.hessian(field.values(), node, out));
    Ok(MetricField::from_data_unchecked(grid.clone(), n, data))
}

fn check_phi(problem: &FlowProblem, phi: &ScalarField, t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(KrfError::Argument(format!("time must be finite and nonnegative, got {t}")));
    }
    if **phi.grid() != **problem.grid() {
        return Err(KrfError::Argument("potential lives on a different grid".into()));
    }
    Ok(())
}

/// Normalized Monge-Ampère density `det₊(θ_t + D²φ) / (C(n,κ) e^{-(n-κ)t})`, clamped.
pub fn ma_density(problem: &FlowProblem, t: f64, phi: &ScalarField, stencil: &HessianStencil) -> Result<ScalarField> {
    check_phi(problem, phi, t)?;
    let op = Operator::new(problem.grid(), stencil)?;
    let n = problem.dims();
    let scale = (-problem.log_collapse(t)).exp();
    let values: Vec<f64> = (0..problem.grid().node_count())
        .into_par_iter()
        .map_init(
            || (vec![0.0; n * n], vec![0.0; n * n]),
            |(theta, scratch), node| {
                problem.theta_into(node, t, theta);
                op.det_plus(theta, phi.values(), node, scratch) * scale
            },
        )
        .collect();
    Ok(ScalarField::from_values_unchecked(problem.grid().clone(), values))
}

/// Unclamped density for subsolution-side evaluation: fails with the first node
/// where `θ_t + D²φ` is not positive definite.
pub fn ma_density_strict(problem: &FlowProblem, t: f64, phi: &ScalarField, stencil: &HessianStencil) -> Result<ScalarField> {
    check_phi(problem, phi, t)?;
    let op = Operator::new(problem.grid(), stencil)?;
    let n = problem.dims();
    let scale = (-problem.log_collapse(t)).exp();
    let values: std::result::Result<Vec<f64>, (usize, f64)> = (0..problem.grid().node_count())
        .into_par_iter()
        .map_init(
            || (vec![0.0; n * n], vec![0.0; n * n]),
            |(theta, scratch), node| {
                problem.theta_into(node, t, theta);
                op.det_strict(theta, phi.values(), node, scratch)
                    .map(|d| d * scale)
                    .map_err(|low| (node, low))
            },
        )
        .collect();
    match values {
        Ok(v) => Ok(ScalarField::from_values_unchecked(problem.grid().clone(), v)),
        Err((node, min_eigenvalue)) => Err(KrfError::Admissibility { node, min_eigenvalue }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    SubOk,
    SuperOk,
    Both,
    Neither,
}

impl Tag {
    pub fn is_sub(self) -> bool {
        matches!(self, Tag::SubOk | Tag::Both)
    }

    pub fn is_super(self) -> bool {
        matches!(self, Tag::SuperOk | Tag::Both)
    }
}

/// Floors and tolerance for [`residual`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualOptions {
    pub tol: f64,
    /// Relative density floor, in units of the reference density.
    pub delta_rel: f64,
    pub delta_abs: f64,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            delta_rel: 1e-12,
            delta_abs: 1e-300,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualField {
    pub residual: ScalarField,
    pub tags: Vec<Tag>,
    /// Strict positive definiteness of `θ_t + D²φ` per node.
    pub admissible: Vec<bool>,
}

impl ResidualField {
    pub fn count(&self, tag: Tag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// Pointwise residual `log max(ρ, δ f) - log f - φ̇ - F(t, x, φ)` of the flow, with
/// `ρ` the normalized density and `f` the reference density of the equation.
///
/// Tags: `sub_ok` needs an admissible matrix and `r >= -tol`; `super_ok` needs `r <= tol`.
pub fn residual(
    problem: &FlowProblem,
    t: f64,
    phi: &ScalarField,
    phi_dot: &ScalarField,
    stencil: &HessianStencil,
    options: &ResidualOptions,
) -> Result<ResidualField> {
    if !(options.delta_rel > 0.0) || !(options.delta_abs > 0.0) {
        return Err(KrfError::config("delta", "density floor must be positive"));
    }
    check_phi(problem, phi, t)?;
    phi.check_same_grid(phi_dot)?;
    let op = Operator::new(problem.grid(), stencil)?;
    let grid = problem.grid();
    let n = problem.dims();
    let log_collapse = problem.log_collapse(t);
    let offset = problem.reaction().offset_field(grid, t);
    let slope = problem.reaction().slope();
    let tol = options.tol;
    let rows: Vec<(f64, Tag, bool)> = (0..grid.node_count())
        .into_par_iter()
        .map_init(
            || (vec![0.0; n * n], vec![0.0; n * n]),
            |(theta, scratch), node| {
                problem.theta_into(node, t, theta);
                let (det, admissible) = match op.det_strict(theta, phi.values(), node, scratch) {
                    Ok(d) => (d, true),
                    Err(_) => {
                        problem.theta_into(node, t, theta);
                        (op.det_plus(theta, phi.values(), node, scratch), false)
                    }
                };
                let log_f = problem.log_f_eq()[node];
                let floor = (options.delta_rel.ln() + log_f).max(options.delta_abs.ln());
                let log_density = if det > 0.0 { det.ln() - log_collapse } else { f64::NEG_INFINITY };
                let r = log_density.max(floor) - log_f
                    - phi_dot.get(node)
                    - (slope * phi.get(node) + offset.as_ref().map_or(0.0, |b| b[node]));
                let sub = admissible && r >= -tol;
                let sup = r <= tol;
                let tag = match (sub, sup) {
                    (true, true) => Tag::Both,
                    (true, false) => Tag::SubOk,
                    (false, true) => Tag::SuperOk,
                    (false, false) => Tag::Neither,
                };
                (r, tag, admissible)
            },
        )
        .collect();
    let residual = ScalarField::from_values_unchecked(grid.clone(), rows.iter().map(|r| r.0).collect());
    Ok(ResidualField {
        residual,
        tags: rows.iter().map(|r| r.1).collect(),
        admissible: rows.iter().map(|r| r.2).collect(),
    })
}
