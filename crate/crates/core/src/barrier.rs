//! Linear-reaction ODEs and explicit sub/supersolutions of the flow.
//!
//! Every barrier has the shape
//! `(α₀ - α₁ e^{-t}) φ∞ + e^{-t} ρ + β log|s|_h + γ e^{-t} + y(t)`
//! with `y' + y = R(t)`, so its time derivative is available in closed form.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KrfError, Result};
use crate::flow::Trajectory;
use crate::grid::ScalarField;
use crate::linalg;
use crate::ma::CentralStencil;
use crate::model::{self, FlowProblem};

/// Right-hand side `R(t)` of `y' + y = R(t)`.
#[derive(Clone)]
pub enum Forcing {
    Zero,
    Constant(f64),
    /// `κ ln(1 - e^{-t})`.
    Log1mExp { kappa: usize },
    /// `κ ln(1 + e^{B-t})`.
    Log1pExp { kappa: usize, b: f64 },
    /// `ε inf φ∞ + ln[(1 - e^{-t} - ε)^κ - e^{B-t}]`.
    ApproxSub { kappa: usize, epsilon: f64, b: f64, inf_phi_inf: f64 },
    /// `ln[(1 + εA)^κ + e^{B-t}] - A ε inf φ∞`.
    ApproxSuper { kappa: usize, epsilon: f64, a: f64, b: f64, inf_phi_inf: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Forcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Forcing::Zero => write!(f, "Zero"),
            Forcing::Constant(c) => write!(f, "Constant({c})"),
            Forcing::Log1mExp { kappa } => write!(f, "Log1mExp {{ kappa: {kappa} }}"),
            Forcing::Log1pExp { kappa, b } => write!(f, "Log1pExp {{ kappa: {kappa}, b: {b} }}"),
            Forcing::ApproxSub { kappa, epsilon, b, inf_phi_inf } => {
                write!(f, "ApproxSub {{ kappa: {kappa}, epsilon: {epsilon}, b: {b}, inf_phi_inf: {inf_phi_inf} }}")
            }
            Forcing::ApproxSuper { kappa, epsilon, a, b, inf_phi_inf } => write!(
                f,
                "ApproxSuper {{ kappa: {kappa}, epsilon: {epsilon}, a: {a}, b: {b}, inf_phi_inf: {inf_phi_inf} }}"
            ),
            Forcing::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Forcing {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Forcing::Zero => 0.0,
            Forcing::Constant(c) => *c,
            Forcing::Log1mExp { kappa } => *kappa as f64 * (-(-t).exp_m1()).ln(),
            Forcing::Log1pExp { kappa, b } => *kappa as f64 * (b - t).exp().ln_1p(),
            Forcing::ApproxSub { kappa, epsilon, b, inf_phi_inf } => {
                let base = -(-t).exp_m1() - epsilon;
                epsilon * inf_phi_inf + (base.max(0.0).powi(*kappa as i32) - (b - t).exp()).ln()
            }
            Forcing::ApproxSuper { kappa, epsilon, a, b, inf_phi_inf } => {
                ((1.0 + epsilon * a).powi(*kappa as i32) + (b - t).exp()).ln() - a * epsilon * inf_phi_inf
            }
            Forcing::Custom(f) => f(t),
        }
    }

    /// `lim_{t→∞} R(t)` where it exists.
    pub fn limit(&self) -> Option<f64> {
        match self {
            Forcing::Zero | Forcing::Log1mExp { .. } | Forcing::Log1pExp { .. } => Some(0.0),
            Forcing::Constant(c) => Some(*c),
            Forcing::ApproxSub { kappa, epsilon, inf_phi_inf, .. } => {
                Some(epsilon * inf_phi_inf + *kappa as f64 * (1.0 - epsilon).ln())
            }
            Forcing::ApproxSuper { kappa, epsilon, a, inf_phi_inf, .. } => {
                Some(*kappa as f64 * (epsilon * a).ln_1p() - a * epsilon * inf_phi_inf)
            }
            Forcing::Custom(_) => None,
        }
    }
}

/// Solution of `y' + y = R(t)` with `y(t0) = 0`, for `t >= t0`.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    forcing: Forcing,
    t0: f64,
    /// `(t, y(t))` at the times requested at construction.
    pub samples: Vec<(f64, f64)>,
}

const QUAD_TOL: f64 = 1e-14;

impl OdeSolution {
    pub fn new(forcing: Forcing, t0: f64) -> Result<Self> {
        if !(t0 >= 0.0) || !t0.is_finite() {
            return Err(KrfError::Argument(format!("start time must be finite and nonnegative, got {t0}")));
        }
        let probe = forcing.eval(t0 + 1e-9);
        if !probe.is_finite() && !matches!(forcing, Forcing::Log1mExp { .. }) {
            return Err(KrfError::Argument(format!("forcing is not finite just after t0 = {t0}")));
        }
        Ok(Self {
            forcing,
            t0,
            samples: vec![],
        })
    }

    pub fn forcing(&self) -> &Forcing {
        &self.forcing
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// `y(t)`; closed forms for `h` and `g` started at 0, otherwise
    /// `∫_{t0}^t e^{s-t} R(s) ds` by double-exponential quadrature (which
    /// absorbs the integrable logarithmic endpoint singularity).
    pub fn eval(&self, t: f64) -> f64 {
        if t <= self.t0 {
            return 0.0;
        }
        match (&self.forcing, self.t0 == 0.0) {
            (Forcing::Zero, _) => 0.0,
            (Forcing::Constant(c), _) => c * -(-(t - self.t0)).exp_m1(),
            (Forcing::Log1mExp { kappa }, true) => {
                let one_minus = -(-t).exp_m1();
                *kappa as f64 * (one_minus * one_minus.ln() - t * (-t).exp())
            }
            (Forcing::Log1pExp { kappa, b }, true) => {
                let q = (b - t).exp();
                let l = q.ln_1p();
                let l0 = b.exp().ln_1p();
                *kappa as f64 * (l + q * (t + l) - (-t).exp() * (1.0 + b.exp()) * l0)
            }
            _ => self.quadrature(t),
        }
    }

    fn quadrature(&self, t: f64) -> f64 {
        // Pieces of length at most 2 keep e^{s-t} well resolved on long intervals.
        let pieces = ((t - self.t0) / 2.0).ceil().max(1.0) as usize;
        let width = (t - self.t0) / pieces as f64;
        (0..pieces)
            .map(|k| {
                let a = self.t0 + k as f64 * width;
                let b = if k + 1 == pieces { t } else { a + width };
                quadrature::integrate(|s| (s - t).exp() * self.forcing.eval(s), a, b, QUAD_TOL).integral
            })
            .sum()
    }

    /// `y'(t) = R(t) - y(t)`.
    pub fn derivative(&self, t: f64) -> f64 {
        self.forcing.eval(t) - self.eval(t)
    }

    /// `y(t)` at every time of `times`, stored in [`OdeSolution::samples`].
    pub fn with_samples(mut self, times: &[f64]) -> Self {
        self.samples = times.par_iter().map(|&t| (t, self.eval(t))).collect();
        self
    }

    /// Smallest `C` with `|y(t)| <= C (1 + t) e^{-t}` at the given times.
    pub fn bound_constant(&self, times: &[f64]) -> f64 {
        times
            .iter()
            .map(|&t| self.eval(t).abs() * t.exp() / (1.0 + t))
            .fold(0.0, f64::max)
    }
}

/// `y' + y = R` with `y(0) = 0`, sampled on `t_grid`.
pub fn solve_linear_reaction(forcing: Forcing, t_grid: &[f64]) -> Result<OdeSolution> {
    Ok(OdeSolution::new(forcing, 0.0)?.with_samples(t_grid))
}

/// `h' + h = κ ln(1 - e^{-t})`, `h(0) = 0`.
pub fn barrier_h(kappa: usize) -> Result<OdeSolution> {
    if kappa == 0 {
        return Err(KrfError::Argument("kappa must be at least 1".into()));
    }
    OdeSolution::new(Forcing::Log1mExp { kappa }, 0.0)
}

/// `g' + g = κ ln(1 + e^{B-t})`, `g(0) = 0`.
pub fn barrier_g(kappa: usize, b: f64) -> Result<OdeSolution> {
    if kappa == 0 || !b.is_finite() {
        return Err(KrfError::Argument("need kappa >= 1 and finite B".into()));
    }
    OdeSolution::new(Forcing::Log1pExp { kappa, b }, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    Sub,
    Super,
}

/// Constants of a barrier, with the quantities they were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub kind: BarrierKind,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub epsilon: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub r: f64,
    #[serde(rename = "T0")]
    pub t0: f64,
    pub kappa: usize,
    pub inf_phi_inf: f64,
    pub sup_phi_inf: f64,
    /// `C` demanded by the initial-slice inequality alone (nodewise).
    pub c_required: f64,
    /// `C` from the sup/inf form of the initial-slice condition, when it applies.
    pub c_condition: Option<f64>,
    /// `lim y(t)`.
    pub ode_limit: f64,
    /// `A inf φ∞ + κ` for the approximate supersolution.
    pub m_bound: Option<f64>,
    pub mask_nodes: usize,
    pub ring_nodes: usize,
}

/// A time-indexed candidate barrier on a node mask.
pub trait Barrier: Sync {
    fn kind(&self) -> BarrierKind;
    fn value(&self, t: f64) -> ScalarField;
    /// Exact `∂_t` of [`Barrier::value`].
    fn time_derivative(&self, t: f64) -> ScalarField;
    /// Nodes where the barrier is defined; `None` means every node.
    fn mask(&self) -> Option<&[bool]>;
    /// First time at which the barrier is meaningful.
    fn t_start(&self) -> f64;
    fn params(&self) -> Option<&BarrierParams> {
        None
    }
}

/// `(α₀ - α₁ e^{-t}) φ∞ + e^{-t} ρ + β log|s|_h + γ e^{-t} + y(t)`.
#[derive(Debug, Clone)]
pub struct ExplicitBarrier {
    pub params: BarrierParams,
    phi_inf: ScalarField,
    rho: ScalarField,
    log_s: Option<ScalarField>,
    alpha0: f64,
    alpha1: f64,
    beta: f64,
    gamma: f64,
    ode: OdeSolution,
    mask: Option<Vec<bool>>,
    ring: Vec<bool>,
}

impl ExplicitBarrier {
    pub fn ode(&self) -> &OdeSolution {
        &self.ode
    }

    /// Nodes of the mask adjacent to its complement.
    pub fn ring(&self) -> &[bool] {
        &self.ring
    }

    /// `lim_{t→∞}` of the barrier, nodewise.
    pub fn limit(&self) -> ScalarField {
        let y = self.ode.forcing().limit().unwrap_or(f64::NAN);
        let mut v: Vec<f64> = self.phi_inf.values().iter().map(|p| self.alpha0 * p + y).collect();
        if let Some(ls) = &self.log_s {
            v.iter_mut().zip(ls.values()).for_each(|(a, l)| *a += self.beta * l);
        }
        ScalarField::from_values_unchecked(self.phi_inf.grid().clone(), v)
    }

    /// The same barrier with `C` replaced.
    pub fn with_c(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.params.c = c;
        out.gamma = match self.params.kind {
            BarrierKind::Sub => -c,
            BarrierKind::Super => c,
        };
        out
    }
}

impl Barrier for ExplicitBarrier {
    fn kind(&self) -> BarrierKind {
        self.params.kind
    }

    fn value(&self, t: f64) -> ScalarField {
        let e = (-t).exp();
        let a = self.alpha0 - self.alpha1 * e;
        let y = self.ode.eval(t);
        let ls = self.log_s.as_ref().map(|l| l.values());
        let v = (0..self.phi_inf.values().len())
            .map(|i| {
                a * self.phi_inf.get(i) + e * self.rho.get(i) + ls.map_or(0.0, |l| self.beta * l[i]) + self.gamma * e + y
            })
            .collect();
        ScalarField::from_values_unchecked(self.phi_inf.grid().clone(), v)
    }

    fn time_derivative(&self, t: f64) -> ScalarField {
        let e = (-t).exp();
        let dy = self.ode.derivative(t);
        let v = (0..self.phi_inf.values().len())
            .map(|i| self.alpha1 * e * self.phi_inf.get(i) - e * self.rho.get(i) - self.gamma * e + dy)
            .collect();
        ScalarField::from_values_unchecked(self.phi_inf.grid().clone(), v)
    }

    fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    fn t_start(&self) -> f64 {
        self.params.t0
    }

    fn params(&self) -> Option<&BarrierParams> {
        Some(&self.params)
    }
}

/// A time-independent field used as a barrier (tests and static solutions).
#[derive(Debug, Clone)]
pub struct ConstantBarrier {
    pub kind: BarrierKind,
    pub field: ScalarField,
}

impl Barrier for ConstantBarrier {
    fn kind(&self) -> BarrierKind {
        self.kind
    }

    fn value(&self, _t: f64) -> ScalarField {
        self.field.clone()
    }

    fn time_derivative(&self, _t: f64) -> ScalarField {
        ScalarField::constant(self.field.grid().clone(), 0.0)
    }

    fn mask(&self) -> Option<&[bool]> {
        None
    }

    fn t_start(&self) -> f64 {
        0.0
    }
}

fn require_identity(problem: &FlowProblem) -> Result<()> {
    if !problem.reaction().is_identity() {
        return Err(KrfError::Hypothesis("the explicit barriers are built for the reaction F(t, x, r) = r".into()));
    }
    Ok(())
}

fn check_fields(problem: &FlowProblem, fields: &[&ScalarField]) -> Result<()> {
    for f in fields {
        if **f.grid() != **problem.grid() {
            return Err(KrfError::Argument("barrier data lives on a different grid".into()));
        }
    }
    Ok(())
}

/// Per-node matrices `A0 + D²ρ` and `Achi + D²φ∞` (central Hessian).
fn forms(problem: &FlowProblem, phi_inf: &ScalarField, rho: &ScalarField) -> (Vec<f64>, Vec<f64>) {
    let n = problem.dims();
    let c = CentralStencil::new(problem.grid());
    let nn = problem.grid().node_count();
    let mut s = vec![0.0; nn * n * n];
    let mut x = vec![0.0; nn * n * n];
    s.par_chunks_mut(n * n)
        .zip(x.par_chunks_mut(n * n))
        .enumerate()
        .for_each(|(node, (sm, xm))| {
            c.hessian(rho.values(), node, sm);
            sm.iter_mut().zip(problem.a0().matrix(node)).for_each(|(a, b)| *a += b);
            c.hessian(phi_inf.values(), node, xm);
            xm.iter_mut().zip(problem.achi().matrix(node)).for_each(|(a, b)| *a += b);
        });
    (s, x)
}

fn check_semiflat_psd(problem: &FlowProblem, s: &[f64]) -> Result<()> {
    let n = problem.dims();
    for (node, m) in s.chunks(n * n).enumerate() {
        let low = linalg::min_eigenvalue(m, n);
        if low < -1e-10 * linalg::max_abs(m).max(1.0) {
            return Err(KrfError::Hypothesis(format!(
                "A0 + D²ρ is not positive semidefinite at node {node} (smallest eigenvalue {low:e})"
            )));
        }
    }
    Ok(())
}

/// Largest nodewise `Σ_{j<κ} w^j max(c_j, 0) / (C(n,κ) e^{φ∞} f_eq)` with `c_j`
/// the coefficients of `s ↦ det(s X + S)`.
fn lower_mixed_ratio(problem: &FlowProblem, phi_inf: &ScalarField, s: &[f64], x: &[f64], weight: f64, mask: Option<&[bool]>) -> f64 {
    let n = problem.dims();
    let k = problem.kappa();
    let binom = problem.binom();
    (0..problem.grid().node_count())
        .into_par_iter()
        .filter(|&node| mask.is_none_or(|m| m[node]))
        .map(|node| {
            let m = n * n;
            let c = linalg::mixed_coefficients(&x[node * m..(node + 1) * m], &s[node * m..(node + 1) * m], n);
            let lower: f64 = (0..k).map(|j| weight.powi(j as i32) * c[j].max(0.0)).sum();
            lower / (binom * (phi_inf.get(node) + problem.log_f_eq()[node]).exp())
        })
        .reduce(|| 0.0, f64::max)
}

/// Floor for `e^B` when no lower mixed term is positive.
const B_FLOOR: f64 = -50.0;

fn params(kind: BarrierKind, kappa: usize, phi_inf: &ScalarField) -> BarrierParams {
    BarrierParams {
        kind,
        c: 0.0,
        b: 0.0,
        epsilon: 0.0,
        a: 0.0,
        r: 1.0,
        t0: 0.0,
        kappa,
        inf_phi_inf: phi_inf.min(),
        sup_phi_inf: phi_inf.max(),
        c_required: 0.0,
        c_condition: None,
        ode_limit: 0.0,
        m_bound: None,
        mask_nodes: phi_inf.values().len(),
        ring_nodes: 0,
    }
}

/// `(1 - e^{-t}) φ∞ + e^{-t} ρ - C e^{-t} + h(t)` with `C = sup(ρ - φ0)`.
pub fn make_subsolution(problem: &FlowProblem, phi_inf: &ScalarField, rho: &ScalarField, phi0: &ScalarField) -> Result<ExplicitBarrier> {
    require_identity(problem)?;
    check_fields(problem, &[phi_inf, rho, phi0])?;
    let (s, _) = forms(problem, phi_inf, rho);
    check_semiflat_psd(problem, &s)?;
    let c = rho.values().iter().zip(phi0.values()).map(|(r, p)| r - p).fold(f64::NEG_INFINITY, f64::max);
    let mut p = params(BarrierKind::Sub, problem.kappa(), phi_inf);
    p.c = c;
    p.c_required = c;
    Ok(ExplicitBarrier {
        params: p,
        phi_inf: phi_inf.clone(),
        rho: rho.clone(),
        log_s: None,
        alpha0: 1.0,
        alpha1: 1.0,
        beta: 0.0,
        gamma: -c,
        ode: barrier_h(problem.kappa())?,
        mask: None,
        ring: vec![false; phi_inf.values().len()],
    })
}

/// `(1 - e^{-t}) φ∞ + e^{-t} ρ + C e^{-t} + g(t)` with `C = sup(φ0 - ρ)` and
/// `B` the smallest grid value dominating the lower mixed terms, times 1.1.
pub fn make_supersolution(problem: &FlowProblem, phi_inf: &ScalarField, rho: &ScalarField, phi0: &ScalarField) -> Result<ExplicitBarrier> {
    require_identity(problem)?;
    check_fields(problem, &[phi_inf, rho, phi0])?;
    let (s, x) = forms(problem, phi_inf, rho);
    let kappa = problem.kappa();
    let ratio = lower_mixed_ratio(problem, phi_inf, &s, &x, 1.0, None) / kappa as f64;
    if !ratio.is_finite() {
        return Err(KrfError::Invariant("the lower mixed terms are unbounded".into()));
    }
    let b = if ratio > 0.0 { (1.1 * ratio).ln().max(B_FLOOR) } else { B_FLOOR };
    let c = phi0.values().iter().zip(rho.values()).map(|(p, r)| p - r).fold(f64::NEG_INFINITY, f64::max);
    let mut p = params(BarrierKind::Super, kappa, phi_inf);
    p.c = c;
    p.b = b;
    p.c_required = c;
    Ok(ExplicitBarrier {
        params: p,
        phi_inf: phi_inf.clone(),
        rho: rho.clone(),
        log_s: None,
        alpha0: 1.0,
        alpha1: 1.0,
        beta: 0.0,
        gamma: c,
        ode: barrier_g(kappa, b)?,
        mask: None,
        ring: vec![false; phi_inf.values().len()],
    })
}

/// Synthetic `log|s|_h` for the approximate barriers.
#[derive(Debug, Clone)]
pub struct DivisorModel {
    pub profile: ScalarField,
    pub log_s_h: ScalarField,
    /// Smallest `A >= 0` with `-D² log|s|_h <= A · Achi` at every node.
    pub a_curv: f64,
    /// Smallest eigenvalue of `Achi + D² log|s|_h` on the base block over all nodes.
    pub chi_psh_margin: f64,
}

impl DivisorModel {
    /// Nodes with `|s|_h >= r`.
    pub fn omega_r_mask(&self, r: f64) -> Vec<bool> {
        self.profile.values().iter().map(|&p| p >= r).collect()
    }

    /// Nodes of `Ω_r` with an axis neighbor outside `Ω_r`.
    pub fn boundary_ring(&self, r: f64) -> Vec<bool> {
        let mask = self.omega_r_mask(r);
        let grid = self.profile.grid();
        (0..mask.len())
            .map(|node| {
                mask[node] && (0..grid.n_dims()).any(|d| !mask[grid.shift(node, d, 1)] || !mask[grid.shift(node, d, -1)])
            })
            .collect()
    }

    pub fn floor(&self) -> f64 {
        self.profile.min()
    }
}

/// Builds `log|s|_h = log(profile)` for a base-only profile with values in `(0, 1]`.
pub fn build_divisor_model(problem: &FlowProblem, profile: &ScalarField) -> Result<DivisorModel> {
    check_fields(problem, &[profile])?;
    if let Some(i) = profile.values().iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(KrfError::Argument(format!("profile must lie in (0, 1], got {} at node {i}", profile.get(i))));
    }
    if profile.fiber_variation() > 0.0 {
        return Err(KrfError::Argument("profile must be constant along the fibers".into()));
    }
    let log_s_h = profile.map(f64::ln);
    let n = problem.dims();
    let k = problem.kappa();
    let c = CentralStencil::new(problem.grid());
    let mut hess = vec![0.0; n * n];
    let mut a_curv: f64 = 0.0;
    let mut margin = f64::INFINITY;
    for node in 0..problem.grid().node_count() {
        c.hessian(log_s_h.values(), node, &mut hess);
        let hb = model::block(&hess, n, 0, k);
        let cb = model::block(problem.achi().matrix(node), n, 0, k);
        let neg: Vec<f64> = hb.iter().map(|v| -v).collect();
        let ev = linalg::generalized_eigenvalues(&neg, &cb, k)
            .ok_or_else(|| KrfError::Model(format!("base block of Achi is not positive definite at node {node}")))?;
        a_curv = a_curv.max(ev[k - 1]);
        let sum: Vec<f64> = hb.iter().zip(&cb).map(|(h, a)| h + a).collect();
        margin = margin.min(linalg::min_eigenvalue(&sum, k));
    }
    Ok(DivisorModel {
        profile: profile.clone(),
        log_s_h,
        a_curv,
        chi_psh_margin: margin,
    })
}

/// Knobs for the approximate barriers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxOptions {
    /// Upper bound on `r`.
    pub r_max: f64,
    /// The shift `T0` is raised until the forcing argument reaches this fraction of its limit.
    pub forcing_fraction: f64,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self {
            r_max: 0.5,
            forcing_fraction: 0.5,
        }
    }
}

struct FlowBounds {
    sup: f64,
    inf: f64,
}

fn flow_bounds(trajectory: &Trajectory) -> FlowBounds {
    let sup = trajectory.diagnostics.iter().map(|r| r.sup_phi).fold(f64::NEG_INFINITY, f64::max);
    let inf = trajectory.diagnostics.iter().map(|r| r.inf_phi).fold(f64::INFINITY, f64::min);
    FlowBounds { sup, inf }
}

/// First snapshot time `>= t`, with its potential.
fn snapshot_after(trajectory: &Trajectory, t: f64) -> Result<(f64, &ScalarField)> {
    trajectory
        .snapshots
        .iter()
        .find(|s| s.t >= t - 1e-12)
        .map(|s| (s.t, &s.phi))
        .ok_or_else(|| KrfError::Hypothesis(format!("the trajectory has no snapshot at or after T0 = {t}")))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(KrfError::Argument(format!("epsilon must lie in (0, 1/2), got {epsilon}")));
    }
    Ok(())
}

fn masked_extreme(values: &[f64], mask: &[bool], max: bool) -> Option<f64> {
    let it = values.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v);
    if max {
        it.reduce(f64::max)
    } else {
        it.reduce(f64::min)
    }
}

/// `[1 - e^{-t} - ε] φ∞ + e^{-t} ρ + ε log|s|_h - C e^{-t} + h_ε(t)` on `Ω_r × [T0, ∞)`.
///
/// `h_ε` starts from `h_ε(T0) = 0`. `r`, `T0`, `C` follow the three conditions
/// with the flow bounds measured on `trajectory`; `C` is also raised to the
/// nodewise value that makes the initial slice inequality hold.
pub fn make_approx_subsolution(
    problem: &FlowProblem,
    phi_inf: &ScalarField,
    rho: &ScalarField,
    divisor: &DivisorModel,
    epsilon: f64,
    trajectory: &Trajectory,
    options: &ApproxOptions,
) -> Result<ExplicitBarrier> {
    require_identity(problem)?;
    check_epsilon(epsilon)?;
    check_fields(problem, &[phi_inf, rho, &divisor.log_s_h])?;
    let (s, _) = forms(problem, phi_inf, rho);
    check_semiflat_psd(problem, &s)?;
    if divisor.chi_psh_margin < -1e-10 {
        return Err(KrfError::Hypothesis(format!(
            "Achi + D² log|s|_h is not positive semidefinite (smallest eigenvalue {:e})",
            divisor.chi_psh_margin
        )));
    }
    let kappa = problem.kappa();
    let k = kappa as i32;
    let bounds = flow_bounds(trajectory);
    let (inf_pi, sup_pi) = (phi_inf.min(), phi_inf.max());
    // Lower mixed terms are nonnegative once A0 + D²ρ >= 0, so e^B = 1 suffices.
    let b = 0.0;

    let log_r1 = 2.0 * (bounds.inf - (1.0 - epsilon) * sup_pi) / epsilon;
    let r = options.r_max.min(log_r1.exp()).min(1.0);
    let log_r = r.ln();
    let mask = divisor.omega_r_mask(r);
    let ring = divisor.boundary_ring(r);

    let mut t0: f64 = 0.0;
    if let Some(rho_ring) = masked_extreme(rho.values(), &ring, true) {
        if rho_ring > 0.0 {
            if log_r >= 0.0 {
                return Err(KrfError::Hypothesis("condition on the boundary ring cannot hold with r = 1".into()));
            }
            t0 = t0.max((rho_ring / (-0.5 * epsilon * log_r)).ln());
        }
    }
    let limit = (1.0 - epsilon).powi(k);
    let arg = |t: f64| (-(-t).exp_m1() - epsilon).max(0.0).powi(k) - (b - t).exp();
    if limit <= 0.0 {
        return Err(KrfError::Hypothesis("the forcing argument is never positive".into()));
    }
    let target = options.forcing_fraction * limit;
    let mut t_pos = 0.0;
    while arg(t_pos) < target {
        t_pos += 0.01;
        if t_pos > 200.0 {
            return Err(KrfError::Hypothesis("the forcing argument is never positive".into()));
        }
    }
    t0 = t0.max(t_pos);
    let (t0, phi_t0) = snapshot_after(trajectory, t0)?;

    let forcing = Forcing::ApproxSub {
        kappa,
        epsilon,
        b,
        inf_phi_inf: inf_pi,
    };
    let ode_limit = forcing.limit().unwrap_or(f64::NAN);
    let ode = OdeSolution::new(forcing, t0)?;
    let e0 = (-t0).exp();
    let a0 = 1.0 - e0 - epsilon;
    let required = (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| (a0 * phi_inf.get(i) + e0 * rho.get(i) + epsilon * divisor.log_s_h.get(i) - phi_t0.get(i)) / e0)
        .fold(f64::NEG_INFINITY, f64::max);
    let condition = masked_extreme(rho.values(), &mask, true)
        .zip(masked_extreme(phi_t0.values(), &mask, false))
        .map(|(sup_rho, inf_phi)| ((1.0 - epsilon) * sup_pi + e0 * sup_rho - inf_phi) / e0);
    let c = required.max(condition.unwrap_or(f64::NEG_INFINITY)).max(1.0 + f64::EPSILON);

    let mut p = params(BarrierKind::Sub, kappa, phi_inf);
    p.c = c;
    p.b = b;
    p.epsilon = epsilon;
    p.r = r;
    p.t0 = t0;
    p.c_required = required;
    p.c_condition = condition;
    p.ode_limit = ode_limit;
    p.mask_nodes = mask.iter().filter(|&&m| m).count();
    p.ring_nodes = ring.iter().filter(|&&m| m).count();
    Ok(ExplicitBarrier {
        params: p,
        phi_inf: phi_inf.clone(),
        rho: rho.clone(),
        log_s: Some(divisor.log_s_h.clone()),
        alpha0: 1.0 - epsilon,
        alpha1: 1.0,
        beta: epsilon,
        gamma: -c,
        ode,
        mask: Some(mask),
        ring,
    })
}

/// `[1 + εA] φ∞ + e^{-t} ρ - ε log|s|_h + C e^{-t} + g_ε(t)` on `Ω_r × [T0, ∞)`.
pub fn make_approx_supersolution(
    problem: &FlowProblem,
    phi_inf: &ScalarField,
    rho: &ScalarField,
    divisor: &DivisorModel,
    epsilon: f64,
    trajectory: &Trajectory,
    options: &ApproxOptions,
) -> Result<ExplicitBarrier> {
    require_identity(problem)?;
    check_epsilon(epsilon)?;
    check_fields(problem, &[phi_inf, rho, &divisor.log_s_h])?;
    let kappa = problem.kappa();
    let a = divisor.a_curv;
    let bounds = flow_bounds(trajectory);
    let (inf_pi, sup_pi) = (phi_inf.min(), phi_inf.max());
    let w = 1.0 + epsilon * a;

    let log_r1 = 2.0 * (w * inf_pi - bounds.sup) / epsilon;
    let r = options.r_max.min(log_r1.exp()).min(1.0);
    let log_r = r.ln();
    let mask = divisor.omega_r_mask(r);
    let ring = divisor.boundary_ring(r);

    let (s, x) = forms(problem, phi_inf, rho);
    let ratio = lower_mixed_ratio(problem, phi_inf, &s, &x, w, Some(&mask));
    if !ratio.is_finite() {
        return Err(KrfError::Invariant("the lower mixed terms are unbounded".into()));
    }
    let b = if ratio > 0.0 { (1.1 * ratio).ln().max(0.0) } else { 0.0 };

    let mut t0: f64 = 0.0;
    if let Some(rho_ring) = masked_extreme(rho.values(), &ring, false) {
        if rho_ring < 0.0 {
            if log_r >= 0.0 {
                return Err(KrfError::Hypothesis("condition on the boundary ring cannot hold with r = 1".into()));
            }
            t0 = t0.max((-rho_ring / (-0.5 * epsilon * log_r)).ln());
        }
    }
    let (t0, phi_t0) = snapshot_after(trajectory, t0)?;

    let forcing = Forcing::ApproxSuper {
        kappa,
        epsilon,
        a,
        b,
        inf_phi_inf: inf_pi,
    };
    let ode_limit = forcing.limit().unwrap_or(f64::NAN);
    let ode = OdeSolution::new(forcing, 0.0)?;
    let g0 = ode.eval(t0);
    let e0 = (-t0).exp();
    let required = (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| (phi_t0.get(i) - (w * phi_inf.get(i) + e0 * rho.get(i) - epsilon * divisor.log_s_h.get(i) + g0)) / e0)
        .fold(f64::NEG_INFINITY, f64::max);
    let condition = masked_extreme(rho.values(), &mask, false)
        .zip(masked_extreme(phi_t0.values(), &mask, true))
        .map(|(inf_rho, sup_phi)| (sup_phi - w * inf_pi - e0 * inf_rho) / e0);
    let c = required.max(condition.unwrap_or(f64::NEG_INFINITY)).max(1.0 + f64::EPSILON);

    let mut p = params(BarrierKind::Super, kappa, phi_inf);
    p.c = c;
    p.b = b;
    p.epsilon = epsilon;
    p.a = a;
    p.r = r;
    p.t0 = t0;
    p.c_required = required;
    p.c_condition = condition;
    p.ode_limit = ode_limit;
    p.m_bound = Some(a * inf_pi + kappa as f64);
    p.sup_phi_inf = sup_pi;
    p.mask_nodes = mask.iter().filter(|&&m| m).count();
    p.ring_nodes = ring.iter().filter(|&&m| m).count();
    Ok(ExplicitBarrier {
        params: p,
        phi_inf: phi_inf.clone(),
        rho: rho.clone(),
        log_s: Some(divisor.log_s_h.clone()),
        alpha0: w,
        alpha1: 0.0,
        beta: -epsilon,
        gamma: c,
        ode,
        mask: Some(mask),
        ring,
    })
}
