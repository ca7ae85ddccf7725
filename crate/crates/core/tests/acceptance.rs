//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::f64::consts::PI;
use std::time::Instant;

use krf_core::barrier::{
    barrier_g, barrier_h, build_divisor_model, make_approx_subsolution, make_approx_supersolution, make_subsolution,
    make_supersolution, ApproxOptions, Barrier, ExplicitBarrier, OdeSolution,
};
use krf_core::expr::Expr;
use krf_core::flow::{integral_diagnostic, run, FlowOptions, Trajectory};
use krf_core::grid::ScalarField;
use krf_core::ma::HessianStencil;
use krf_core::model::{build_product_problem, check_regular_family, semiflat_solve, FlowProblem, ModelSpec, ReactionSpec};
use krf_core::static_solver::{solve_static, solve_static_with, StaticMethod};
use krf_core::verify::{calibrate_tolerance, classify_viscosity, convergence_rate_fit, discrete_comparison_stress, sandwich_check, StressOptions};

const T_END: f64 = 12.0;
const RUNTIME_BUDGET_S: f64 = 300.0;
const RATE_WINDOW: (f64, f64) = (4.0, 10.0);
const RATE_RANGE: (f64, f64) = (-1.15, -0.85);
const SANDWICH_TOL_MAX: f64 = 1e-2;
const SANDWICH_SHRINK: f64 = 3.0;
const VISCOSITY_TOL: f64 = 1e-6;
const REFINEMENT_FACTOR: f64 = 3.0;
const ODE_RESIDUAL_TOL: f64 = 1e-10;
const RK4_TOL: f64 = 1e-8;
const STATIC_EXACT_TOL: f64 = 1e-10;
const STATIC_RESIDUAL_TOL: f64 = 1e-8;
const STATIC_AGREE_TOL: f64 = 1e-6;
const INTEGRAL_TOL: f64 = 1e-3;
const SEMIFLAT_IDENTITY_TOL: f64 = 1e-8;
const SEMIFLAT_RESIDUAL_TOL: f64 = 1e-8;
const FIBER_MEAN_TOL: f64 = 1e-10;
const STRESS_PAIRS: usize = 50;
const STRESS_SEED: u64 = 0;
const EPSILONS: [f64; 3] = [0.2, 0.1, 0.05];
const OFFSET_RATIO: (f64, f64) = (1.8, 2.2);
const REGULAR_EPSILONS: [f64; 4] = [0.4, 0.2, 0.1, 0.05];
const REGULAR_POWER: (f64, f64) = (0.8, 1.2);

fn exprs(v: &[&str]) -> Vec<Expr> {
    v.iter().map(|s| Expr::parse(s).unwrap()).collect()
}

/// `A0 = I + D²(0.15 cos y1 cos y2)` and `Achi = 1 - 0.2 cos y1` are closed; `f_mu` lives on the base.
fn generic(points: usize) -> FlowProblem {
    build_product_problem(&ModelSpec {
        dims: 2,
        points: vec![points, points],
        kappa: 1,
        a0: exprs(&[
            "1-0.15*cos(y1)*cos(y2)",
            "0.15*sin(y1)*sin(y2)",
            "0.15*sin(y1)*sin(y2)",
            "1-0.15*cos(y1)*cos(y2)",
        ]),
        achi: exprs(&["1-0.2*cos(y1)"]),
        f_mu: Expr::parse("1+0.3*sin(y1)").unwrap(),
        reaction: ReactionSpec::Identity,
    })
    .unwrap()
}

fn initial(p: &FlowProblem) -> ScalarField {
    ScalarField::from_fn(p.grid().clone(), |y| 0.1 * y[0].sin() + 0.1 * y[1].cos()).unwrap()
}

fn sup_diff(a: &ScalarField, b: &ScalarField) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Geometry {
    problem: FlowProblem,
    phi_inf: ScalarField,
    rho: ScalarField,
    phi0: ScalarField,
}

impl Geometry {
    fn new(points: usize) -> Self {
        let problem = generic(points);
        let sf = semiflat_solve(&problem, 1e-13).unwrap();
        let sol = solve_static_with(&problem, &sf, StaticMethod::DampedNewton, 1e-12, 100).unwrap();
        let phi0 = initial(&problem);
        Self {
            phi_inf: sol.lifted.unwrap(),
            rho: sf.rho,
            phi0,
            problem,
        }
    }

    fn exact_barriers(&self) -> (ExplicitBarrier, ExplicitBarrier) {
        (
            make_subsolution(&self.problem, &self.phi_inf, &self.rho, &self.phi0).unwrap(),
            make_supersolution(&self.problem, &self.phi_inf, &self.rho, &self.phi0).unwrap(),
        )
    }

    fn run(&self, dt_max: f64) -> (Trajectory, f64) {
        let opts = FlowOptions {
            dt_max,
            ..FlowOptions::default()
        };
        let schedule: Vec<f64> = (1..=48).map(|k| k as f64 * 0.25).collect();
        let started = Instant::now();
        let traj = run(&self.problem, &self.phi0, T_END, &opts, &schedule, Some(&self.phi_inf)).unwrap();
        (traj, started.elapsed().as_secs_f64())
    }

    fn sandwich_tol(&self, dt: f64) -> f64 {
        let points = self.problem.grid().points()[0];
        let gap = sup_diff(&self.phi0, &self.phi_inf);
        calibrate_tolerance(points, dt, 2.0, gap).unwrap().tolerance
    }
}

struct Ledger {
    failures: usize,
}

impl Ledger {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        println!("{} [{id:2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn rk4(ode: &OdeSolution, t0: f64, t1: f64, steps: usize) -> Vec<(f64, f64)> {
    let f = |t: f64, y: f64| ode.forcing().eval(t) - y;
    let h = (t1 - t0) / steps as f64;
    let mut y = ode.eval(t0);
    let mut out = vec![(t0, y)];
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(t, y);
        let k2 = f(t + h / 2.0, y + h / 2.0 * k1);
        let k3 = f(t + h / 2.0, y + h / 2.0 * k2);
        let k4 = f(t + h, y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.push((t + h, y));
    }
    out
}

fn five_point(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    (f(t - 2.0 * h) - 8.0 * f(t - h) + 8.0 * f(t + h) - f(t + 2.0 * h)) / (12.0 * h)
}

fn ode_checks(ode: &OdeSolution) -> (f64, f64) {
    let residual = (1..=390)
        .map(|i| 0.5 + 0.05 * i as f64)
        .map(|t| {
            let d = five_point(|s| ode.eval(s), t, 1e-3);
            (d - (ode.forcing().eval(t) - ode.eval(t))).abs()
        })
        .fold(0.0, f64::max);
    let rk = rk4(ode, 0.1, 20.0, 19_900).into_iter().map(|(t, y)| (y - ode.eval(t)).abs()).fold(0.0, f64::max);
    (residual, rk)
}

fn envelope_constant(ode: &OdeSolution, sign: f64) -> (f64, bool, f64) {
    let ts: Vec<f64> = (1..=4000).map(|i| i as f64 * 0.01).collect();
    let ratios: Vec<f64> = ts.iter().map(|&t| sign * ode.eval(t) / ((1.0 + t) * (-t).exp())).collect();
    let sign_ok = ts.iter().all(|&t| sign * ode.eval(t) >= 0.0);
    let c = ratios.iter().cloned().fold(0.0, f64::max);
    let tail = ratios[ratios.len() / 2..].iter().cloned().fold(0.0, f64::max);
    (c, sign_ok, tail)
}

fn main() {
    let mut ledger = Ledger { failures: 0 };
    let total = Instant::now();

    let g64 = Geometry::new(64);
    let (traj64, runtime64) = g64.run(0.02);
    let fit = convergence_rate_fit(&traj64, RATE_WINDOW).unwrap();
    ledger.record(
        1,
        "exponential convergence",
        fit.slope >= RATE_RANGE.0 && fit.slope <= RATE_RANGE.1 && runtime64 <= RUNTIME_BUDGET_S,
        format!(
            "slope {:.4} in [{}, {}] (power of 1+t {:.3}, literal {:.4}, plain {:.4}, monotone {}), 64² run {:.1}s <= {RUNTIME_BUDGET_S}s",
            fit.slope, RATE_RANGE.0, RATE_RANGE.1, fit.power, fit.literal_slope, fit.plain_slope, fit.monotone, runtime64
        ),
    );

    let g128 = Geometry::new(128);
    let (traj128, _) = g128.run(0.01);
    let tol64 = g64.sandwich_tol(0.02);
    let tol128 = g128.sandwich_tol(0.01);
    let (u64_, v64) = g64.exact_barriers();
    let (u128, v128) = g128.exact_barriers();
    let s64 = sandwich_check(&traj64, &u64_, &v64, tol64).unwrap();
    let s128 = sandwich_check(&traj128, &u128, &v128, tol128).unwrap();
    ledger.record(
        2,
        "barrier sandwich",
        s64.pass && s128.pass && tol64 <= SANDWICH_TOL_MAX && tol128 * SANDWICH_SHRINK <= tol64,
        format!(
            "64²: worst {:.3e} at tol {:.3e}; 128²: worst {:.3e} at tol {:.3e}; tolerance ratio {:.2}",
            s64.worst.magnitude,
            tol64,
            s128.worst.magnitude,
            tol128,
            tol64 / tol128
        ),
    );

    let times = [0.05, 0.3, 1.0, 3.0, 8.0, T_END];
    let central = HessianStencil::central(2);
    let mut visc = vec![];
    for g in [Geometry::new(32), Geometry::new(64), Geometry::new(128)] {
        let (u, v) = g.exact_barriers();
        let ru = classify_viscosity(&g.problem, &u, &times, VISCOSITY_TOL, &central).unwrap();
        let rv = classify_viscosity(&g.problem, &v, &times, VISCOSITY_TOL, &central).unwrap();
        visc.push((ru, rv));
    }
    let positive = |r: &krf_core::verify::ComparisonReport| r.worst.magnitude.max(0.0);
    let all_pass = visc.iter().all(|(u, v)| u.pass && v.pass);
    let second_order = visc.windows(2).all(|w| {
        positive(&w[1].0) * REFINEMENT_FACTOR <= positive(&w[0].0) + 1e-12
            && positive(&w[1].1) * REFINEMENT_FACTOR <= positive(&w[0].1) + 1e-12
    });
    ledger.record(
        3,
        "viscosity classification",
        all_pass && second_order,
        format!(
            "worst sub/super at 32², 64², 128²: {}; positive parts {}",
            visc.iter()
                .map(|(u, v)| format!("{:.2e}/{:.2e}", u.worst.magnitude, v.worst.magnitude))
                .collect::<Vec<_>>()
                .join(", "),
            visc.iter()
                .map(|(u, v)| format!("{:.1e}/{:.1e}", positive(u), positive(v)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );

    let mut ode_pass = true;
    let mut ode_detail = vec![];
    for kappa in 1..=3 {
        let h = barrier_h(kappa).unwrap();
        let g = barrier_g(kappa, 0.5).unwrap();
        let (hr, hk) = ode_checks(&h);
        let (gr, gk) = ode_checks(&g);
        let (ch, h_sign, h_tail) = envelope_constant(&h, -1.0);
        let (cg, g_sign, g_tail) = envelope_constant(&g, 1.0);
        let ok = hr.max(gr) <= ODE_RESIDUAL_TOL
            && hk.max(gk) <= RK4_TOL
            && h_sign
            && g_sign
            && ch.is_finite()
            && cg.is_finite()
            && h_tail <= ch
            && g_tail <= cg;
        ode_pass &= ok;
        ode_detail.push(format!(
            "κ={kappa}: residual {:.1e}, rk4 {:.1e}, C_h {:.3}, C_g {:.3}",
            hr.max(gr),
            hk.max(gk),
            ch,
            cg
        ));
    }
    ledger.record(4, "ODE corrections", ode_pass, ode_detail.join("; "));

    let constant = build_product_problem(&ModelSpec {
        dims: 2,
        points: vec![32, 32],
        kappa: 1,
        a0: exprs(&["2", "0", "0", "3"]),
        achi: exprs(&["1.5"]),
        f_mu: Expr::constant(1.0),
        reaction: ReactionSpec::Identity,
    })
    .unwrap();
    let exact = solve_static(&constant, StaticMethod::DampedNewton, 1e-12, 50).unwrap();
    // Mixed mass 1.5 · 3 · 4π² / 2, unit density mass, fiber constant 3: det = 1.5 = e^ψ W.
    let mixed = 1.5 * 3.0 * 4.0 * PI * PI / 2.0;
    let w_const = 2.0 * (2.0 * PI / (4.0 * PI * PI)) * mixed / (3.0 * 2.0 * PI);
    let psi_exact = (1.5 / w_const).ln();
    let const_err = exact.psi.values().iter().map(|v| (v - psi_exact).abs()).fold(0.0, f64::max);
    let newton = solve_static(&g64.problem, StaticMethod::DampedNewton, 1e-10, 100).unwrap();
    let pseudo = solve_static(&g64.problem, StaticMethod::PseudoTime, 1e-10, 2000).unwrap();
    let agree = sup_diff(&newton.psi, &pseudo.psi);
    ledger.record(
        5,
        "static equation",
        const_err <= STATIC_EXACT_TOL
            && newton.final_residual() <= STATIC_RESIDUAL_TOL
            && pseudo.final_residual() <= STATIC_RESIDUAL_TOL
            && agree <= STATIC_AGREE_TOL,
        format!(
            "constant model error {const_err:.1e}; generic residuals {:.1e} (Newton), {:.1e} (pseudo-time); agreement {agree:.1e}",
            newton.final_residual(),
            pseudo.final_residual()
        ),
    );

    let mut bound_pass = true;
    let mut bound_detail = vec![];
    for (name, g, traj) in [("64²", &g64, &traj64), ("128²", &g128, &traj128)] {
        let rows = &traj.diagnostics;
        let sup_abs = rows.iter().map(|r| r.sup_phi.abs().max(r.inf_phi.abs())).fold(0.0, f64::max);
        let bound = g.phi0.values().iter().map(|v| v.abs()).fold(0.0, f64::max) + g.phi_inf.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let last = rows.last().unwrap();
        let late: Vec<_> = rows.iter().filter(|r| r.t >= 6.0).collect();
        let transient = late[0].dist_static.unwrap();
        let drift = late
            .iter()
            .map(|r| (r.sup_phi - last.sup_phi).abs().max((r.inf_phi - last.inf_phi).abs()))
            .fold(0.0, f64::max);
        let integral = integral_diagnostic(&g.problem, traj).unwrap();
        let ok = sup_abs <= bound && drift <= 2.0 * transient && integral.max_excess <= INTEGRAL_TOL;
        bound_pass &= ok;
        bound_detail.push(format!(
            "{name}: sup|φ| {sup_abs:.3} <= {bound:.3}, drift on [6,12] {drift:.2e} <= {:.2e}, max (I'+I-B) {:.2e}",
            2.0 * transient,
            integral.max_excess
        ));
    }
    ledger.record(6, "uniform bounds", bound_pass, bound_detail.join("; "));

    let flat = build_product_problem(&ModelSpec {
        dims: 2,
        points: vec![64, 64],
        kappa: 1,
        a0: exprs(&["1+0.2*cos(y1)", "0", "0", "2+cos(y1)"]),
        achi: exprs(&["1+0.3*cos(y1)"]),
        f_mu: Expr::parse("1+0.3*sin(y1)").unwrap(),
        reaction: ReactionSpec::Identity,
    })
    .unwrap();
    let sf = semiflat_solve(&flat, 1e-13).unwrap();
    let sol = solve_static_with(&flat, &sf, StaticMethod::DampedNewton, 1e-12, 100).unwrap();
    let phi_inf = sol.lifted.unwrap();
    let grid = flat.grid();
    let (hb, hf) = (grid.spacing()[0], grid.spacing()[1]);
    let f_eq = flat.f_eq();
    let identity_err = (0..grid.node_count())
        .map(|i| {
            let d2b = (phi_inf.get(grid.shift(i, 0, 1)) - 2.0 * phi_inf.get(i) + phi_inf.get(grid.shift(i, 0, -1))) / (hb * hb);
            let d2f = (sf.rho.get(grid.shift(i, 1, 1)) - 2.0 * sf.rho.get(i) + sf.rho.get(grid.shift(i, 1, -1))) / (hf * hf);
            let base = flat.achi().entry(i, 0, 0) + d2b;
            let fiber = flat.a0().entry(i, 1, 1) + d2f;
            let rhs = phi_inf.get(i).exp() * f_eq.get(i);
            (base * fiber / flat.binom() - rhs).abs() / rhs
        })
        .fold(0.0, f64::max);
    let perturbed = build_product_problem(&ModelSpec {
        dims: 3,
        points: vec![12, 12, 12],
        kappa: 1,
        a0: exprs(&[
            "1+0.2*cos(y1)",
            "0",
            "0",
            "0",
            "1+0.2*cos(y2)*cos(y1)",
            "0.1*sin(y3)",
            "0",
            "0.1*sin(y3)",
            "1+0.15*cos(y2+y3)",
        ]),
        achi: exprs(&["1"]),
        f_mu: Expr::constant(1.0),
        reaction: ReactionSpec::Identity,
    })
    .unwrap();
    let psf = semiflat_solve(&perturbed, 1e-12).unwrap();
    let fc = perturbed.grid().fiber_count();
    let mean = psf
        .rho
        .values()
        .chunks(fc)
        .map(|f| (f.iter().sum::<f64>() / fc as f64).abs())
        .fold(0.0, f64::max);
    let rho_size = psf.rho.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
    ledger.record(
        7,
        "semi-flat relation",
        identity_err <= SEMIFLAT_IDENTITY_TOL && psf.residual <= SEMIFLAT_RESIDUAL_TOL && mean <= FIBER_MEAN_TOL && rho_size > 0.0,
        format!(
            "flat fibers: identity error {identity_err:.1e}; perturbed fibers: residual {:.1e}, fiber mean {mean:.1e}, sup|ρ| {rho_size:.3e}",
            psf.residual
        ),
    );

    let stress = discrete_comparison_stress(
        &generic(32),
        STRESS_PAIRS,
        STRESS_SEED,
        &StressOptions::default(),
    )
    .unwrap();
    let central_note = stress
        .central
        .as_ref()
        .map_or(String::new(), |c| format!("; central stencil (informational): {} of {} pairs cross", c.pairs_with_crossing, c.pairs));
    ledger.record(
        8,
        "discrete comparison stress",
        stress.wide_stats.pairs == STRESS_PAIRS && stress.wide_stats.pairs_with_crossing == 0,
        format!(
            "wide stencil: {} of {} pairs cross, worst {:.2e}{central_note}",
            stress.wide_stats.pairs_with_crossing, stress.wide_stats.pairs, stress.wide_stats.worst
        ),
    );

    let profile = ScalarField::from_fn(g64.problem.grid().clone(), |y| (-0.3 * (1.0 - y[0].cos())).exp()).unwrap();
    let divisor = build_divisor_model(&g64.problem, &profile).unwrap();
    let opts = ApproxOptions::default();
    let snaps = traj64.snapshot_times();
    let mut approx_pass = true;
    let mut offsets = vec![];
    let mut approx_detail = vec![];
    for &eps in &EPSILONS {
        let u = make_approx_subsolution(&g64.problem, &g64.phi_inf, &g64.rho, &divisor, eps, &traj64, &opts).unwrap();
        let v = make_approx_supersolution(&g64.problem, &g64.phi_inf, &g64.rho, &divisor, eps, &traj64, &opts).unwrap();
        let ru = classify_viscosity(&g64.problem, &u, &snaps, VISCOSITY_TOL, &central).unwrap();
        let rv = classify_viscosity(&g64.problem, &v, &snaps, VISCOSITY_TOL, &central).unwrap();
        approx_pass &= ru.pass && rv.pass;
        let offset = |b: &ExplicitBarrier| {
            let lim = b.limit();
            let mask = b.mask().unwrap();
            (0..mask.len())
                .filter(|&i| mask[i])
                .map(|i| (lim.get(i) - g64.phi_inf.get(i)).abs())
                .fold(0.0, f64::max)
        };
        offsets.push((offset(&u), offset(&v)));
        approx_detail.push(format!(
            "ε={eps}: T0 {:.2}/{:.2}, worst {:.1e}/{:.1e}",
            u.params.t0, v.params.t0, ru.worst.magnitude, rv.worst.magnitude
        ));
    }
    let ratios: Vec<(f64, f64)> = offsets.windows(2).map(|w| (w[0].0 / w[1].0, w[0].1 / w[1].1)).collect();
    let in_range = |r: f64| r >= OFFSET_RATIO.0 && r <= OFFSET_RATIO.1;
    ledger.record(
        9,
        "approximate barriers",
        approx_pass && ratios.iter().all(|&(a, b)| in_range(a) && in_range(b)),
        format!(
            "{}; offset ratios sub/super {}",
            approx_detail.join(", "),
            ratios.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let es: Vec<f64> = REGULAR_EPSILONS
        .iter()
        .map(|&e| check_regular_family(&g64.problem, e, T_END, 49).unwrap().e_of_epsilon)
        .collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = REGULAR_EPSILONS.iter().zip(&es).map(|(e, v)| (e.ln(), v.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let power = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    ledger.record(
        10,
        "regular family",
        es.iter().all(|&e| e > 0.0) && es.windows(2).all(|w| w[1] < w[0]) && power >= REGULAR_POWER.0 && power <= REGULAR_POWER.1,
        format!(
            "E(ε) = {}; fitted power {power:.3}",
            es.iter().map(|e| format!("{e:.4e}")).collect::<Vec<_>>().join(", ")
        ),
    );

    println!("total {:.1}s, {} failed", total.elapsed().as_secs_f64(), ledger.failures);
    if ledger.failures > 0 {
        std::process::exit(1);
    }
}
