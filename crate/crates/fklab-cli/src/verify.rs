use std::f64::consts::PI;

use fklab_core::dynamics::{
    continuous_dependence_probe, simulate_direct, solve_fixed_point, FixedPointConfig, InitialGuess, NonlinearitySpec,
    SimState, ThetaProfile,
};
use fklab_core::extension::{AlphaPair, ExtensionOps, PsiStar};
use fklab_core::fk_operator::{assemble_operator, boundary_residuals, energy_form, make_compatible, OperatorMatrix};
use fklab_core::grid::{diff1, diff2, l2_norm, lq_norm, reflect, Grid, GridFunction};
use fklab_core::resolvent::{relative_l2, resolvent_estimate_sweep, sector_points, semigroup_contour};
use fklab_core::spectral::{discrete_spectrum, EigenBasis};
use fklab_core::FkError;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

pub const SUITES: [&str; 6] = [
    "grid_core",
    "fk_operator",
    "extension_algebra",
    "spectral_analysis",
    "resolvent_calculus",
    "dynamics",
];

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub psi: PsiStar,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    /// `value <= threshold`, or `>=` when `lower_bound` is set.
    pub lower_bound: bool,
    pub pass: bool,
    /// Reported but excluded from the verdict.
    pub counted: bool,
    pub note: Option<String>,
}

impl Check {
    fn at_most(suite: &'static str, name: &'static str, value: f64, threshold: f64) -> Self {
        Check {
            suite,
            name,
            value,
            threshold,
            lower_bound: false,
            pass: value <= threshold,
            counted: true,
            note: None,
        }
    }

    fn at_least(suite: &'static str, name: &'static str, value: f64, threshold: f64) -> Self {
        Check {
            lower_bound: true,
            pass: value >= threshold,
            ..Check::at_most(suite, name, value, threshold)
        }
    }

    fn uncounted(mut self, note: &str) -> Self {
        self.counted = false;
        self.note = Some(note.to_string());
        self
    }

    fn errored(suite: &'static str, e: FkError) -> Self {
        Check {
            suite,
            name: "completed",
            value: f64::NAN,
            threshold: 0.0,
            lower_bound: false,
            pass: false,
            counted: true,
            note: Some(e.to_string()),
        }
    }
}

/// Runs one suite by name; numeric failures become a failing `completed` check.
pub fn run_suite(name: &str, opts: VerifyOptions) -> Vec<Check> {
    let index = SUITES
        .iter()
        .position(|s| *s == name)
        .expect("suite names are validated");
    let suite = SUITES[index];
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed ^ index as u64);
    let result = match suite {
        "grid_core" => grid_core(),
        "fk_operator" => fk_operator(&mut rng),
        "extension_algebra" => extension_algebra(&mut rng, opts.psi),
        "spectral_analysis" => spectral_analysis(),
        "resolvent_calculus" => resolvent_calculus(),
        _ => dynamics(),
    };
    result.unwrap_or_else(|e| vec![Check::errored(suite, e)])
}

fn random_smooth(grid: Grid, rng: &mut Xoshiro256PlusPlus, modes: usize) -> GridFunction {
    let c: Vec<(f64, f64)> = (0..modes)
        .map(|k| {
            let d = 1.0 / (1.0 + k as f64).powi(2);
            (rng.random_range(-1.0..1.0) * d, rng.random_range(-1.0..1.0) * d)
        })
        .collect();
    GridFunction::from_fn(grid, |x| {
        c.iter()
            .enumerate()
            .map(|(k, (a, b))| {
                let w = k as f64 * PI * x / 2.0;
                a * w.cos() + b * w.sin()
            })
            .sum()
    })
}

fn grid_core() -> Result<Vec<Check>, FkError> {
    const S: &str = "grid_core";
    let g = Grid::new(200)?;
    let u = GridFunction::from_fn(g, |x| 1.0 + 2.0 * x + 3.0 * x * x);
    let d1 = diff1(&u).sub(&GridFunction::from_fn(g, |x| 2.0 + 6.0 * x)).max_abs();
    let d2 = diff2(&u).sub(&GridFunction::from_fn(g, |_| 6.0)).max_abs();
    let ones = GridFunction::from_fn(g, |_| 1.0);
    let norm = (lq_norm(&ones, 3.0)? - 2f64.powf(1.0 / 3.0)).abs();
    let quad_err = |n: usize| -> Result<f64, FkError> {
        let c = GridFunction::from_fn(Grid::new(n)?, f64::cos);
        Ok((l2_norm(&c).powi(2) - (1.0 + (2.0f64).sin() / 2.0)).abs())
    };
    let order = quad_err(100)? / quad_err(200)?;
    let w = GridFunction::from_fn(g, |x| (2.0 * x).sin() + x * x * x);
    let involution = reflect(&reflect(&w)).sub(&w).max_abs();
    Ok(vec![
        Check::at_most(S, "first difference exact on quadratics", d1, 1e-9),
        Check::at_most(S, "second difference exact on quadratics", d2, 1e-7),
        Check::at_most(S, "L^q norm of the constant", norm, 1e-14),
        Check::at_least(S, "quadrature refinement ratio", order, 3.5),
        Check::at_most(S, "reflection is an involution", involution, 0.0),
    ])
}

fn fk_operator(rng: &mut Xoshiro256PlusPlus) -> Result<Vec<Check>, FkError> {
    const S: &str = "fk_operator";
    let g = Grid::new(200)?;
    let h = g.h();
    let dt = 1e-3;
    let (mut min_form, mut compat, mut identity) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut monotone = true;
    for &theta in &[0.25, 0.5, 1.0] {
        let op = assemble_operator(theta, g)?;
        for _ in 0..100 {
            let v = make_compatible(theta, &random_smooth(g, rng, 12))?;
            let (b1, b2) = boundary_residuals(theta, &v);
            compat = compat.max(b1.abs()).max(b2.abs());
            let x = OperatorMatrix::interior(&v);
            min_form = min_form.min(-op.interior_inner(&op.apply(&x), &x));
        }
        let p = ThetaProfile::Constant { theta };
        let v0 = make_compatible(theta, &random_smooth(g, rng, 6))?;
        let states = simulate_direct(
            SimState::new(0.0, v0, 0.0, &p),
            0.25,
            dt,
            &p,
            &NonlinearitySpec::linear(),
        )?;
        for w in states.windows(2) {
            let (a, b) = (&w[0].v, &w[1].v);
            monotone &= l2_norm(b) <= l2_norm(a);
            let r = (0.5 * l2_norm(b).powi(2) - 0.5 * l2_norm(a).powi(2)) / dt + energy_form(&a.add(b).scale(0.5));
            identity = identity.max(r.abs());
        }
    }
    Ok(vec![
        Check::at_most(S, "compatible data satisfy both boundary relations", compat, 1e-10),
        Check::at_least(S, "dissipativity -<Av,v>", min_form, -1e-8),
        Check::at_most(
            S,
            "frozen linear norm is non-increasing",
            if monotone { 0.0 } else { 1.0 },
            0.0,
        ),
        Check::at_most(
            S,
            "per-step energy identity residual",
            identity,
            10.0 * (h * h + dt * dt),
        ),
    ])
}

fn extension_algebra(rng: &mut Xoshiro256PlusPlus, psi: PsiStar) -> Result<Vec<Check>, FkError> {
    const S: &str = "extension_algebra";
    let g = Grid::new(200)?;
    let h2 = g.h().powi(2);
    let ops = ExtensionOps::new(psi, g);

    let (mut first, mut second, mut commutation) = (0.0f64, 0.0f64, 0.0f64);
    for &a in &[0.0, 0.3, 0.5, 1.0] {
        for _ in 0..10 {
            let u = random_smooth(g, rng, 6);
            let e = ops.extend_e(a, &u);
            first = first.max(((1.0 - a) * e.trace_plus() - e.trace_minus() - u.trace_plus()).abs());
            let (du, de) = (diff1(&u), diff1(&e));
            second = second.max((de.trace_plus() - (1.0 - a) * de.trace_minus() + du.trace_minus()).abs());
            let r2 = diff2(&e)
                .sub(&ops.extend_e(a, &diff2(&u)))
                .sub(&ops.remainder_r(2, a, &u)?);
            let r1 = de.sub(&ops.extend_ebar(a, &du)).sub(&ops.remainder_r(1, a, &u)?);
            commutation = commutation.max(r1.max_abs()).max(r2.max_abs());
        }
    }
    let residual = |n: usize| -> Result<f64, FkError> {
        let o = ExtensionOps::new(psi, Grid::new(n)?);
        let u = GridFunction::from_fn(o.grid(), |x| (1.3 * x).sin() + 0.4 * (2.0 * x).cos() + x * x);
        let e = o.extend_e(0.35, &u);
        Ok(diff2(&e)
            .sub(&o.extend_e(0.35, &diff2(&u)))
            .sub(&o.remainder_r(2, 0.35, &u)?)
            .max_abs())
    };
    let order = residual(200)? / residual(400)?;

    let mut inverse: f64 = 0.0;
    for &d in &[-0.3, -0.1, 0.1, 0.2, 0.3] {
        let pair = AlphaPair::new(0.5, 0.5 + d)?;
        let u = random_smooth(g, rng, 6);
        inverse = inverse.max(l2_norm(&ops.apply_g(pair, &ops.apply_g_inverse(pair, &u)?).sub(&u)));
    }

    let mut identity: f64 = 0.0;
    let (p1, p2) = (AlphaPair::new(0.5, 0.7)?, AlphaPair::new(0.5, 0.35)?);
    for _ in 0..5 {
        let u = random_smooth(g, rng, 6);
        let lhs = ops.apply_g_inverse(p1, &u)?.sub(&ops.apply_g_inverse(p2, &u)?);
        let inner = ops.extend_e(0.5, &ops.apply_g_inverse(p2, &u)?);
        identity = identity.max(lhs.sub(&ops.apply_g_inverse(p1, &inner)?.scale(0.35)).max_abs());
    }

    let dt = 1e-3;
    let times: Vec<f64> = (0..=40).map(|k| k as f64 * dt).collect();
    let path: Vec<f64> = times.iter().map(|t| 0.5 + 0.2 * (3.0 * t).sin()).collect();
    let rate: Vec<f64> = times.iter().map(|t| 0.6 * (3.0 * t).cos()).collect();
    let phi: Vec<GridFunction> = times
        .iter()
        .map(|&t| GridFunction::from_fn(g, |x| (1.0 + t) * (x + 0.5 * t).cos()))
        .collect();
    let formula = ops.commutator_dt_g_inverse(0.5, &path, &rate, &phi, dt)?;
    let sampled = ops.g_inverse_path(0.5, &path, &phi)?;
    let mut gap: f64 = 0.0;
    for k in 1..times.len() - 1 {
        let fd = sampled[k + 1].sub(&sampled[k - 1]).scale(0.5 / dt);
        gap = gap.max(fd.sub(&formula[k]).max_abs());
    }

    Ok(vec![
        Check::at_most(S, "boundary identity for the value trace", first, 10.0 * h2),
        Check::at_most(S, "boundary identity for the derivative trace", second, 10.0 * h2),
        Check::at_least(S, "derivative commutation refinement ratio", order, 3.5),
        Check::at_most(S, "derivative commutation residual", commutation, 10.0 * h2)
            .uncounted("constant set by the fourth derivative of the transition profile; converges at O(h^2)"),
        Check::at_most(S, "perturbation inverse residual", inverse, 1e-10),
        Check::at_most(S, "difference of inverses identity", identity, 1e-9),
        Check::at_most(
            S,
            "time commutator against finite differences",
            gap,
            5.0 * dt * dt + 1e-9,
        ),
    ])
}

fn spectral_analysis() -> Result<Vec<Check>, FkError> {
    const S: &str = "spectral_analysis";
    let (mut err, mut ratio) = (0.0f64, f64::INFINITY);
    for &theta in &[0.25, 0.5, 0.75, 1.0] {
        let coarse = discrete_spectrum(theta, Grid::new(400)?, 3)?;
        let fine = discrete_spectrum(theta, Grid::new(800)?, 3)?;
        for (a, b) in coarse.modes.iter().zip(&fine.modes) {
            err = err.max(a.rel_err);
            ratio = ratio.min(a.rel_err / b.rel_err);
        }
    }
    let periodic = discrete_spectrum(0.0, Grid::new(200)?, 1)?;
    let mixed = discrete_spectrum(1.0, Grid::new(400)?, 1)?;
    let target = -PI * PI / 16.0;
    Ok(vec![
        Check::at_most(S, "eigenvalue relative error against the oracle", err, 1e-3),
        Check::at_least(S, "eigenvalue refinement ratio", ratio, 3.0),
        Check::at_most(S, "periodic limit zero eigenvalue", periodic.eigenvalues[0].abs(), 1e-8),
        Check::at_most(
            S,
            "mixed limit leading eigenvalue",
            ((mixed.modes[0].discrete - target) / target).abs(),
            1e-3,
        ),
    ])
}

fn resolvent_calculus() -> Result<Vec<Check>, FkError> {
    const S: &str = "resolvent_calculus";
    let g = Grid::new(400)?;
    let h2 = g.h().powi(2);
    let moduli: Vec<f64> = (0..10).map(|k| 0.1 * 10f64.powf(4.0 * k as f64 / 9.0)).collect();
    let points = sector_points(&[-0.75 * PI, 0.0, 0.75 * PI], &moduli)?;
    let (mut sup, mut res, mut bres) = (0.0f64, 0.0f64, 0.0f64);
    for f in [
        GridFunction::from_fn(g, |_| 1.0),
        GridFunction::from_fn(g, |x| (3.0 * x).sin() + x * x),
    ] {
        let rep = resolvent_estimate_sweep(0.5, &points, &f, 2.0)?;
        sup = sup.max(rep.sup_ratio);
        for r in &rep.rows {
            res = res.max(r.interior_residual);
            bres = bres.max(r.boundary_residuals.0.max(r.boundary_residuals.1));
        }
    }

    let g = Grid::new(200)?;
    let theta = 0.5;
    let u0 = make_compatible(
        theta,
        &GridFunction::from_fn(g, |x| (PI * x).cos() + 0.5 * x + 0.2 * (3.0 * x).sin()),
    )?;
    let basis = EigenBasis::new(theta, g)?;
    let p = ThetaProfile::Constant { theta };
    let dt = 1e-3;
    let cn = simulate_direct(
        SimState::new(0.0, u0.clone(), 0.0, &p),
        1.0,
        dt,
        &p,
        &NonlinearitySpec::linear(),
    )?;
    let mut gap: f64 = 0.0;
    for &t in &[0.1, 1.0] {
        let contour = semigroup_contour(theta, t, &u0)?;
        let modal = basis.evolve(t, &u0)?;
        let stepped = &cn[(t / dt).round() as usize].v;
        gap = gap
            .max(relative_l2(&contour, &modal))
            .max(relative_l2(&contour, stepped))
            .max(relative_l2(&modal, stepped));
    }
    Ok(vec![
        Check::at_most(S, "sectorial bound sup |lambda| |u| / |f|", sup, 10.0),
        Check::at_most(S, "resolvent interior residual", res, 10.0 * h2),
        Check::at_most(S, "resolvent boundary residuals", bres, 1e-8),
        Check::at_most(S, "contour, modal and Crank-Nicolson semigroups agree", gap, 1e-3),
    ])
}

fn dynamics() -> Result<Vec<Check>, FkError> {
    const S: &str = "dynamics";
    let g = Grid::new(200)?;
    let cfg = FixedPointConfig {
        horizon: 0.05,
        dt: 5e-4,
        ..FixedPointConfig::default()
    };
    let ops = ExtensionOps::new(PsiStar::default(), g);
    let p = ThetaProfile::default();
    let nl = NonlinearitySpec::typical();
    let v0 = GridFunction::from_fn(g, |x| 0.1 * (1.0 + (PI * x).cos()));

    let fp = solve_fixed_point(&v0, 0.5, &cfg, &ops, &p, &nl, &InitialGuess::Frozen)?;
    let max_ratio = fp.ratios.iter().filter(|r| r.0 >= 2).map(|r| r.1).fold(0.0, f64::max);
    let direct = simulate_direct(SimState::new(0.0, v0.clone(), 0.5, &p), fp.horizon, cfg.dt, &p, &nl)?;
    let gap = direct
        .iter()
        .zip(&fp.trajectory.states)
        .map(|(d, v)| d.v.sub(v).max_abs())
        .fold(0.0, f64::max);
    let steps = fp.trajectory.len();
    let other = InitialGuess::Trajectory {
        w: (0..steps)
            .map(|k| v0.scale(1.0 - 0.5 * k as f64 / steps as f64))
            .collect(),
        sigma: (0..steps).map(|k| 0.5 + 0.2 * k as f64 / steps as f64).collect(),
    };
    let fp2 = solve_fixed_point(&v0, 0.5, &cfg, &ops, &p, &nl, &other)?;
    let unique = fp
        .trajectory
        .states
        .iter()
        .zip(&fp2.trajectory.states)
        .map(|(a, b)| a.sub(b).max_abs())
        .fold(0.0, f64::max);

    let pert = make_compatible(
        p.theta(0.5),
        &GridFunction::from_fn(g, |x| (1.0 + (PI * x).cos()) * (1.0 + x * x)),
    )?;
    let r3 = continuous_dependence_probe(&v0, 0.5, &pert, 1e-3, &cfg, &ops, &p, &nl)?;
    let r4 = continuous_dependence_probe(&v0, 0.5, &pert, 1e-4, &cfg, &ops, &p, &nl)?;
    Ok(vec![
        Check::at_most(S, "Picard defect ratio from iterate 2", max_ratio, 0.5),
        Check::at_most(S, "fixed point against the direct solver", gap, 1e-3),
        Check::at_most(S, "two starting iterates reach the same limit", unique, 1e-8),
        Check::at_most(
            S,
            "perturbation ratio spread between eps sizes",
            ((r3 - r4) / r4).abs(),
            0.2,
        ),
    ])
}
