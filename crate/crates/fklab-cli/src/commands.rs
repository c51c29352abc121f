use std::f64::consts::PI;

use fklab_core::dynamics::{
    simulate_direct_with, solve_fixed_point, FixedPointConfig, InitialGuess, SimState, ThetaProfile,
};
use fklab_core::extension::{ExtensionOps, PsiStar};
use fklab_core::fk_operator::{boundary_residuals, energy_form, make_compatible};
use fklab_core::grid::{l2_norm, Grid, GridFunction};
use fklab_core::resolvent::{resolvent_estimate_sweep, sector_points, SweepReport};
use fklab_core::spectral::{discrete_spectrum, EigenBasis, SpectrumReport};
use fklab_core::FkError;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;

use crate::config::{Nonlinearity, Preset, RunConfig};
use crate::output::{run_id, Cell, CsvTable, OutDir, Summary};
use crate::AppError;

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub echo: serde_json::Value,
    pub out: OutDir,
    pub pool: ThreadPool,
}

impl Ctx<'_> {
    pub fn summary<'s, T: Serialize>(&'s self, command: &'s str, status: &'s str, result: T) -> Summary<'s, T> {
        Summary {
            run_id: run_id(command, &self.echo),
            command,
            status,
            config: &self.echo,
            result,
        }
    }

    fn write_summary<T: Serialize>(&self, command: &str, status: &str, result: T) -> Result<(), AppError> {
        let s = self.summary(command, status, result);
        crate::output::write_json(&self.out.file(&format!("{command}.json")), &s)?;
        Ok(())
    }

    /// Runs `f` for every θ of the sweep on the pool, keeping sweep order.
    fn per_theta<T: Send>(&self, f: impl Fn(f64) -> Result<T, FkError> + Sync) -> Result<Vec<(f64, T)>, FkError> {
        let thetas = self.cfg.thetas();
        self.pool
            .install(|| thetas.par_iter().map(|&t| f(t).map(|r| (t, r))).collect())
    }
}

/// Preset profile scaled by the configured amplitude; not boundary-corrected.
pub fn preset(cfg: &RunConfig, theta: f64, grid: Grid) -> Result<GridFunction, FkError> {
    let a = cfg.initial.amplitude;
    Ok(match cfg.initial.preset {
        Preset::Bump => GridFunction::from_fn(grid, |x| a * (1.0 + (PI * x).cos())),
        Preset::Cosine => GridFunction::from_fn(grid, |x| a * ((0.5 * PI * x).cos() + 0.5 * x)),
        Preset::Mode => {
            let basis = EigenBasis::new(theta, grid)?;
            let u = basis.operator().reconstruct(&basis.vector(0));
            let peak = u
                .values()
                .iter()
                .copied()
                .fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m });
            u.scale(a / peak)
        }
        Preset::Zero => GridFunction::zeros(grid),
    })
}

const STATE_COLUMNS: [(&str, &str); 9] = [
    ("t", "time"),
    ("sigma", "boundary concentration"),
    ("theta", "filtration ratio theta(sigma)"),
    ("l2", "trapezoid L2 norm of v"),
    ("energy", "cell-sum integral of |v'|^2"),
    ("trace_plus", "v(1)"),
    ("trace_minus", "v(-1)"),
    ("b1_residual", "(1-theta) v(1) - v(-1)"),
    ("b2_residual", "v'(1) - (1-theta) v'(-1)"),
];

fn state_row(t: f64, sigma: f64, theta: f64, v: &GridFunction) -> ([Cell; 9], f64) {
    let (b1, b2) = boundary_residuals(theta, v);
    (
        [
            t.into(),
            sigma.into(),
            theta.into(),
            l2_norm(v).into(),
            energy_form(v).into(),
            v.trace_plus().into(),
            v.trace_minus().into(),
            b1.into(),
            b2.into(),
        ],
        b1.abs().max(b2.abs()),
    )
}

#[derive(Serialize)]
struct SpectrumSummary {
    theta: f64,
    n: usize,
    leading: Vec<f64>,
    max_eigenvalue: f64,
    max_imag: f64,
    /// Whole spectrum real and non-positive up to 1e-8 of the spectral radius.
    real_nonpositive: bool,
    mu1: f64,
}

fn spectrum_summary(r: &SpectrumReport) -> SpectrumSummary {
    let radius = r.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    SpectrumSummary {
        theta: r.theta,
        n: r.n,
        leading: r.modes.iter().map(|m| m.discrete).collect(),
        max_eigenvalue: r.eigenvalues[0],
        max_imag: r.max_imag,
        real_nonpositive: r.max_imag <= 1e-8 * radius && r.eigenvalues[0] <= 1e-8 * radius,
        mu1: (-r.modes[0].oracle).sqrt(),
    }
}

pub fn spectrum(ctx: &Ctx) -> Result<(), AppError> {
    let cfg = ctx.cfg;
    let grid = Grid::new(cfg.n)?;
    let reports = ctx.per_theta(|t| discrete_spectrum(t, grid, cfg.modes))?;
    let mut csv = CsvTable::create(
        &ctx.out.file("spectrum.csv"),
        "fklab spectrum",
        &[
            ("theta", "filtration ratio"),
            ("k", "mode index"),
            ("lambda", "discrete eigenvalue"),
            ("oracle", "-mu_k^2 from the continuous eigenvalue equation"),
            ("mu", "sqrt(-oracle)"),
            ("rel_err", "relative error (absolute when the oracle is 0)"),
        ],
    )?;
    for (theta, r) in &reports {
        for m in &r.modes {
            csv.row(&[
                (*theta).into(),
                m.k.into(),
                m.discrete.into(),
                m.oracle.into(),
                (-m.oracle).sqrt().into(),
                m.rel_err.into(),
            ])?;
        }
    }
    csv.finish()?;
    let summary: Vec<SpectrumSummary> = reports.iter().map(|(_, r)| spectrum_summary(r)).collect();
    ctx.write_summary("spectrum", "ok", summary)
}

#[derive(Serialize)]
struct ResolventSummary {
    theta0: f64,
    h: f64,
    points: usize,
    sup_ratio: f64,
    max_interior_residual: f64,
    max_boundary_residual: f64,
}

fn resolvent_rows(cfg: &RunConfig, theta: f64, grid: Grid) -> Result<SweepReport, FkError> {
    let points = sector_points(&cfg.resolvent.angles, &cfg.resolvent.modulus_values())?;
    resolvent_estimate_sweep(theta, &points, &preset(cfg, theta, grid)?, cfg.q)
}

pub fn resolvent(ctx: &Ctx) -> Result<(), AppError> {
    let cfg = ctx.cfg;
    let grid = Grid::new(cfg.n)?;
    let reports = ctx.per_theta(|t| resolvent_rows(cfg, t, grid))?;
    let mut csv = CsvTable::create(
        &ctx.out.file("resolvent.csv"),
        "fklab resolvent, u = (lambda - A)^-1 f with f the initial preset",
        &[
            ("theta0", "frozen filtration ratio"),
            ("re", "Re lambda"),
            ("im", "Im lambda"),
            ("modulus", "|lambda|"),
            ("arg", "arg lambda"),
            ("ratio", "|lambda| |u|_q / |f|_q"),
            (
                "interior_residual",
                "relative L2 residual of lambda u - u'' - f on interior nodes",
            ),
            ("b1_residual", "|B1 u|"),
            ("b2_residual", "|B2 u|"),
        ],
    )?;
    let mut summary = Vec::new();
    for (theta, r) in &reports {
        let (mut res, mut bres) = (0.0f64, 0.0f64);
        for row in &r.rows {
            res = res.max(row.interior_residual);
            bres = bres.max(row.boundary_residuals.0.max(row.boundary_residuals.1));
            csv.row(&[
                (*theta).into(),
                row.lambda.re.into(),
                row.lambda.im.into(),
                row.lambda.norm().into(),
                row.lambda.arg().into(),
                row.ratio.into(),
                row.interior_residual.into(),
                row.boundary_residuals.0.into(),
                row.boundary_residuals.1.into(),
            ])?;
        }
        summary.push(ResolventSummary {
            theta0: *theta,
            h: grid.h(),
            points: r.rows.len(),
            sup_ratio: r.sup_ratio,
            max_interior_residual: res,
            max_boundary_residual: bres,
        });
    }
    csv.finish()?;
    ctx.write_summary("resolvent", "ok", summary)
}

#[derive(Serialize, Default)]
struct SimulateSummary {
    steps: usize,
    rows: usize,
    t_final: f64,
    sigma_final: f64,
    theta_final: f64,
    l2_final: f64,
    max_boundary_residual: f64,
    /// Leading eigenvalue for frozen-θ linear runs.
    lambda1: Option<f64>,
    /// `max |‖v(t)‖/‖v0‖ - e^{λ1 t}|` over the rows.
    envelope_gap: Option<f64>,
    /// `max (‖v(t)‖/‖v0‖ - e^{λ1 t})` over the rows.
    envelope_excess: Option<f64>,
    error: Option<String>,
}

pub fn simulate(ctx: &Ctx) -> Result<(), AppError> {
    let cfg = ctx.cfg;
    let grid = Grid::new(cfg.n)?;
    let profile = cfg.profile();
    let nonlin = cfg.nonlinearity.spec();
    let sigma0 = cfg.initial.sigma0;
    let theta0 = profile.theta(sigma0);
    let v0 = make_compatible(theta0, &preset(cfg, theta0, grid)?)?;
    let norm0 = l2_norm(&v0);
    let lambda1 = match (profile, cfg.nonlinearity) {
        (ThetaProfile::Constant { theta }, Nonlinearity::Linear) => {
            Some(discrete_spectrum(theta, grid, 1)?.modes[0].discrete)
        }
        _ => None,
    };

    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let mut csv = CsvTable::create(&ctx.out.file("simulate.csv"), "fklab simulate", &STATE_COLUMNS)?;
    let mut s = SimulateSummary {
        steps,
        lambda1,
        ..SimulateSummary::default()
    };
    let (mut gap, mut excess) = (0.0f64, f64::NEG_INFINITY);
    let mut io_error = None;
    let mut k = 0;
    let result = simulate_direct_with(
        SimState::new(0.0, v0, sigma0, &profile),
        cfg.horizon,
        cfg.dt,
        &profile,
        &nonlin,
        |st| {
            if k % cfg.sample_every == 0 || k == steps {
                let (cells, bres) = state_row(st.t, st.sigma, st.theta, &st.v);
                if let Err(e) = csv.row(&cells) {
                    io_error.get_or_insert(e);
                }
                s.rows += 1;
                s.max_boundary_residual = s.max_boundary_residual.max(bres);
                if let (Some(l), true) = (lambda1, norm0 > 0.0) {
                    let d = l2_norm(&st.v) / norm0 - (l * st.t).exp();
                    gap = gap.max(d.abs());
                    excess = excess.max(d);
                }
            }
            k += 1;
        },
    );
    csv.finish()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    if lambda1.is_some() && norm0 > 0.0 {
        s.envelope_gap = Some(gap);
        s.envelope_excess = Some(excess);
    }
    let last = match &result {
        Ok(st) => Some(st.clone()),
        Err(FkError::BlowUp { last_good, .. }) => last_good.as_deref().cloned(),
        Err(_) => None,
    };
    if let Some(st) = last {
        s.t_final = st.t;
        s.sigma_final = st.sigma;
        s.theta_final = st.theta;
        s.l2_final = l2_norm(&st.v);
    }
    let status = match &result {
        Ok(_) => "ok",
        Err(FkError::BlowUp { .. }) => "blow_up",
        Err(_) => "failed",
    };
    s.error = result.as_ref().err().map(|e| e.to_string());
    ctx.write_summary("simulate", status, s)?;
    result.map(|_| ()).map_err(AppError::from)
}

#[derive(Serialize)]
struct FixedPointSummary {
    theta0: f64,
    iterations: usize,
    converged: bool,
    horizon: f64,
    halvings: usize,
    defects: Vec<f64>,
    ratios: Vec<(usize, f64)>,
    /// Largest defect ratio from iterate 2 on.
    max_ratio_from_2: Option<f64>,
    max_boundary_residual: f64,
}

pub fn fixedpoint(ctx: &Ctx) -> Result<(), AppError> {
    let cfg = ctx.cfg;
    let grid = Grid::new(cfg.n)?;
    let profile = cfg.profile();
    let nonlin = cfg.nonlinearity.spec();
    let sigma0 = cfg.initial.sigma0;
    let theta0 = profile.theta(sigma0);
    let v0 = make_compatible(theta0, &preset(cfg, theta0, grid)?)?;
    let ops = ExtensionOps::new(PsiStar::default(), grid);
    let fp_cfg = FixedPointConfig {
        horizon: cfg.horizon,
        dt: cfg.dt,
        p: cfg.p,
        q: cfg.q,
        ..FixedPointConfig::default()
    };
    let report = match solve_fixed_point(&v0, sigma0, &fp_cfg, &ops, &profile, &nonlin, &InitialGuess::Frozen) {
        Ok(r) => r,
        Err(e) => {
            ctx.write_summary("fixedpoint", "failed", e.to_string())?;
            return Err(e.into());
        }
    };

    let traj = &report.trajectory;
    let last = traj.len() - 1;
    let mut csv = CsvTable::create(
        &ctx.out.file("fixedpoint.csv"),
        "fklab fixedpoint limit",
        &STATE_COLUMNS,
    )?;
    let mut bmax: f64 = 0.0;
    for k in (0..traj.len()).filter(|k| k % cfg.sample_every == 0 || *k == last) {
        let sigma = traj.sigma[k];
        let (cells, bres) = state_row(traj.times[k], sigma, profile.theta(sigma), &traj.states[k]);
        bmax = bmax.max(bres);
        csv.row(&cells)?;
    }
    csv.finish()?;

    let mut defects = CsvTable::create(
        &ctx.out.file("fixedpoint_defects.csv"),
        "fklab fixedpoint defects",
        &[
            ("k", "defect index, |x^(k+1) - x^k| in the maximal-regularity norm"),
            ("defect", "defect value"),
            ("ratio", "defect[k] / defect[k-1], empty when undefined"),
        ],
    )?;
    for (k, d) in report.defects.iter().enumerate() {
        let ratio = report.ratios.iter().find(|r| r.0 == k).map(|r| r.1);
        defects.row(&[k.into(), (*d).into(), ratio.into()])?;
    }
    defects.finish()?;

    let max_ratio_from_2 = report.ratios.iter().filter(|r| r.0 >= 2).map(|r| r.1).reduce(f64::max);
    let converged = report.converged;
    ctx.write_summary(
        "fixedpoint",
        if converged { "ok" } else { "not_converged" },
        FixedPointSummary {
            theta0: report.theta0,
            iterations: report.iterations,
            converged,
            horizon: report.horizon,
            halvings: report.halvings,
            defects: report.defects.clone(),
            ratios: report.ratios.clone(),
            max_ratio_from_2,
            max_boundary_residual: bmax,
        },
    )?;
    if converged {
        Ok(())
    } else {
        Err(FkError::MaxIterations(fp_cfg.max_iter).into())
    }
}

#[derive(Serialize)]
struct SweepPoint {
    theta: f64,
    mu1: f64,
    lambda1: f64,
    oracle: f64,
    rel_err: f64,
    sup_ratio: f64,
    max_interior_residual: f64,
}

pub fn sweep(ctx: &Ctx) -> Result<(), AppError> {
    let cfg = ctx.cfg;
    let grid = Grid::new(cfg.n)?;
    let points = ctx.per_theta(|theta| {
        let m = discrete_spectrum(theta, grid, 1)?.modes[0];
        let r = resolvent_rows(cfg, theta, grid)?;
        Ok(SweepPoint {
            theta,
            mu1: (-m.oracle).sqrt(),
            lambda1: m.discrete,
            oracle: m.oracle,
            rel_err: m.rel_err,
            sup_ratio: r.sup_ratio,
            max_interior_residual: r.rows.iter().fold(0.0, |a, row| a.max(row.interior_residual)),
        })
    })?;
    let mut csv = CsvTable::create(
        &ctx.out.file("sweep.csv"),
        "fklab sweep over theta",
        &[
            ("theta", "filtration ratio"),
            ("mu1", "first root of the continuous eigenvalue equation"),
            ("lambda1", "leading discrete eigenvalue"),
            ("oracle", "-mu1^2"),
            ("rel_err", "relative error of lambda1"),
            ("sup_ratio", "max |lambda| |u|_q / |f|_q over the sector grid"),
            (
                "max_interior_residual",
                "max relative interior residual over the sector grid",
            ),
        ],
    )?;
    for (_, p) in &points {
        csv.row(&[
            p.theta.into(),
            p.mu1.into(),
            p.lambda1.into(),
            p.oracle.into(),
            p.rel_err.into(),
            p.sup_ratio.into(),
            p.max_interior_residual.into(),
        ])?;
    }
    csv.finish()?;
    let summary: Vec<SweepPoint> = points.into_iter().map(|(_, p)| p).collect();
    ctx.write_summary("sweep", "ok", summary)
}
