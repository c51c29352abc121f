//! Resolvent `(λ - A)⁻¹ f` of the continuous FK operator: the whole-line
//! kernel `e^{-√λ|x|}/(2√λ)` applied to the piecewise-linear interpolant of
//! `f`, plus the exponential boundary correction. Also the sectorial sweep
//! and Dunford-integral functional calculus.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{FkError, Result};
use crate::grid::{diff2, l2_norm, lq_norm, ComplexGridFunction, GridFunction};

const NEAR_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorPoint {
    pub lambda: Complex64,
}

impl SectorPoint {
    /// Rejects points on the cut `(-∞, 0]`.
    pub fn new(lambda: Complex64) -> Result<Self> {
        if !(lambda.re.is_finite() && lambda.im.is_finite()) {
            return Err(FkError::NonFinite("spectral parameter"));
        }
        if lambda.im == 0.0 && lambda.re <= 0.0 {
            return Err(FkError::BranchCut(lambda));
        }
        Ok(SectorPoint { lambda })
    }

    pub fn polar(modulus: f64, arg: f64) -> Result<Self> {
        Self::new(Complex64::from_polar(modulus, arg))
    }

    pub fn modulus(&self) -> f64 {
        self.lambda.norm()
    }

    pub fn arg(&self) -> f64 {
        self.lambda.arg()
    }

    /// Principal root, `Re √λ > 0`.
    pub fn sqrt(&self) -> Complex64 {
        self.lambda.sqrt()
    }
}

/// Boundary functionals of `e^{±√λ x}` and the determinant factor `M(λ)`.
/// `B_1(e^{±√λx}) = B1±`, `B_2(e^{±√λx}) = ±√λ·B2±`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySystem {
    pub b1p: Complex64,
    pub b1m: Complex64,
    pub b2p: Complex64,
    pub b2m: Complex64,
    pub m: Complex64,
}

impl BoundarySystem {
    pub fn new(theta0: f64, point: SectorPoint) -> Self {
        let c = 1.0 - theta0;
        let s = point.sqrt();
        let (ep, em) = (s.exp(), (-s).exp());
        let b1p = ep * c - em;
        let b1m = em * c - ep;
        let b2p = ep - em * c;
        let b2m = em - ep * c;
        BoundarySystem {
            b1p,
            b1m,
            b2p,
            b2m,
            m: b1p * b1p + b2p * b2p,
        }
    }
}

/// `u1 = k_λ * f` at the nodes, with traces and slopes at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct WholeLine {
    pub values: ComplexGridFunction,
    /// `(u1(-1), u1'(-1))`.
    pub left: (Complex64, Complex64),
    /// `(u1(1), u1'(1))`.
    pub right: (Complex64, Complex64),
}

/// `((1-e^{-a})/a, (1-e^{-a}-a e^{-a})/a²)`.
fn cell_weights(a: Complex64) -> (Complex64, Complex64) {
    if a.norm() < 0.5 {
        let mut w1 = Complex64::new(0.0, 0.0);
        let mut w2 = Complex64::new(0.0, 0.0);
        let mut term = Complex64::new(1.0, 0.0);
        let mut fact = 1.0;
        for k in 0..20 {
            fact *= (k + 1) as f64;
            w1 += term / fact;
            w2 += term * ((k + 1) as f64) / (fact * (k + 2) as f64);
            term *= -a;
        }
        (w1, w2)
    } else {
        let e = (-a).exp();
        ((1.0 - e) / a, (1.0 - e - a * e) / (a * a))
    }
}

pub fn whole_line_solve(point: SectorPoint, f: &ComplexGridFunction) -> WholeLine {
    let grid = f.grid();
    let n = grid.n();
    let h = grid.h();
    let s = point.sqrt();
    let a = s * h;
    let e = (-a).exp();
    let (w1, w2) = cell_weights(a);
    let cf = w2 * h;
    let cn = (w1 - w2) * h;
    let fv = f.values();
    let mut left = vec![Complex64::new(0.0, 0.0); n + 1];
    let mut right = vec![Complex64::new(0.0, 0.0); n + 1];
    for i in 0..n {
        left[i + 1] = e * left[i] + cf * fv[i] + cn * fv[i + 1];
    }
    for i in (0..n).rev() {
        right[i] = e * right[i + 1] + cf * fv[i + 1] + cn * fv[i];
    }
    let two_s = s * 2.0;
    let values: Vec<Complex64> = left.iter().zip(&right).map(|(l, r)| (l + r) / two_s).collect();
    WholeLine {
        values: GridFunction::new(grid, values).expect("length n + 1"),
        left: (right[0] / two_s, right[0] * 0.5),
        right: (left[n] / two_s, -left[n] * 0.5),
    }
}

/// Coefficients `(a, b)` of `u2 = a e^{√λ(x-1)} + b e^{-√λ(x+1)}` with
/// `B_j(θ0; u1 + u2) = 0`. The shifted basis keeps entries bounded.
pub fn boundary_correction(theta0: f64, point: SectorPoint, u1: &WholeLine) -> Result<(Complex64, Complex64)> {
    let c = 1.0 - theta0;
    let s = point.sqrt();
    let e2 = (-s * 2.0).exp();
    let k11 = c - e2;
    let k12 = e2 * c - 1.0;
    let k21 = s - s * c * e2;
    let k22 = s * c - s * e2;
    let det = k11 * k22 - k12 * k21;
    // det = √λ e^{-2√λ} M(λ)
    let scaled = det / s;
    let m = if scaled.norm() == 0.0 {
        scaled
    } else {
        (s * 2.0).exp() * scaled
    };
    if scaled.norm() < NEAR_EIGENVALUE || (m.is_finite() && m.norm() < NEAR_EIGENVALUE) {
        return Err(FkError::NearEigenvalue(point.lambda, m.norm()));
    }
    let (um, dum) = u1.left;
    let (up, dup) = u1.right;
    let r1 = -(up * c - um);
    let r2 = -(dup - dum * c);
    Ok(((r1 * k22 - k12 * r2) / det, (k11 * r2 - k21 * r1) / det))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolventSolution {
    pub u: ComplexGridFunction,
    /// `B_1`, `B_2` of the continuous solution (exact traces).
    pub boundary_residuals: (f64, f64),
}

/// `(λ - A(θ0))⁻¹ f`.
pub fn resolve(theta0: f64, point: SectorPoint, f: &ComplexGridFunction) -> Result<ResolventSolution> {
    if !(0.0..=1.0).contains(&theta0) {
        return Err(FkError::InvalidTheta(theta0));
    }
    let u1 = whole_line_solve(point, f);
    let (a, b) = boundary_correction(theta0, point, &u1)?;
    let s = point.sqrt();
    let grid = f.grid();
    let u = GridFunction::new(
        grid,
        u1.values
            .values()
            .iter()
            .zip(grid.nodes())
            .map(|(v, x)| v + a * (s * (x - 1.0)).exp() + b * (-s * (x + 1.0)).exp())
            .collect(),
    )?;
    let e2 = (-s * 2.0).exp();
    let c = 1.0 - theta0;
    let (um, dum) = (u1.left.0 + a * e2 + b, u1.left.1 + s * (a * e2 - b));
    let (up, dup) = (u1.right.0 + a + b * e2, u1.right.1 + s * (a - b * e2));
    Ok(ResolventSolution {
        u,
        boundary_residuals: ((up * c - um).norm(), (dup - dum * c).norm()),
    })
}

pub fn resolve_real(theta0: f64, point: SectorPoint, f: &GridFunction) -> Result<ResolventSolution> {
    resolve(theta0, point, &f.to_complex())
}

/// `‖λu - u'' - f‖ / ‖f‖` over interior nodes with the 3-point stencil.
pub fn interior_residual(point: SectorPoint, u: &ComplexGridFunction, f: &ComplexGridFunction) -> f64 {
    let d2 = diff2(u);
    let n = u.grid().n();
    let h = u.grid().h();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 1..n {
        let r = point.lambda * u.values()[i] - d2.values()[i] - f.values()[i];
        num += h * r.norm_sqr();
        den += h * f.values()[i].norm_sqr();
    }
    if den == 0.0 {
        return num.sqrt();
    }
    (num / den).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: Complex64,
    /// `|λ| ‖u‖_q / ‖f‖_q`, 0 for `f = 0`.
    pub ratio: f64,
    pub interior_residual: f64,
    pub boundary_residuals: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub theta0: f64,
    pub q: f64,
    pub rows: Vec<SweepRow>,
    pub sup_ratio: f64,
}

/// Sector points `ρ e^{iφ}` for every angle and modulus.
pub fn sector_points(angles: &[f64], moduli: &[f64]) -> Result<Vec<SectorPoint>> {
    let mut out = Vec::with_capacity(angles.len() * moduli.len());
    for &phi in angles {
        for &r in moduli {
            out.push(SectorPoint::polar(r, phi)?);
        }
    }
    Ok(out)
}

pub fn resolvent_estimate_sweep(theta0: f64, points: &[SectorPoint], f: &GridFunction, q: f64) -> Result<SweepReport> {
    let fc = f.to_complex();
    let fnorm = lq_norm(f, q)?;
    let mut rows = Vec::with_capacity(points.len());
    for &p in points {
        let sol = resolve(theta0, p, &fc)?;
        let ratio = if fnorm == 0.0 {
            0.0
        } else {
            p.modulus() * lq_norm(&sol.u, q)? / fnorm
        };
        rows.push(SweepRow {
            lambda: p.lambda,
            ratio,
            interior_residual: interior_residual(p, &sol.u, &fc),
            boundary_residuals: sol.boundary_residuals,
        });
    }
    let sup_ratio = rows.iter().fold(0.0, |m: f64, r| m.max(r.ratio));
    Ok(SweepReport {
        theta0,
        q,
        rows,
        sup_ratio,
    })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Golub–Welsch).
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(order, order, |i, j| {
        if i + 1 == j || j + 1 == i {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &x)| (x, 2.0 * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Two rays at `±angle` joined by an arc of radius `inner_radius` through
/// the positive axis, oriented from `∞e^{-i angle}` to `∞e^{+i angle}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    pub angle: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Width of each Gauss–Legendre panel in `ln r`.
    pub panel_width: f64,
    pub order: usize,
    pub arc_panels: usize,
}

impl Default for ContourSpec {
    fn default() -> Self {
        ContourSpec {
            angle: 3.0 * PI / 4.0,
            inner_radius: 1e-3,
            outer_radius: 1e3,
            panel_width: 0.5,
            order: 16,
            arc_panels: 4,
        }
    }
}

const TAIL_TOLERANCE: f64 = 1e-12;
const MAX_OUTER_RADIUS: f64 = 1e14;

impl ContourSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.angle > FRAC_PI_2 && self.angle < PI) {
            return Err(FkError::InvalidParameter(format!(
                "contour angle {} not in (π/2, π)",
                self.angle
            )));
        }
        if !(self.inner_radius > 0.0 && self.outer_radius > self.inner_radius) {
            return Err(FkError::InvalidParameter("need 0 < inner radius < outer radius".into()));
        }
        if !(self.panel_width > 0.0) || self.order < 2 || self.arc_panels == 0 {
            return Err(FkError::InvalidParameter("bad quadrature resolution".into()));
        }
        Ok(())
    }

    /// Smallest power-of-ten multiple of the current outer radius where `|h|`
    /// on both rays drops below the tail tolerance.
    pub fn truncated_for(mut self, h: &impl Fn(Complex64) -> Complex64) -> Result<Self> {
        loop {
            let tail = [1.0, -1.0]
                .iter()
                .map(|sgn| h(Complex64::from_polar(self.outer_radius, sgn * self.angle)).norm())
                .fold(0.0, f64::max);
            if tail <= TAIL_TOLERANCE {
                return Ok(self);
            }
            if self.outer_radius >= MAX_OUTER_RADIUS {
                return Err(FkError::NonConvergentQuadrature(tail));
            }
            self.outer_radius *= 10.0;
        }
    }

    /// Quadrature points `λ_j` and weights `w_j` with `∫_Γ g dλ ≈ Σ w_j g(λ_j)`.
    pub fn nodes(&self) -> Result<Vec<(Complex64, Complex64)>> {
        self.validate()?;
        let (x, w) = gauss_legendre(self.order);
        let mut out = Vec::new();
        let (lo, hi) = (self.inner_radius.ln(), self.outer_radius.ln());
        let panels = ((hi - lo) / self.panel_width).ceil().max(1.0) as usize;
        let width = (hi - lo) / panels as f64;
        let up = Complex64::from_polar(1.0, self.angle);
        let down = up.conj();
        for p in 0..panels {
            let a = lo + p as f64 * width;
            for (xi, wi) in x.iter().zip(&w) {
                let r = (a + 0.5 * width * (xi + 1.0)).exp();
                let jac = 0.5 * width * wi * r;
                // Incoming lower ray is traversed toward the origin.
                out.push((down * r, -down * jac));
                out.push((up * r, up * jac));
            }
        }
        let arc = 2.0 * self.angle / self.arc_panels as f64;
        for p in 0..self.arc_panels {
            let a = -self.angle + p as f64 * arc;
            for (xi, wi) in x.iter().zip(&w) {
                let lam = Complex64::from_polar(self.inner_radius, a + 0.5 * arc * (xi + 1.0));
                out.push((lam, Complex64::i() * lam * (0.5 * arc * wi)));
            }
        }
        Ok(out)
    }
}

/// `h(A)u0 = (2πi)⁻¹ ∫_Γ h(λ)(λ - A)⁻¹u0 dλ`; returns the real part and the
/// largest imaginary residue.
pub fn functional_calculus(
    theta0: f64,
    h: impl Fn(Complex64) -> Complex64,
    contour: &ContourSpec,
    u0: &GridFunction,
) -> Result<(GridFunction, f64)> {
    let contour = contour.clone().truncated_for(&h)?;
    let f = u0.to_complex();
    let grid = u0.grid();
    let mut acc = vec![Complex64::new(0.0, 0.0); grid.len()];
    for (lam, w) in contour.nodes()? {
        let coef = h(lam) * w;
        if coef.norm() == 0.0 {
            continue;
        }
        let sol = resolve(theta0, SectorPoint::new(lam)?, &f)?;
        for (a, v) in acc.iter_mut().zip(sol.u.values()) {
            *a += coef * v;
        }
    }
    let scale = Complex64::new(0.0, 2.0 * PI);
    let out: Vec<Complex64> = acc.into_iter().map(|a| a / scale).collect();
    let result = GridFunction::new(grid, out)?;
    if !result.is_finite() {
        return Err(FkError::NonFinite("contour quadrature"));
    }
    Ok((result.re(), result.max_imag()))
}

/// `e^{tA}u0` through the contour integral.
pub fn semigroup_contour(theta0: f64, t: f64, u0: &GridFunction) -> Result<GridFunction> {
    if !(t > 0.0) {
        return if t == 0.0 {
            Ok(u0.clone())
        } else {
            Err(FkError::InvalidParameter(format!("negative time {t}")))
        };
    }
    Ok(functional_calculus(theta0, |l| (l * t).exp(), &ContourSpec::default(), u0)?.0)
}

/// Relative L² distance `‖a - b‖ / ‖b‖`.
pub fn relative_l2(a: &GridFunction, b: &GridFunction) -> f64 {
    let nb = l2_norm(b);
    let d = l2_norm(&a.sub(b));
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}
