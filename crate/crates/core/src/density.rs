//! Transition densities of the example diffusions, two-sided Gaussian
//! (Aronson-type) bound checks and the `L^q` domination integral.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Vector};
use crate::quadrature::{integrate_box, romberg, Integral};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Constants of the sandwich
/// `rho1 (s-t0)^{-m/2} exp(-Lambda |x-x0|^2/(s-t0)) <= p <= rho2 (s-t0)^{-m/2} exp(-lambda |x-x0|^2/(s-t0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AronsonParams {
    pub rho1: f64,
    pub rho2: f64,
    pub lambda_small: f64,
    pub lambda_big: f64,
    pub dim: usize,
}

impl AronsonParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.rho1, self.rho2, self.lambda_small, self.lambda_big]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !pos || self.dim == 0 {
            return Err(Error::Config("Aronson constants must be positive and dim >= 1".into()));
        }
        if self.rho1 > self.rho2 || self.lambda_small > self.lambda_big {
            return Err(Error::Config("Aronson constants need rho1 <= rho2 and lambda <= Lambda".into()));
        }
        Ok(())
    }

    /// Constants that coincide with the `m`-dimensional standard Gaussian kernel.
    pub fn tight_standard_gaussian(dim: usize) -> Self {
        let pre = TWO_PI.powf(-(dim as f64) / 2.0);
        AronsonParams {
            rho1: pre,
            rho2: pre,
            lambda_small: 0.5,
            lambda_big: 0.5,
            dim,
        }
    }

    fn bound(&self, pre: f64, rate: f64, tau: f64, r2: f64) -> f64 {
        pre * tau.powf(-(self.dim as f64) / 2.0) * (-rate * r2 / tau).exp()
    }

    pub fn lower(&self, tau: f64, r2: f64) -> f64 {
        self.bound(self.rho1, self.lambda_big, tau, r2)
    }

    pub fn upper(&self, tau: f64, r2: f64) -> f64 {
        self.bound(self.rho2, self.lambda_small, tau, r2)
    }
}

/// Density at `x` of `x0 + sigma (B_s - B_t0)`, i.e. Gaussian with covariance
/// `sigma sigma^T (s - t0)`; `sigma` is row-major `m x m`.
pub fn gaussian_density(t0: f64, x0: &[f64], s: f64, x: &[f64], sigma: &[f64]) -> Result<f64> {
    let m = x0.len();
    if !(s > t0) {
        return Err(Error::Domain(format!("density needs s > t0, got s = {s}, t0 = {t0}")));
    }
    if x.len() != m || sigma.len() != m * m {
        return Err(Error::Domain("dimension mismatch in gaussian_density".into()));
    }
    let tau = s - t0;
    let d: Vector = x.iter().zip(x0).map(|(a, b)| a - b).collect();
    if m == 1 {
        let var = sigma[0] * sigma[0] * tau;
        if !(var > 0.0) {
            return Err(Error::Domain("degenerate diffusion coefficient".into()));
        }
        return Ok((TWO_PI * var).powf(-0.5) * (-0.5 * d[0] * d[0] / var).exp());
    }
    let sig = nalgebra::DMatrix::from_row_slice(m, m, sigma);
    let cov = &sig * sig.transpose() * tau;
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("covariance sigma sigma^T is not positive definite".into()))?;
    let det: f64 = chol.l().diagonal().iter().map(|v| v * v).product();
    let sol = chol.solve(&nalgebra::DVector::from_column_slice(&d));
    let quad = linalg::dot(&d, sol.as_slice());
    Ok((TWO_PI.powi(m as i32) * det).powf(-0.5) * (-0.5 * quad).exp())
}

/// `(2 pi (s-t))^{-1/2} exp(-[ln(y/x) + (s-t)/2]^2 / (2 (s-t)))` for `y > 0`, else 0.
///
/// This is the Gaussian density of `ln X_s` written in the variable `y`; it
/// carries no `1/y` factor and integrates to `x` over `y > 0`. See
/// [`lognormal_density_jacobian`] for the density of `X_s` itself.
pub fn lognormal_density(t: f64, x: f64, s: f64, y: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("lognormal density needs x > 0, got {x}")));
    }
    if !(s > t) {
        return Err(Error::Domain(format!("density needs s > t, got s = {s}, t = {t}")));
    }
    if !(y > 0.0) {
        return Ok(0.0);
    }
    let tau = s - t;
    let e = (y / x).ln() + 0.5 * tau;
    Ok((TWO_PI * tau).powf(-0.5) * (-e * e / (2.0 * tau)).exp())
}

/// Density of `X_s = x exp(B_s - B_t - (s-t)/2)`: [`lognormal_density`] divided by `y`.
pub fn lognormal_density_jacobian(t: f64, x: f64, s: f64, y: f64) -> Result<f64> {
    let p = lognormal_density(t, x, s, y)?;
    Ok(if y > 0.0 { p / y } else { 0.0 })
}

/// Total mass of both lognormal variants over `y > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LognormalMassReport {
    pub t: f64,
    pub x: f64,
    pub s: f64,
    pub printed_mass: f64,
    pub jacobian_mass: f64,
    /// Which variant has unit mass within 1e-4: `"printed"`, `"jacobian"`,
    /// `"both"` or `"neither"`.
    pub unit_mass: String,
}

/// Integrates both variants in `w = ln y` over `ln x - tau/2 +- 12 sqrt(tau)`.
pub fn lognormal_mass_report(t: f64, x: f64, s: f64) -> Result<LognormalMassReport> {
    lognormal_density(t, x, s, 1.0)?;
    let tau = s - t;
    let c = x.ln() - 0.5 * tau;
    let w = 12.0 * tau.sqrt();
    let mass = |jac: bool| {
        romberg(
            |w: f64| {
                let y = w.exp();
                let p = if jac {
                    lognormal_density_jacobian(t, x, s, y)
                } else {
                    lognormal_density(t, x, s, y)
                };
                p.unwrap_or(0.0) * y
            },
            c - w,
            c + w,
            1e-12,
            22,
        )
        .value
    };
    let (printed_mass, jacobian_mass) = (mass(false), mass(true));
    let unit = |v: f64| (v - 1.0).abs() <= 1e-4;
    let unit_mass = match (unit(printed_mass), unit(jacobian_mass)) {
        (true, true) => "both",
        (true, false) => "printed",
        (false, true) => "jacobian",
        (false, false) => "neither",
    };
    Ok(LognormalMassReport {
        t,
        x,
        s,
        printed_mass,
        jacobian_mass,
        unit_mass: unit_mass.into(),
    })
}

/// One grid point of an Aronson check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AronsonRow {
    pub s: f64,
    pub x: Vector,
    pub density: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_violation: f64,
    pub upper_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AronsonReport {
    pub params: AronsonParams,
    pub max_lower_violation: f64,
    pub max_upper_violation: f64,
    pub rows: Vec<AronsonRow>,
    pub pass: bool,
}

/// Tolerance on both violations.
pub const ARONSON_TOL: f64 = 1e-12;

/// Tensor grid of `s in [s_lo, s_hi]` (`n_s` points) and `x0 + d` with
/// `d in [-radius, radius]^m` (`n_x` points per axis), restricted to `|d| <= radius`.
pub fn aronson_grid(x0: &[f64], s_lo: f64, s_hi: f64, n_s: usize, radius: f64, n_x: usize) -> Vec<(f64, Vector)> {
    let m = x0.len();
    let axis = |n: usize, lo: f64, hi: f64, i: usize| {
        if n <= 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::new();
    for is in 0..n_s.max(1) {
        let s = axis(n_s, s_lo, s_hi, is);
        for flat in 0..n_x.max(1).pow(m as u32) {
            let mut rem = flat;
            let d: Vector = (0..m)
                .map(|_| {
                    let i = rem % n_x.max(1);
                    rem /= n_x.max(1);
                    axis(n_x, -radius, radius, i)
                })
                .collect();
            if linalg::norm(&d) <= radius * (1.0 + 1e-12) {
                out.push((s, d.iter().zip(x0).map(|(a, b)| a + b).collect()));
            }
        }
    }
    out
}

/// Maximum violation of the two-sided bound over `grid` (`(s, x)` pairs with
/// `s > t0`); pass iff both maxima are `<= 1e-12`.
pub fn check_aronson<D>(params: AronsonParams, density: D, t0: f64, x0: &[f64], grid: &[(f64, Vector)]) -> Result<AronsonReport>
where
    D: Fn(f64, &[f64]) -> Result<f64>,
{
    params.validate()?;
    if x0.len() != params.dim {
        return Err(Error::Domain("x0 dimension differs from the Aronson dimension".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (s, x) in grid {
        let tau = s - t0;
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("grid point s = {s} is not after t0 = {t0}")));
        }
        let r2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
        let p = density(*s, x)?;
        let (lower, upper) = (params.lower(tau, r2), params.upper(tau, r2));
        rows.push(AronsonRow {
            s: *s,
            x: x.clone(),
            density: p,
            lower,
            upper,
            lower_violation: (lower - p).max(0.0),
            upper_violation: (p - upper).max(0.0),
        });
    }
    let max_lower_violation = rows.iter().map(|r| r.lower_violation).fold(0.0, f64::max);
    let max_upper_violation = rows.iter().map(|r| r.upper_violation).fold(0.0, f64::max);
    Ok(AronsonReport {
        params,
        max_lower_violation,
        max_upper_violation,
        rows,
        pass: max_lower_violation <= ARONSON_TOL && max_upper_violation <= ARONSON_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub q: f64,
    pub integral: Integral,
    pub relative_change: f64,
    /// Finite and within 1% of the next-coarser quadrature.
    pub pass: bool,
}

/// Relative refinement stability required by [`domination_check`].
pub const DOMINATION_STABILITY: f64 = 0.01;

/// `int_{t1+delta}^{T} int_box (num/den)^q den dx ds` by tensor trapezoid
/// rules with Richardson extrapolation (`2^level` intervals per axis). Pass
/// iff the value is finite and changes by at most 1% against one level
/// coarser.
#[allow(clippy::too_many_arguments)]
pub fn domination_check<N, D>(
    num: N,
    den: D,
    t1: f64,
    delta: f64,
    horizon: f64,
    lo: &[f64],
    hi: &[f64],
    q: f64,
    level: u32,
) -> Result<DominationReport>
where
    N: Fn(f64, &[f64]) -> Result<f64>,
    D: Fn(f64, &[f64]) -> Result<f64>,
{
    if !(delta > 0.0 && t1 + delta <= horizon) {
        return Err(Error::Config(format!("delta must lie in (0, T - t1], got {delta}")));
    }
    if !(q > 1.0) {
        return Err(Error::Config(format!("q must be > 1, got {q}")));
    }
    if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(Error::Config("integration box needs lo < hi per axis".into()));
    }
    let mut box_lo = vec![t1 + delta];
    box_lo.extend_from_slice(lo);
    let mut box_hi = vec![horizon];
    box_hi.extend_from_slice(hi);

    let failure: std::cell::RefCell<Option<Error>> = std::cell::RefCell::new(None);
    let integrand = |p: &[f64]| -> f64 {
        let (s, x) = (p[0], &p[1..]);
        let eval = || -> Result<f64> {
            let d = den(s, x)?;
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::DensityRatio(format!(
                    "denominator density is {d} at s = {s}, x = {x:?}"
                )));
            }
            let n = num(s, x)?;
            Ok((n / d).powf(q) * d)
        };
        match eval() {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let integral = integrate_box(integrand, &box_lo, &box_hi, level.max(2));
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let relative_change = integral.relative_change();
    Ok(DominationReport {
        q,
        integral,
        relative_change,
        pass: integral.value.is_finite() && relative_change <= DOMINATION_STABILITY,
    })
}
