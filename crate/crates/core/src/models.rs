//! Parametric mean-model families, per-bin expected counts and derivatives,
//! contiguous-alternative directions, and Poisson sampling.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::grid::{BinnedCounts, Grid};
use crate::numeric::integrate_splits;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506628274631000502415765284811;

fn normal_cdf(u: f64) -> f64 {
    0.5 * (1.0 + erf(u / SQRT_2))
}

fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / SQRT_2PI
}

/// The shape of the density family; fixed structural constants (breakpoints,
/// a pinned variance) live here, estimated parameters in `MeanModel::beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Constant,
    /// `lambda(x) ∝ 1 + slope (x - mid)`; beta = [slope].
    Linear,
    /// Linear up to the breakpoint, constant after, continuous; beta = [slope].
    PiecewiseLinear { breakpoint: f64 },
    /// `lambda(x) ∝ exp(-rate x)`; beta = [rate > 0].
    TruncatedExponential,
    /// Normal with mean beta[0]; `variance` pins sigma^2, otherwise beta = [mean, var].
    TruncatedNormal { variance: Option<f64> },
    /// `lambda(x) ∝ x^{-slope}` on a positive domain; beta = [slope].
    PowerLaw,
    /// Two power-law slopes joined continuously at the cutpoint; beta = [s1, s2].
    BrokenPowerLaw { cutpoint: f64 },
}

impl Family {
    pub fn n_beta(&self) -> usize {
        match self {
            Family::Constant => 0,
            Family::Linear
            | Family::PiecewiseLinear { .. }
            | Family::TruncatedExponential
            | Family::PowerLaw => 1,
            Family::TruncatedNormal { variance } => {
                if variance.is_some() {
                    1
                } else {
                    2
                }
            }
            Family::BrokenPowerLaw { .. } => 2,
        }
    }

    /// Interior points where the density or its derivatives have kinks.
    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Family::PiecewiseLinear { breakpoint } => vec![*breakpoint],
            Family::BrokenPowerLaw { cutpoint } => vec![*cutpoint],
            _ => vec![],
        }
    }
}

/// A mean model: density family, theta = (c, beta) and the domain.
///
/// Per-bin means are `m_k = c K * Lambda_beta(bin_k)`, so the expected total
/// count is `T = c K` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanModel {
    pub family: Family,
    pub c: f64,
    pub beta: Vec<f64>,
    pub domain: (f64, f64),
}

impl MeanModel {
    pub fn new(family: Family, c: f64, beta: Vec<f64>, domain: (f64, f64)) -> Result<Self> {
        let model = MeanModel { family, c, beta, domain };
        model.validate()?;
        model.check_normalization()?;
        Ok(model)
    }

    /// Quadrature cross-check that the density integrates to one; the
    /// density and the antiderivative are coded independently per family.
    fn check_normalization(&self) -> Result<()> {
        let (lo, hi) = self.domain;
        let total = integrate_splits(&|x| self.density(x), lo, hi, &self.breakpoints());
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Numeric(format!(
                "density normalization off by {:.2e}",
                (total - 1.0).abs()
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.domain;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Validation(format!("invalid domain [{lo}, {hi}]")));
        }
        if !(self.c > 0.0) {
            return Err(Error::Validation(format!("c must be positive, got {}", self.c)));
        }
        if self.beta.len() != self.family.n_beta() {
            return Err(Error::Validation(format!(
                "family {:?} expects {} shape parameters, got {}",
                self.family,
                self.family.n_beta(),
                self.beta.len()
            )));
        }
        match &self.family {
            Family::Linear => {
                let s = self.beta[0];
                if s.abs() * 0.5 * (hi - lo) >= 1.0 {
                    return Err(Error::Validation(format!(
                        "linear slope {s} drives the density nonpositive on [{lo}, {hi}]"
                    )));
                }
            }
            Family::PiecewiseLinear { breakpoint } => {
                if !(*breakpoint > lo && *breakpoint < hi) {
                    return Err(Error::Validation(
                        "piecewise-linear breakpoint must lie inside the domain".into(),
                    ));
                }
                if 1.0 + self.beta[0] * (lo - breakpoint) <= 0.0 {
                    return Err(Error::Validation(format!(
                        "piecewise-linear slope {} drives the density nonpositive",
                        self.beta[0]
                    )));
                }
            }
            Family::TruncatedExponential => {
                if !(self.beta[0] > 0.0) {
                    return Err(Error::Validation(format!(
                        "exponential rate must be positive, got {}",
                        self.beta[0]
                    )));
                }
            }
            Family::TruncatedNormal { variance } => {
                let var = variance.unwrap_or_else(|| self.beta[1]);
                if !(var > 0.0) {
                    return Err(Error::Validation(format!(
                        "normal variance must be positive, got {var}"
                    )));
                }
            }
            Family::PowerLaw | Family::BrokenPowerLaw { .. } => {
                if lo <= 0.0 {
                    return Err(Error::Validation(
                        "power-law domain must be strictly positive".into(),
                    ));
                }
                if let Family::BrokenPowerLaw { cutpoint } = &self.family {
                    if !(*cutpoint > lo && *cutpoint < hi) {
                        return Err(Error::Validation(
                            "broken power-law cutpoint must lie inside the domain".into(),
                        ));
                    }
                }
            }
            Family::Constant => {}
        }
        Ok(())
    }

    /// Number of estimated parameters p = 1 + |beta|.
    pub fn p(&self) -> usize {
        1 + self.beta.len()
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = vec![self.c];
        t.extend_from_slice(&self.beta);
        t
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.p() {
            return Err(Error::Validation(format!(
                "theta length {} does not match p = {}",
                theta.len(),
                self.p()
            )));
        }
        let model = MeanModel {
            family: self.family.clone(),
            c: theta[0],
            beta: theta[1..].to_vec(),
            domain: self.domain,
        };
        model.validate()?;
        Ok(model)
    }

    /// True if `theta` lies in the admissible region (without building a model).
    pub fn admissible(&self, theta: &[f64]) -> bool {
        self.with_theta(theta).is_ok()
    }

    fn sigma2(&self) -> f64 {
        match &self.family {
            Family::TruncatedNormal { variance } => variance.unwrap_or_else(|| self.beta[1]),
            _ => unreachable!("sigma2 is only defined for the normal family"),
        }
    }

    /// Normalized density `lambda_beta(x)` on the domain.
    pub fn density(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain;
        match &self.family {
            Family::Constant => 1.0 / (hi - lo),
            Family::Linear => {
                let mid = 0.5 * (lo + hi);
                (1.0 + self.beta[0] * (x - mid)) / (hi - lo)
            }
            Family::PiecewiseLinear { breakpoint } => {
                let s = self.beta[0];
                let f = if x <= *breakpoint { 1.0 + s * (x - breakpoint) } else { 1.0 };
                f / self.pwl_z()
            }
            Family::TruncatedExponential => {
                let b = self.beta[0];
                b * (-b * x).exp() / ((-b * lo).exp() - (-b * hi).exp())
            }
            Family::TruncatedNormal { .. } => {
                let mu = self.beta[0];
                let s = self.sigma2().sqrt();
                let z = normal_cdf((hi - mu) / s) - normal_cdf((lo - mu) / s);
                normal_pdf((x - mu) / s) / (s * z)
            }
            Family::PowerLaw => {
                let b = self.beta[0];
                x.powf(-b) / powlaw_z(b, lo, hi)
            }
            Family::BrokenPowerLaw { cutpoint } => {
                let (b1, b2) = (self.beta[0], self.beta[1]);
                let f = if x <= *cutpoint {
                    x.powf(-b1)
                } else {
                    cutpoint.powf(b2 - b1) * x.powf(-b2)
                };
                f / self.bpl_z()
            }
        }
    }

    fn pwl_z(&self) -> f64 {
        let (lo, hi) = self.domain;
        let Family::PiecewiseLinear { breakpoint } = &self.family else { unreachable!() };
        let s = self.beta[0];
        (breakpoint - lo) - 0.5 * s * (breakpoint - lo).powi(2) + (hi - breakpoint)
    }

    fn bpl_z(&self) -> f64 {
        let (lo, hi) = self.domain;
        let Family::BrokenPowerLaw { cutpoint } = &self.family else { unreachable!() };
        let (b1, b2) = (self.beta[0], self.beta[1]);
        powlaw_z(b1, lo, *cutpoint) + cutpoint.powf(b2 - b1) * powlaw_z(b2, *cutpoint, hi)
    }

    /// Unnormalized antiderivative `G(x)` of the family shape; interval
    /// masses are `(G(b) - G(a)) / (G(hi) - G(lo))`.
    fn unnorm_cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain;
        match &self.family {
            Family::Constant => x,
            Family::Linear => {
                let mid = 0.5 * (lo + hi);
                x + 0.5 * self.beta[0] * (x - mid).powi(2)
            }
            Family::PiecewiseLinear { breakpoint } => {
                if x <= *breakpoint {
                    x + 0.5 * self.beta[0] * (x - breakpoint).powi(2)
                } else {
                    x
                }
            }
            Family::TruncatedExponential => {
                let r = self.beta[0];
                -(-r * x).exp() / r
            }
            Family::TruncatedNormal { .. } => {
                let s = self.sigma2().sqrt();
                normal_cdf((x - self.beta[0]) / s)
            }
            Family::PowerLaw => powlaw_z(self.beta[0], lo, x.max(lo)),
            Family::BrokenPowerLaw { cutpoint } => {
                let (b1, b2) = (self.beta[0], self.beta[1]);
                if x <= *cutpoint {
                    powlaw_z(b1, lo, x.max(lo))
                } else {
                    powlaw_z(b1, lo, *cutpoint)
                        + cutpoint.powf(b2 - b1) * powlaw_z(b2, *cutpoint, x)
                }
            }
        }
    }

    /// `dG(x)/dbeta_j` matching `unnorm_cdf`, one entry per shape parameter.
    fn unnorm_cdf_dbeta(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.domain;
        match &self.family {
            Family::Constant => vec![],
            Family::Linear => {
                let mid = 0.5 * (lo + hi);
                vec![0.5 * (x - mid).powi(2)]
            }
            Family::PiecewiseLinear { breakpoint } => {
                let v = x.min(*breakpoint);
                vec![0.5 * (v - breakpoint).powi(2)]
            }
            Family::TruncatedExponential => {
                let r = self.beta[0];
                // d/dr [-exp(-r x)/r] = exp(-r x) (r x + 1) / r^2
                vec![(-r * x).exp() * (r * x + 1.0) / (r * r)]
            }
            Family::TruncatedNormal { variance } => {
                let mu = self.beta[0];
                let s2 = self.sigma2();
                let s = s2.sqrt();
                let u = (x - mu) / s;
                let mut out = vec![-normal_pdf(u) / s];
                if variance.is_none() {
                    out.push(-u * normal_pdf(u) / (2.0 * s2));
                }
                out
            }
            Family::PowerLaw => vec![powlaw_z_dbeta(self.beta[0], lo, x.max(lo))],
            Family::BrokenPowerLaw { cutpoint } => {
                let xi = *cutpoint;
                let (b1, b2) = (self.beta[0], self.beta[1]);
                let fac = xi.powf(b2 - b1);
                if x <= xi {
                    vec![powlaw_z_dbeta(b1, lo, x.max(lo)), 0.0]
                } else {
                    let upper = powlaw_z(b2, xi, x);
                    vec![
                        powlaw_z_dbeta(b1, lo, xi) - xi.ln() * fac * upper,
                        xi.ln() * fac * upper + fac * powlaw_z_dbeta(b2, xi, x),
                    ]
                }
            }
        }
    }

    /// `Lambda_beta((a, b])`, the normalized mass of an interval.
    pub fn mass(&self, a: f64, b: f64) -> Result<f64> {
        let (lo, hi) = self.domain;
        if a < lo - 1e-12 || b > hi + 1e-12 || b < a {
            return Err(Error::Domain(format!(
                "interval [{a}, {b}] outside model domain [{lo}, {hi}]"
            )));
        }
        let z = self.unnorm_cdf(hi) - self.unnorm_cdf(lo);
        Ok((self.unnorm_cdf(b) - self.unnorm_cdf(a)) / z)
    }

    /// `d/dbeta ln lambda_beta(x)`, one entry per shape parameter.
    pub fn dlog_density_dbeta(&self, x: f64) -> Vec<f64> {
        let (lo, hi) = self.domain;
        match &self.family {
            Family::Constant => vec![],
            Family::Linear => {
                let mid = 0.5 * (lo + hi);
                vec![(x - mid) / (1.0 + self.beta[0] * (x - mid))]
            }
            Family::PiecewiseLinear { breakpoint } => {
                let s = self.beta[0];
                let f = if x <= *breakpoint { 1.0 + s * (x - breakpoint) } else { 1.0 };
                let df = if x <= *breakpoint { x - breakpoint } else { 0.0 };
                let dz = -0.5 * (breakpoint - lo).powi(2);
                vec![df / f - dz / self.pwl_z()]
            }
            Family::TruncatedExponential => {
                let r = self.beta[0];
                let g = |u: f64| (-r * u).exp();
                let z = g(lo) - g(hi);
                let zd = -lo * g(lo) + hi * g(hi);
                vec![1.0 / r - x - zd / z]
            }
            Family::TruncatedNormal { variance } => {
                let mu = self.beta[0];
                let s2 = self.sigma2();
                let s = s2.sqrt();
                let u = |y: f64| (y - mu) / s;
                let z = normal_cdf(u(hi)) - normal_cdf(u(lo));
                let dz_mu = (-normal_pdf(u(hi)) + normal_pdf(u(lo))) / s;
                let mut out = vec![(x - mu) / s2 - dz_mu / z];
                if variance.is_none() {
                    let dz_v = (-u(hi) * normal_pdf(u(hi)) + u(lo) * normal_pdf(u(lo)))
                        / (2.0 * s2);
                    out.push(((x - mu).powi(2) / s2 - 1.0) / (2.0 * s2) - dz_v / z);
                }
                out
            }
            Family::PowerLaw => {
                let b = self.beta[0];
                vec![-x.ln() - powlaw_z_dbeta(b, lo, hi) / powlaw_z(b, lo, hi)]
            }
            Family::BrokenPowerLaw { cutpoint } => {
                let xi = *cutpoint;
                let (b1, b2) = (self.beta[0], self.beta[1]);
                let z = self.bpl_z();
                let fac = xi.powf(b2 - b1);
                let z1 = powlaw_z_dbeta(b1, lo, xi) - xi.ln() * fac * powlaw_z(b2, xi, hi);
                let z2 = xi.ln() * fac * powlaw_z(b2, xi, hi) + fac * powlaw_z_dbeta(b2, xi, hi);
                if x <= xi {
                    vec![-x.ln() - z1 / z, -z2 / z]
                } else {
                    vec![-xi.ln() - z1 / z, xi.ln() - x.ln() - z2 / z]
                }
            }
        }
    }

    /// Interior kink locations, used to split quadrature panels.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.family.breakpoints()
    }

    /// Integrate `f` against `Lambda_beta` over the domain.
    pub fn integrate_lambda<F: Fn(f64) -> f64>(&self, f: F, extra_splits: &[f64]) -> f64 {
        let (lo, hi) = self.domain;
        let mut splits = self.breakpoints();
        splits.extend_from_slice(extra_splits);
        integrate_splits(&|x| f(x) * self.density(x), lo, hi, &splits)
    }
}

fn powlaw_z(b: f64, a: f64, c: f64) -> f64 {
    // int_a^c x^{-b} dx
    if (1.0 - b).abs() < 1e-8 {
        // series around b = 1 for stability
        let e = 1.0 - b;
        let (la, lc) = (a.ln(), c.ln());
        (lc - la) + 0.5 * e * (lc * lc - la * la) + e * e * (lc.powi(3) - la.powi(3)) / 6.0
    } else {
        (c.powf(1.0 - b) - a.powf(1.0 - b)) / (1.0 - b)
    }
}

fn powlaw_z_dbeta(b: f64, a: f64, c: f64) -> f64 {
    // d/db int_a^c x^{-b} dx = -int_a^c ln(x) x^{-b} dx
    let (la, lc) = (a.ln(), c.ln());
    if (1.0 - b).abs() < 1e-8 {
        let e = 1.0 - b;
        -(0.5 * (lc * lc - la * la) + e * (lc.powi(3) - la.powi(3)) / 3.0)
    } else {
        let e = 1.0 - b;
        // antiderivative of ln(x) x^{e-1} is x^e (e ln x - 1) / e^2
        let term = |x: f64, lx: f64| x.powf(e) * (e * lx - 1.0) / (e * e);
        -(term(c, lc) - term(a, la))
    }
}

/// Expected counts `m_k = c K Lambda_beta(bin_k)` on the grid.
pub fn bin_means(model: &MeanModel, grid: &Grid) -> Result<Vec<f64>> {
    let (lo, hi) = model.domain;
    if grid.lo() < lo - 1e-9 || grid.hi() > hi + 1e-9 {
        return Err(Error::Validation(format!(
            "grid [{}, {}] outside model domain [{lo}, {hi}]",
            grid.lo(),
            grid.hi()
        )));
    }
    let t = model.c * grid.k() as f64;
    let z = model.unnorm_cdf(hi) - model.unnorm_cdf(lo);
    let mut means = Vec::with_capacity(grid.k());
    let mut prev = model.unnorm_cdf(grid.lo().max(lo));
    for i in 0..grid.k() {
        let (_, b) = grid.edges(i);
        let cur = model.unnorm_cdf(b.min(hi));
        let m = t * (cur - prev) / z;
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Validation(format!(
                "bin {i} has nonpositive mean {m}"
            )));
        }
        means.push(m);
        prev = cur;
    }
    Ok(means)
}

/// Per-bin derivative vectors `dm_k/dtheta` (length p each).
pub fn dm_dtheta(model: &MeanModel, grid: &Grid) -> Result<Vec<Vec<f64>>> {
    let (lo, hi) = model.domain;
    let kf = grid.k() as f64;
    let t = model.c * kf;
    let z = model.unnorm_cdf(hi) - model.unnorm_cdf(lo);
    let zd: Vec<f64> = {
        let dhi = model.unnorm_cdf_dbeta(hi);
        let dlo = model.unnorm_cdf_dbeta(lo);
        dhi.iter().zip(&dlo).map(|(a, b)| a - b).collect()
    };
    let nb = zd.len();
    let mut out = Vec::with_capacity(grid.k());
    let mut prev = model.unnorm_cdf(grid.lo().max(lo));
    let mut prev_d = model.unnorm_cdf_dbeta(grid.lo().max(lo));
    for i in 0..grid.k() {
        let (_, b) = grid.edges(i);
        let edge = b.min(hi);
        let cur = model.unnorm_cdf(edge);
        let cur_d = model.unnorm_cdf_dbeta(edge);
        let mass = (cur - prev) / z;
        let mut row = Vec::with_capacity(model.p());
        // dm/dc = m / c since m = c K * mass
        row.push(kf * mass);
        for j in 0..nb {
            row.push(t * ((cur_d[j] - prev_d[j]) / z - mass * zd[j] / z));
        }
        out.push(row);
        prev = cur;
        prev_d = cur_d;
    }
    Ok(out)
}

/// Independent Poisson draws per bin; deterministic given the RNG stream.
pub fn sample_counts<R: Rng + ?Sized>(means: &[f64], rng: &mut R) -> BinnedCounts {
    let counts = means
        .iter()
        .map(|&m| {
            if m < 1e-12 {
                0
            } else {
                Poisson::new(m).expect("positive mean").sample(rng) as u64
            }
        })
        .collect();
    BinnedCounts(counts)
}

/// A contiguous-alternative direction `h` with its scaling `T`.
#[derive(Clone)]
pub struct AltSpec {
    h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Expected total count scaling the perturbation; defaults to c K.
    pub t_scale: Option<f64>,
    /// Signal-strength multiplier on `h` (eta_T relative scale), default 1.
    pub strength: f64,
    /// Kinks of `h`, for quadrature splitting.
    splits: Vec<f64>,
    pub label: String,
}

impl AltSpec {
    pub fn new(
        h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        t_scale: Option<f64>,
        label: impl Into<String>,
    ) -> Self {
        AltSpec { h, t_scale, strength: 1.0, splits: vec![], label: label.into() }
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength = strength;
        self
    }

    pub fn with_override_t(mut self, t_scale: Option<f64>) -> Self {
        if t_scale.is_some() {
            self.t_scale = t_scale;
        }
        self
    }

    pub fn with_splits(mut self, splits: Vec<f64>) -> Self {
        self.splits = splits;
        self
    }

    pub fn h(&self, x: f64) -> f64 {
        self.strength * (self.h)(x)
    }

    /// The zero direction (null itself).
    pub fn null() -> Self {
        AltSpec::new(Arc::new(|_| 0.0), None, "null")
    }

    pub fn effective_t(&self, model: &MeanModel, grid: &Grid) -> f64 {
        self.t_scale.unwrap_or(model.c * grid.k() as f64)
    }

    /// `int h dLambda` and `int h^2 dLambda` under the given model.
    pub fn lambda_moments(&self, model: &MeanModel) -> (f64, f64) {
        let m1 = model.integrate_lambda(|x| self.h(x), &self.splits);
        let m2 = model.integrate_lambda(|x| self.h(x) * self.h(x), &self.splits);
        (m1, m2)
    }

    pub fn splits(&self) -> &[f64] {
        &self.splits
    }
}

/// Direction constructors for the shipped alternative families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionKind {
    /// Log direction of a gamma shape perturbation on the exponential null.
    GammaShape,
    /// Faint Gaussian signal of the given location/width over the null background.
    GaussianBump { x0: f64, sigma: f64 },
    /// Slope change beyond a cutpoint on a power-law null.
    BrokenPowerLaw { cutpoint: f64 },
    /// Variance perturbation of a truncated normal null (fixed-variance model).
    VariancePerturbation,
}

/// Build a unit-norm direction in `L2(Lambda_beta)`; centering constants are
/// recomputed numerically rather than taken from rounded reference values.
pub fn make_direction(kind: &DirectionKind, model: &MeanModel) -> Result<AltSpec> {
    match kind {
        DirectionKind::GammaShape => {
            if !matches!(model.family, Family::TruncatedExponential) {
                return Err(Error::Validation(
                    "gamma_shape direction requires the truncated-exponential family".into(),
                ));
            }
            if model.domain.0 < 0.0 {
                return Err(Error::Validation(
                    "gamma_shape direction needs a nonnegative domain".into(),
                ));
            }
            // h = a ln x + b, centered and unit norm under Lambda_beta
            let i1 = model.integrate_lambda(|x| x.ln(), &[]);
            let i2 = model.integrate_lambda(|x| x.ln() * x.ln(), &[]);
            let var = i2 - i1 * i1;
            if var <= 0.0 {
                return Err(Error::Numeric("degenerate log direction".into()));
            }
            let a = 1.0 / var.sqrt();
            let b = -a * i1;
            Ok(AltSpec::new(
                Arc::new(move |x: f64| a * x.ln() + b),
                None,
                format!("gamma_shape(a={a:.4}, b={b:.4})"),
            ))
        }
        DirectionKind::GaussianBump { x0, sigma } => {
            // exact mixture direction: h = a (lambda_signal / lambda_bg - 1)
            let (lo, hi) = model.domain;
            if !(*sigma > 0.0) || *x0 < lo || *x0 > hi {
                return Err(Error::Validation(
                    "bump location must lie in the domain with positive width".into(),
                ));
            }
            let (x0, sigma) = (*x0, *sigma);
            let zs = normal_cdf((hi - x0) / sigma) - normal_cdf((lo - x0) / sigma);
            let bg = model.clone();
            let ratio = move |x: f64| {
                normal_pdf((x - x0) / sigma) / (sigma * zs) / bg.density(x) - 1.0
            };
            let splits = vec![x0 - 3.0 * sigma, x0, x0 + 3.0 * sigma];
            let n2 = model.integrate_lambda(|x| ratio(x) * ratio(x), &splits);
            let a = 1.0 / n2.sqrt();
            Ok(AltSpec::new(
                Arc::new(move |x: f64| a * ratio(x)),
                None,
                format!("gaussian_bump(a={a:.4})"),
            )
            .with_splits(splits))
        }
        DirectionKind::BrokenPowerLaw { cutpoint } => {
            if !matches!(model.family, Family::PowerLaw) {
                return Err(Error::Validation(
                    "broken_powerlaw direction requires the power-law family".into(),
                ));
            }
            let (lo, hi) = model.domain;
            if !(*cutpoint > lo && *cutpoint < hi) {
                return Err(Error::Validation(
                    "cutpoint must lie inside the domain".into(),
                ));
            }
            let xi = *cutpoint;
            let f = move |x: f64| if x >= xi { xi.ln() - x.ln() } else { 0.0 };
            let j1 = model.integrate_lambda(f, &[xi]);
            let j2 = model.integrate_lambda(|x| f(x) * f(x), &[xi]);
            let var = j2 - j1 * j1;
            let a = 1.0 / var.sqrt();
            let b = -a * j1;
            Ok(AltSpec::new(
                Arc::new(move |x: f64| a * f(x) + b),
                None,
                format!("broken_powerlaw(a={a:.4}, b={b:.4})"),
            )
            .with_splits(vec![xi]))
        }
        DirectionKind::VariancePerturbation => {
            let Family::TruncatedNormal { .. } = model.family else {
                return Err(Error::Validation(
                    "variance_perturbation requires the truncated-normal family".into(),
                ));
            };
            let mu = model.beta[0];
            let s2 = model.sigma2();
            let e2 = model.integrate_lambda(|x| (x - mu).powi(2) / s2, &[]);
            let base = move |x: f64| ((x - mu).powi(2) / s2 - e2) / (2.0 * s2);
            let n2 = model.integrate_lambda(|x| base(x) * base(x), &[]);
            let b = 1.0 / n2.sqrt();
            Ok(AltSpec::new(
                Arc::new(move |x: f64| b * base(x)),
                None,
                format!("variance_perturbation(b={b:.6})"),
            ))
        }
    }
}

/// Perturbed means `m_k (1 + h(x_k) / sqrt(T))`.
pub fn alt_means(model: &MeanModel, alt: &AltSpec, grid: &Grid) -> Result<Vec<f64>> {
    let means = bin_means(model, grid)?;
    let t = alt.effective_t(model, grid);
    let root_t = t.sqrt();
    means
        .iter()
        .zip(grid.centers())
        .map(|(m, x)| {
            let factor = 1.0 + alt.h(*x) / root_t;
            if factor <= 0.0 {
                Err(Error::Validation(format!(
                    "alternative too strong: perturbed mean nonpositive at x = {x}"
                )))
            } else {
                Ok(m * factor)
            }
        })
        .collect()
}

/// Project a direction onto the orthogonal complement of the model tangents:
/// `hhat = h - (mdot/m)^T Gamma^{-1} int (mdot/m) h dLambda`.
pub fn project_hhat(alt: &AltSpec, model: &MeanModel) -> Result<AltSpec> {
    let p = model.p();
    // tangent coordinates w_j(x): 1/c for the c-coordinate, dlog lambda/dbeta else
    let model_cl = model.clone();
    let tangent = move |x: f64| -> Vec<f64> {
        let mut v = Vec::with_capacity(p);
        v.push(1.0 / model_cl.c);
        v.extend(model_cl.dlog_density_dbeta(x));
        v
    };
    let mut gamma = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let t = tangent.clone();
            let v = model.integrate_lambda(move |x| t(x)[i] * t(x)[j], alt.splits());
            gamma[(i, j)] = v;
            gamma[(j, i)] = v;
        }
    }
    let mut rhs = DVector::zeros(p);
    for i in 0..p {
        let t = tangent.clone();
        rhs[i] = model.integrate_lambda(move |x| t(x)[i] * alt.h(x), alt.splits());
    }
    let chol = nalgebra::Cholesky::new(gamma)
        .ok_or_else(|| Error::Rank("tangent Gram matrix Gamma is singular".into()))?;
    let coef = chol.solve(&rhs);
    let alt_h = alt.clone();
    let coefs: Vec<f64> = coef.iter().copied().collect();
    let h = Arc::new(move |x: f64| {
        let t = tangent(x);
        alt_h.h(x) - t.iter().zip(&coefs).map(|(a, b)| a * b).sum::<f64>()
    });
    Ok(AltSpec::new(h, alt.t_scale, format!("{}_hat", alt.label))
        .with_splits(alt.splits().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp_model() -> MeanModel {
        MeanModel::new(Family::TruncatedExponential, 5.0, vec![1.5], (0.0, 1.0)).unwrap()
    }

    #[test]
    fn constant_means_exact() {
        let m = MeanModel::new(Family::Constant, 5.0, vec![], (0.0, 1.0)).unwrap();
        let grid = Grid::new(0.0, 1.0, 100).unwrap();
        let means = bin_means(&m, &grid).unwrap();
        for v in means {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn means_sum_to_ck() {
        let grid = Grid::new(0.0, 1.0, 100).unwrap();
        for model in [
            exp_model(),
            MeanModel::new(Family::TruncatedNormal { variance: Some(0.04) }, 5.0, vec![0.5], (0.0, 1.0))
                .unwrap(),
            MeanModel::new(Family::Linear, 3.0, vec![0.8], (0.0, 1.0)).unwrap(),
            MeanModel::new(Family::PiecewiseLinear { breakpoint: 0.4 }, 3.0, vec![0.7], (0.0, 1.0))
                .unwrap(),
        ] {
            let means = bin_means(&model, &grid).unwrap();
            let total: f64 = means.iter().sum();
            assert!(
                (total - model.c * 100.0).abs() < 1e-8 * total,
                "{:?}: {total}",
                model.family
            );
        }
    }

    #[test]
    fn powerlaw_means_match_quadrature_oracle() {
        let model = MeanModel::new(Family::PowerLaw, 5.0, vec![2.0], (1.0, 2.0)).unwrap();
        let grid = Grid::new(1.0, 2.0, 100).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        // oracle: graded-panel quadrature of the density
        for i in [0, 17, 50, 99] {
            let (a, b) = grid.edges(i);
            let oracle = 500.0 * integrate_splits(&|x| model.density(x), a, b, &[]);
            assert!(
                (means[i] - oracle).abs() < 1e-10 * oracle.max(1.0),
                "bin {i}: {} vs {oracle}",
                means[i]
            );
        }
    }

    #[test]
    fn truncexp_means_match_quadrature_oracle() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 100).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        for i in [0, 33, 99] {
            let (a, b) = grid.edges(i);
            let oracle = 500.0 * integrate_splits(&|x| model.density(x), a, b, &[]);
            assert!((means[i] - oracle).abs() < 1e-10 * oracle.max(1.0));
        }
    }

    #[test]
    fn dm_matches_finite_differences() {
        let grid = Grid::new(0.0, 1.0, 20).unwrap();
        let pgrid = Grid::new(1.0, 2.0, 20).unwrap();
        let cases: Vec<(MeanModel, &Grid)> = vec![
            (exp_model(), &grid),
            (
                MeanModel::new(Family::TruncatedNormal { variance: Some(0.04) }, 5.0, vec![0.5], (0.0, 1.0))
                    .unwrap(),
                &grid,
            ),
            (
                MeanModel::new(Family::TruncatedNormal { variance: None }, 5.0, vec![0.45, 0.05], (0.0, 1.0))
                    .unwrap(),
                &grid,
            ),
            (MeanModel::new(Family::Linear, 3.0, vec![0.6], (0.0, 1.0)).unwrap(), &grid),
            (
                MeanModel::new(Family::PiecewiseLinear { breakpoint: 0.37 }, 3.0, vec![0.9], (0.0, 1.0))
                    .unwrap(),
                &grid,
            ),
            (MeanModel::new(Family::PowerLaw, 5.0, vec![2.0], (1.0, 2.0)).unwrap(), &pgrid),
            (
                MeanModel::new(Family::BrokenPowerLaw { cutpoint: 1.4 }, 5.0, vec![2.0, 2.6], (1.0, 2.0))
                    .unwrap(),
                &pgrid,
            ),
        ];
        for (model, g) in cases {
            let dm = dm_dtheta(&model, g).unwrap();
            let theta = model.theta();
            for j in 0..model.p() {
                let step = 1e-6 * theta[j].abs().max(1.0);
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[j] += step;
                tm[j] -= step;
                let mp = bin_means(&model.with_theta(&tp).unwrap(), g).unwrap();
                let mm = bin_means(&model.with_theta(&tm).unwrap(), g).unwrap();
                for k in 0..g.k() {
                    let fd = (mp[k] - mm[k]) / (2.0 * step);
                    let an = dm[k][j];
                    let scale = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / scale < 1e-5,
                        "{:?} theta[{j}] bin {k}: analytic {an} vs fd {fd}",
                        model.family
                    );
                }
            }
        }
    }

    #[test]
    fn dm_c_coordinate_is_m_over_c() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 30).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        let dm = dm_dtheta(&model, &grid).unwrap();
        for k in 0..30 {
            assert!((dm[k][0] - means[k] / model.c).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_deterministic_and_calibrated() {
        let means = vec![5.0; 10_000];
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = sample_counts(&means, &mut r1);
        let b = sample_counts(&means, &mut r2);
        assert_eq!(a, b);
        let mean = a.total() as f64 / 10_000.0;
        assert!((mean - 5.0).abs() < 4.0 * (5.0f64 / 10_000.0).sqrt());
        // near-zero means yield zero counts
        let zeros = sample_counts(&vec![1e-13; 100], &mut r1);
        assert_eq!(zeros.total(), 0);
    }

    #[test]
    fn alt_means_null_direction_is_identity() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 50).unwrap();
        let base = bin_means(&model, &grid).unwrap();
        let alt = AltSpec::null();
        let perturbed = alt_means(&model, &alt, &grid).unwrap();
        assert_eq!(base, perturbed);
    }

    #[test]
    fn gamma_shape_constants_match_reference() {
        let model = exp_model();
        let alt = make_direction(&DirectionKind::GammaShape, &model).unwrap();
        let (m1, m2) = alt.lambda_moments(&model);
        assert!(m1.abs() < 1e-10, "centering: {m1}");
        assert!((m2 - 1.0).abs() < 1e-8, "norm: {m2}");
        // a ln x + b with the published 2-decimal roundings 0.87 and 1.21
        let a = (alt.h(1.0f64.exp().recip()) - alt.h(1.0)) / -1.0; // h(e^{-1}) - h(1) = -a
        let b = alt.h(1.0);
        assert!((a - 0.87).abs() < 0.005, "a = {a}");
        assert!((b - 1.21).abs() < 0.005, "b = {b}");
    }

    #[test]
    fn gaussian_bump_is_mass_preserving_unit_norm() {
        let model = exp_model();
        let alt = make_direction(
            &DirectionKind::GaussianBump { x0: 0.5, sigma: 0.05 },
            &model,
        )
        .unwrap();
        let (m1, m2) = alt.lambda_moments(&model);
        assert!(m1.abs() < 1e-8, "mass: {m1}");
        assert!((m2 - 1.0).abs() < 1e-8, "norm: {m2}");
        // published rounding a = 0.44: recover from h = a (ratio - 1) far from the bump
        let a = -alt.h(0.02); // ratio ~ 0 there
        assert!((a - 0.44).abs() < 0.005, "a = {a}");
    }

    #[test]
    fn variance_direction_is_orthogonal_already() {
        let model =
            MeanModel::new(Family::TruncatedNormal { variance: Some(0.04) }, 5.0, vec![0.5], (0.0, 1.0))
                .unwrap();
        let alt = make_direction(&DirectionKind::VariancePerturbation, &model).unwrap();
        let (m1, m2) = alt.lambda_moments(&model);
        assert!(m1.abs() < 1e-8);
        assert!((m2 - 1.0).abs() < 1e-8);
        let hhat = project_hhat(&alt, &model).unwrap();
        for x in [0.05, 0.3, 0.5, 0.77, 0.98] {
            assert!((hhat.h(x) - alt.h(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn project_kills_tangent_combinations() {
        let model = exp_model();
        // h = combination of the tangent coordinates 1 and dlog lambda/dbeta
        let m = model.clone();
        let alt = AltSpec::new(
            Arc::new(move |x| 0.7 - 1.3 * m.dlog_density_dbeta(x)[0]),
            None,
            "tangent",
        );
        let hhat = project_hhat(&alt, &model).unwrap();
        for x in [0.1, 0.33, 0.6, 0.92] {
            assert!(hhat.h(x).abs() < 1e-8, "x = {x}: {}", hhat.h(x));
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let model = exp_model();
        let alt = make_direction(&DirectionKind::GammaShape, &model).unwrap();
        let once = project_hhat(&alt, &model).unwrap();
        let twice = project_hhat(&once, &model).unwrap();
        for x in [0.05, 0.2, 0.48, 0.81, 0.99] {
            assert!((once.h(x) - twice.h(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn broken_powerlaw_direction_nearly_tangent() {
        let model = MeanModel::new(Family::PowerLaw, 5.0, vec![2.0], (1.0, 2.0)).unwrap();
        let alt = make_direction(&DirectionKind::BrokenPowerLaw { cutpoint: 1.4 }, &model).unwrap();
        let (m1, m2) = alt.lambda_moments(&model);
        assert!(m1.abs() < 1e-8);
        assert!((m2 - 1.0).abs() < 1e-8);
        let hhat = project_hhat(&alt, &model).unwrap();
        let (_, n2) = hhat.lambda_moments(&model);
        let norm = n2.sqrt();
        // most of the broken power-law deviation is absorbed by estimation
        assert!(norm < 0.5, "||hhat|| = {norm}");
        println!("broken power-law residual direction norm: {norm:.6}");
    }

    #[test]
    fn mass_preservation_of_centered_directions() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 200).unwrap();
        for kind in [
            DirectionKind::GammaShape,
            DirectionKind::GaussianBump { x0: 0.5, sigma: 0.05 },
        ] {
            let alt = make_direction(&kind, &model).unwrap();
            let base: f64 = bin_means(&model, &grid).unwrap().iter().sum();
            let alt_total: f64 = alt_means(&model, &alt, &grid).unwrap().iter().sum();
            assert!(
                (alt_total - base).abs() < 1e-4 * base,
                "{kind:?}: {alt_total} vs {base}"
            );
        }
    }

    #[test]
    fn alternative_too_strong_is_rejected() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 50).unwrap();
        let alt = AltSpec::new(Arc::new(|_| -1.0), Some(0.5), "too strong");
        assert!(alt_means(&model, &alt, &grid).is_err());
    }

    #[test]
    fn linear_slope_rejected_when_nonpositive() {
        assert!(MeanModel::new(Family::Linear, 2.0, vec![2.5], (0.0, 1.0)).is_err());
        assert!(MeanModel::new(Family::TruncatedExponential, 2.0, vec![-0.5], (0.0, 1.0)).is_err());
    }
}
