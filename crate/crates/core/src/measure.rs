//! Poisson kernel numerics and the Hilbert-space geometry of the bin measure:
//! expectations, inner products, the covariance function `C(x; g)`, and
//! evaluation of divisible statistics as linear functionals.

use std::fmt;
use std::sync::Arc;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::grid::{BinnedCounts, Grid};

/// Default relative tail tolerance for truncated Poisson sums.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-14;

/// Kernel evaluation `(x, z, m) -> g(x, z, m)`.
pub type EvalFn = Arc<dyn Fn(f64, u64, f64) -> f64 + Send + Sync>;
/// Per-bin function `(x, m) -> value` (closed-form C, linear weights, ...).
pub type BinFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A centered statistic kernel `g(x, z, m)` with `E[g(x, nu, m)] = 0`.
///
/// Kernels of the weighted linear form `w(x, m) * (z - m)` carry their weight
/// so that inner products against them reduce to O(K) sums.
#[derive(Clone)]
pub struct Kernel {
    name: String,
    eval: EvalFn,
    known_c: Option<BinFn>,
    linear_weight: Option<BinFn>,
    centered: bool,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("name", &self.name)
            .field("known_c", &self.known_c.is_some())
            .field("linear", &self.linear_weight.is_some())
            .finish()
    }
}

impl Kernel {
    pub fn new(name: impl Into<String>, eval: EvalFn) -> Self {
        Kernel { name: name.into(), eval, known_c: None, linear_weight: None, centered: true }
    }

    pub fn with_known_c(mut self, c: BinFn) -> Self {
        self.known_c = Some(c);
        self
    }

    /// Mark the kernel as `w(x, m) * (z - m)`; `eval` must agree with this form.
    pub fn with_linear_weight(mut self, w: BinFn) -> Self {
        self.linear_weight = Some(w);
        self
    }

    pub fn with_centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn eval(&self, x: f64, z: u64, m: f64) -> f64 {
        (self.eval)(x, z, m)
    }

    pub fn linear_weight(&self) -> Option<&BinFn> {
        self.linear_weight.as_ref()
    }

    pub fn known_c(&self) -> Option<&BinFn> {
        self.known_c.as_ref()
    }

    pub fn has_known_c(&self) -> bool {
        self.known_c.is_some()
    }

    /// `a * f + b * g` as a new kernel; linear structure is preserved.
    pub fn linear_combination(name: impl Into<String>, parts: Vec<(f64, Kernel)>) -> Kernel {
        let all_linear = parts.iter().all(|(_, k)| k.linear_weight.is_some());
        let evals: Vec<(f64, EvalFn)> = parts.iter().map(|(a, k)| (*a, k.eval.clone())).collect();
        let eval: EvalFn = Arc::new(move |x, z, m| {
            evals.iter().map(|(a, e)| a * e(x, z, m)).sum()
        });
        let mut out = Kernel::new(name, eval);
        if all_linear {
            let ws: Vec<(f64, BinFn)> = parts
                .iter()
                .map(|(a, k)| (*a, k.linear_weight.clone().unwrap()))
                .collect();
            out = out.with_linear_weight(Arc::new(move |x, m| {
                ws.iter().map(|(a, w)| a * w(x, m)).sum()
            }));
        }
        if parts.iter().all(|(_, k)| k.known_c.is_some()) {
            let cs: Vec<(f64, BinFn)> = parts
                .iter()
                .map(|(a, k)| (*a, k.known_c.clone().unwrap()))
                .collect();
            out = out.with_known_c(Arc::new(move |x, m| {
                cs.iter().map(|(a, c)| a * c(x, m)).sum()
            }));
        }
        out
    }
}

/// Immutable evaluation context: grid, per-bin means and the tail tolerance.
#[derive(Debug, Clone)]
pub struct MeasureContext {
    grid: Grid,
    means: Vec<f64>,
    truncation_tol: f64,
}

impl MeasureContext {
    pub fn new(grid: Grid, means: Vec<f64>) -> Result<Self> {
        Self::with_tol(grid, means, DEFAULT_TRUNCATION_TOL)
    }

    pub fn with_tol(grid: Grid, means: Vec<f64>, truncation_tol: f64) -> Result<Self> {
        if means.len() != grid.k() {
            return Err(Error::Validation(format!(
                "means length {} does not match K = {}",
                means.len(),
                grid.k()
            )));
        }
        if let Some(bad) = means.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::Validation(format!(
                "all per-bin means must be positive and finite, found {bad}"
            )));
        }
        Ok(MeasureContext { grid, means, truncation_tol })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn truncation_tol(&self) -> f64 {
        self.truncation_tol
    }

    pub fn k(&self) -> usize {
        self.grid.k()
    }
}

/// Poisson probability mass function `p(z | t)`, log-space for stability.
pub fn poisson_pmf(z: u64, t: f64) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("Poisson rate must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(if z == 0 { 1.0 } else { 0.0 });
    }
    let zf = z as f64;
    Ok((zf * t.ln() - t - ln_gamma(zf + 1.0)).exp())
}

/// Poisson distribution function `P(q | t) = sum_{z <= q} p(z | t)`.
pub fn poisson_cdf(q: u64, t: f64) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("Poisson rate must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    if t > 700.0 {
        return Err(Error::Numeric(format!("rate {t} too large for direct summation")));
    }
    let mut term = (-t).exp();
    let mut acc = term;
    for z in 1..=q {
        term *= t / z as f64;
        acc += term;
    }
    Ok(acc.min(1.0))
}

/// Truncated expectation `sum_z f(z) p(z | m)`.
///
/// The sum stops once the accumulated pmf mass exceeds `1 - tol` AND the
/// current |term| has fallen below `tol` times the running magnitude, so
/// polynomially growing kernels are not cut off by mass alone.
pub(crate) fn truncated_expectation<F: FnMut(u64) -> f64>(
    m: f64,
    tol: f64,
    mut f: F,
) -> Result<f64> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Domain(format!("mean must be positive, got {m}")));
    }
    if m > 700.0 {
        return Err(Error::Numeric(format!("mean {m} too large for direct summation")));
    }
    let z_cap = (m + 60.0 * m.sqrt() + 200.0) as u64;
    let mut pmf = (-m).exp();
    let mut mass = pmf;
    let mut acc = 0.0f64;
    let mut scale = 1e-300f64;
    let mut z = 0u64;
    loop {
        let val = f(z);
        if !val.is_finite() {
            return Err(Error::Numeric(format!(
                "kernel value not finite at z = {z}, m = {m}"
            )));
        }
        let term = val * pmf;
        acc += term;
        scale = scale.max(acc.abs()).max(term.abs());
        if mass > 1.0 - tol && term.abs() < tol * scale {
            break;
        }
        if z >= z_cap {
            break;
        }
        z += 1;
        pmf *= m / z as f64;
        mass += pmf;
    }
    Ok(acc)
}

/// `E[g(x, nu, m)^power]` for `power` in {1, 2}.
pub fn expect(kernel: &Kernel, x: f64, m: f64, power: u8, tol: f64) -> Result<f64> {
    match power {
        1 => truncated_expectation(m, tol, |z| kernel.eval(x, z, m)),
        2 => truncated_expectation(m, tol, |z| {
            let v = kernel.eval(x, z, m);
            v * v
        }),
        _ => Err(Error::Validation(format!("power must be 1 or 2, got {power}"))),
    }
}

/// The covariance function `C(x; g) = E[g(x, nu, m) (nu - m)]`.
///
/// Uses the kernel's closed form when one is attached, otherwise the
/// truncated sum. Agreement of the two routes is a tested invariant.
pub fn c_function(kernel: &Kernel, x: f64, m: f64, tol: f64) -> Result<f64> {
    if let Some(c) = &kernel.known_c {
        return Ok(c(x, m));
    }
    c_function_summed(kernel, x, m, tol)
}

/// `C(x; g)` by direct truncated summation, ignoring any closed form.
pub fn c_function_summed(kernel: &Kernel, x: f64, m: f64, tol: f64) -> Result<f64> {
    truncated_expectation(m, tol, |z| kernel.eval(x, z, m) * (z as f64 - m))
}

/// Cross expectation `E[a(x, nu, m) b(x, nu, m)]` at one bin.
fn cross_expectation(a: &Kernel, b: &Kernel, x: f64, m: f64, tol: f64) -> Result<f64> {
    truncated_expectation(m, tol, |z| a.eval(x, z, m) * b.eval(x, z, m))
}

/// Inner product `<a, b> = (1/K) sum_k E[a b](x_k, m_k)` in L2 of the bin
/// measure. Weighted linear kernels short-circuit the z-summation.
pub fn inner_product(a: &Kernel, b: &Kernel, ctx: &MeasureContext) -> Result<f64> {
    let k = ctx.k() as f64;
    let tol = ctx.truncation_tol();
    let mut acc = 0.0;
    match (&a.linear_weight, &b.linear_weight) {
        (Some(wa), Some(wb)) => {
            // E[(z-m)^2] = m
            for (x, m) in ctx.grid.centers().iter().zip(&ctx.means) {
                acc += wa(*x, *m) * wb(*x, *m) * m;
            }
        }
        (Some(wa), None) => {
            for (x, m) in ctx.grid.centers().iter().zip(&ctx.means) {
                acc += wa(*x, *m) * c_function(b, *x, *m, tol)?;
            }
        }
        (None, Some(wb)) => {
            for (x, m) in ctx.grid.centers().iter().zip(&ctx.means) {
                acc += wb(*x, *m) * c_function(a, *x, *m, tol)?;
            }
        }
        (None, None) => {
            for (x, m) in ctx.grid.centers().iter().zip(&ctx.means) {
                acc += cross_expectation(a, b, *x, *m, tol)?;
            }
        }
    }
    Ok(acc / k)
}

/// Squared norm `<g, g>`.
pub fn norm_sq(g: &Kernel, ctx: &MeasureContext) -> Result<f64> {
    inner_product(g, g, ctx)
}

/// The divisible statistic `(1/sqrt K) sum_k g(x_k, nu_k, m_k)`.
pub fn evaluate_statistic(
    kernel: &Kernel,
    data: &BinnedCounts,
    ctx: &MeasureContext,
) -> Result<f64> {
    data.check_grid(&ctx.grid)?;
    let mut acc = 0.0;
    for ((x, m), z) in ctx.grid.centers().iter().zip(&ctx.means).zip(&data.0) {
        let v = kernel.eval(*x, *z, *m);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "kernel {} not finite at observed count {z} (x = {x}, m = {m})",
                kernel.name
            )));
        }
        acc += v;
    }
    Ok(acc / (ctx.k() as f64).sqrt())
}

/// Partial evaluation over the first `prefix` bins of the given scan order;
/// used by the partial-sum processes.
pub(crate) fn evaluate_prefix(
    kernel: &Kernel,
    data: &BinnedCounts,
    ctx: &MeasureContext,
    order: &[usize],
    sums: &mut Vec<f64>,
) -> Result<()> {
    sums.clear();
    sums.push(0.0);
    let root_k = (ctx.k() as f64).sqrt();
    let mut acc = 0.0;
    for &idx in order {
        let x = ctx.grid.center(idx);
        let m = ctx.means[idx];
        let v = kernel.eval(x, data.0[idx], m);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "kernel {} not finite at bin {idx}",
                kernel.name
            )));
        }
        acc += v;
        sums.push(acc / root_k);
    }
    Ok(())
}
