//! The catalogue of divisible-statistic kernels and the parallel/orthogonal
//! decomposition with respect to the linear part `z - m`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::measure::{
    c_function, inner_product, poisson_pmf, truncated_expectation, BinFn, Kernel, MeasureContext,
    DEFAULT_TRUNCATION_TOL,
};

/// Centered Pearson kernel `(z - m)^2 / m - 1`, with `C(x; g) = 1`.
pub fn pearson() -> Kernel {
    Kernel::new(
        "pearson",
        Arc::new(|_x, z, m| {
            let d = z as f64 - m;
            d * d / m - 1.0
        }),
    )
    .with_known_c(Arc::new(|_x, _m| 1.0))
}

/// Linear kernel `z - m`, with `C(x; g) = m`.
pub fn linear() -> Kernel {
    Kernel::new("linear", Arc::new(|_x, z, m| z as f64 - m))
        .with_known_c(Arc::new(|_x, m| m))
        .with_linear_weight(Arc::new(|_x, _m| 1.0))
}

/// Weighted linear kernel `(z - m) / m`, with `C(x; g) = 1`.
pub fn weighted_linear() -> Kernel {
    Kernel::new("wlinear", Arc::new(|_x, z, m| (z as f64 - m) / m))
        .with_known_c(Arc::new(|_x, _m| 1.0))
        .with_linear_weight(Arc::new(|_x, m| 1.0 / m))
}

/// Centered likelihood-ratio (Cash) kernel
/// `z ln z - E[nu ln nu] - (z - m)(1 + ln m)`, with `0 ln 0 = 0`.
///
/// `E[nu ln nu]` is memoized per distinct mean; it dominates the cost in
/// bootstrap loops that refit the model.
pub fn cash() -> Kernel {
    let cache: Arc<Mutex<HashMap<u64, f64>>> = Arc::new(Mutex::new(HashMap::new()));
    let ent = move |m: f64| -> f64 {
        if let Some(v) = cache.lock().unwrap().get(&m.to_bits()) {
            return *v;
        }
        let v = truncated_expectation(m, DEFAULT_TRUNCATION_TOL, zlnz)
            .expect("E[nu ln nu] summation");
        cache.lock().unwrap().insert(m.to_bits(), v);
        v
    };
    Kernel::new(
        "cash",
        Arc::new(move |_x, z, m| zlnz(z) - ent(m) - (z as f64 - m) * (1.0 + m.ln())),
    )
}

#[inline]
fn zlnz(z: u64) -> f64 {
    if z == 0 {
        0.0
    } else {
        let zf = z as f64;
        zf * zf.ln()
    }
}

/// Spectral kernel `1{z <= q} - P(q | m)` for integer level `q`.
///
/// Its covariance function is `C(x; g) = -m p(q | m)`; the closed form is
/// pinned by the identity `E[1{nu<=q} (nu - m)] = -m p(q|m)` so that the
/// parallel part of the decomposition reproduces it exactly.
pub fn spectral(q: u64) -> Kernel {
    Kernel::new(
        format!("spectral:{q}"),
        Arc::new(move |_x, z, m| {
            let p = crate::measure::poisson_cdf(q, m).expect("cdf");
            if z <= q {
                1.0 - p
            } else {
                -p
            }
        }),
    )
    .with_known_c(Arc::new(move |_x, m| {
        -m * poisson_pmf(q, m).expect("pmf")
    }))
}

/// Empty-boxes kernel `1{z = 0} - p(0 | m)`, with `C(x; g) = -m p(0 | m)`.
pub fn empty_boxes() -> Kernel {
    Kernel::new(
        "empty",
        Arc::new(|_x, z, m| {
            let p0 = (-m).exp();
            if z == 0 {
                1.0 - p0
            } else {
                -p0
            }
        }),
    )
    .with_known_c(Arc::new(|_x, m| -m * (-m).exp()))
}

/// Weighted kernel `omega(x) g(z, m)`; weights depending on theta enter
/// through the estimating-equation machinery.
pub fn weighted(name: impl Into<String>, omega: BinFn, base: &Kernel) -> Kernel {
    let eval_base = base.clone();
    let om = omega.clone();
    let mut out = Kernel::new(name, Arc::new(move |x, z, m| om(x, m) * eval_base.eval(x, z, m)));
    if let Some(c) = base.known_c() {
        let c = c.clone();
        let om = omega.clone();
        out = out.with_known_c(Arc::new(move |x, m| om(x, m) * c(x, m)));
    }
    if let Some(w) = base.linear_weight() {
        let w = w.clone();
        let om = omega.clone();
        out = out.with_linear_weight(Arc::new(move |x, m| om(x, m) * w(x, m)));
    }
    out
}

/// Parse a kernel selection string: `pearson | cash | linear | wlinear |
/// spectral:q | empty | custom:<omega>:<base>` with omega one of
/// `one | inv_m | inv_sqrt_m`.
pub fn make_kernel(name: &str) -> Result<Kernel> {
    match name {
        "pearson" => Ok(pearson()),
        "cash" => Ok(cash()),
        "linear" => Ok(linear()),
        "wlinear" => Ok(weighted_linear()),
        "empty" => Ok(empty_boxes()),
        _ => {
            if let Some(qs) = name.strip_prefix("spectral:") {
                let q: u64 = qs.parse().map_err(|_| {
                    Error::Validation(format!("invalid spectral level in `{name}`"))
                })?;
                return Ok(spectral(q));
            }
            if let Some(rest) = name.strip_prefix("custom:") {
                let (omega_name, base_name) = rest.split_once(':').ok_or_else(|| {
                    Error::Validation(format!(
                        "custom kernel must be `custom:<omega>:<base>`, got `{name}`"
                    ))
                })?;
                let omega: BinFn = match omega_name {
                    "one" => Arc::new(|_x, _m| 1.0),
                    "inv_m" => Arc::new(|_x, m| 1.0 / m),
                    "inv_sqrt_m" => Arc::new(|_x, m| 1.0 / m.sqrt()),
                    other => {
                        return Err(Error::Validation(format!(
                            "unknown custom weight `{other}`"
                        )))
                    }
                };
                let base = make_kernel(base_name)?;
                return Ok(weighted(format!("custom:{omega_name}:{base_name}"), omega, &base));
            }
            Err(Error::Validation(format!("unknown kernel `{name}`")))
        }
    }
}

/// All catalogue kernels with default parameters, for property sweeps.
pub fn catalogue() -> Vec<Kernel> {
    vec![
        pearson(),
        cash(),
        linear(),
        weighted_linear(),
        spectral(1),
        spectral(3),
        empty_boxes(),
    ]
}

/// Split `g` into its part collinear with `z - m` and the orthogonal rest:
/// `g_par(x, z) = [C(x; g) / m] (z - m)` and `g_perp = g - g_par`.
pub fn decompose(kernel: &Kernel, ctx: &MeasureContext) -> Result<(Kernel, Kernel)> {
    let tol = ctx.truncation_tol();
    // verify C is finite on all bins before building the closures
    for (x, m) in ctx.grid().centers().iter().zip(ctx.means()) {
        let c = c_function(kernel, *x, *m, tol)?;
        if !c.is_finite() {
            return Err(Error::Numeric(format!(
                "C(x; {}) not finite at x = {x}",
                kernel.name()
            )));
        }
    }
    let g = kernel.clone();
    let weight: BinFn = if let Some(c) = kernel.known_c() {
        let c = c.clone();
        Arc::new(move |x, m| c(x, m) / m)
    } else {
        let g = kernel.clone();
        Arc::new(move |x, m| {
            c_function(&g, x, m, DEFAULT_TRUNCATION_TOL).expect("C(x;g)") / m
        })
    };
    let wpar = weight.clone();
    let par = Kernel::new(
        format!("{}_par", kernel.name()),
        Arc::new(move |x, z, m| wpar(x, m) * (z as f64 - m)),
    )
    .with_linear_weight(weight.clone())
    .with_known_c(Arc::new(move |x, m| weight(x, m) * m));
    let par_for_perp = par.clone();
    let perp = Kernel::new(
        format!("{}_perp", kernel.name()),
        Arc::new(move |x, z, m| g.eval(x, z, m) - par_for_perp.eval(x, z, m)),
    )
    .with_known_c(Arc::new(|_x, _m| 0.0));
    Ok((par, perp))
}

/// True iff `C(x; g)` is constant over the bins within `tol`.
pub fn is_c_homogeneous(kernel: &Kernel, ctx: &MeasureContext, tol: f64) -> Result<bool> {
    let centers = ctx.grid().centers();
    let means = ctx.means();
    let c0 = c_function(kernel, centers[0], means[0], ctx.truncation_tol())?;
    for (x, m) in centers.iter().zip(means).skip(1) {
        let c = c_function(kernel, *x, *m, ctx.truncation_tol())?;
        if (c - c0).abs() >= tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Check the centering invariant `|E[g]| < tol` over a grid of means.
pub fn check_centering(kernel: &Kernel, means: &[f64], tol: f64) -> Result<()> {
    for &m in means {
        let e = crate::measure::expect(kernel, 0.5, m, 1, DEFAULT_TRUNCATION_TOL)?;
        if e.abs() >= tol {
            return Err(Error::Numeric(format!(
                "kernel {} not centered at m = {m}: E[g] = {e:.3e}",
                kernel.name()
            )));
        }
    }
    Ok(())
}

/// `||g||^2 = ||g_par||^2 + ||g_perp||^2` residual, for the Pythagoras test.
pub fn pythagoras_residual(kernel: &Kernel, ctx: &MeasureContext) -> Result<f64> {
    let (par, perp) = decompose(kernel, ctx)?;
    let g2 = inner_product(kernel, kernel, ctx)?;
    let p2 = inner_product(&par, &par, ctx)?;
    let q2 = inner_product(&perp, &perp, ctx)?;
    Ok((g2 - p2 - q2).abs())
}
