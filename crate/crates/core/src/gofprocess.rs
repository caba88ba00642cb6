//! Partial-sum processes over a scanning family, Kolmogorov-Smirnov
//! functionals, and the classical / projected parametric bootstrap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{orthonormal_score, solve, EstimatorSpec};
use crate::grid::{BinnedCounts, Grid};
use crate::measure::{evaluate_prefix, Kernel, MeasureContext};
use crate::models::{bin_means, sample_counts, MeanModel};
use crate::statistics::decompose;

/// A nested scanning family `A_t`, encoded as a permutation of bin indices;
/// `A_{j/K}` is the set of the first `j` bins in that order.
#[derive(Debug, Clone)]
pub struct ScanningFamily {
    order: Vec<usize>,
}

impl ScanningFamily {
    /// The default one-dimensional family: left-to-right bin order.
    pub fn left_to_right(k: usize) -> Self {
        ScanningFamily { order: (0..k).collect() }
    }

    /// A custom scan order; must be a permutation of `0..K`.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let k = order.len();
        let mut seen = vec![false; k];
        for &i in &order {
            if i >= k || seen[i] {
                return Err(Error::Validation(
                    "scan order must be a permutation of the bin indices".into(),
                ));
            }
            seen[i] = true;
        }
        Ok(ScanningFamily { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn k(&self) -> usize {
        self.order.len()
    }

    /// The grid of scan fractions `t_j = j / K`, j = 0..K.
    pub fn t_values(&self) -> Vec<f64> {
        let k = self.k() as f64;
        (0..=self.k()).map(|j| j as f64 / k).collect()
    }
}

/// Partial sums `S(t_j) = (1/sqrt K) sum_{k in A_{t_j}} g(x_k, nu_k, m_k)`,
/// length K + 1 with `S(0) = 0`.
pub fn partial_sums(
    kernel: &Kernel,
    data: &BinnedCounts,
    ctx: &MeasureContext,
    scan: &ScanningFamily,
) -> Result<Vec<f64>> {
    data.check_grid(ctx.grid())?;
    if scan.k() != ctx.k() {
        return Err(Error::Validation("scan length does not match K".into()));
    }
    let mut sums = Vec::with_capacity(ctx.k() + 1);
    evaluate_prefix(kernel, data, ctx, scan.order(), &mut sums)?;
    Ok(sums)
}

/// Kolmogorov-Smirnov functional `max_j |S(t_j)|` of the partial sums, with
/// the means already evaluated at the fitted theta.
pub fn ks_statistic(
    kernel: &Kernel,
    data: &BinnedCounts,
    ctx_at_theta_hat: &MeasureContext,
    scan: &ScanningFamily,
) -> Result<f64> {
    let sums = partial_sums(kernel, data, ctx_at_theta_hat, scan)?;
    Ok(sums.iter().fold(0.0f64, |a, s| a.max(s.abs())))
}

/// Bootstrap execution plan.
#[derive(Debug, Clone)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub mode: BootstrapMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapMode {
    /// Re-estimate theta on every bootstrap sample.
    Classical,
    /// Fix theta-hat and subtract the score projection; no refits.
    Projected,
}

impl BootstrapPlan {
    pub fn new(replicates: usize, mode: BootstrapMode, seed: u64) -> Result<Self> {
        if replicates == 0 {
            return Err(Error::Validation("bootstrap needs at least one replicate".into()));
        }
        Ok(BootstrapPlan { replicates, mode, seed })
    }

    /// Reported p-values should rest on at least 1000 replicates.
    pub fn is_reportable(&self) -> bool {
        self.replicates >= 1000
    }
}

/// Null distribution sample of the KS statistic under the fitted model.
///
/// Classical mode refits theta per replicate and recomputes the statistic;
/// projected mode keeps theta-hat fixed and removes the estimation effect
/// through precomputed score inner products. Failed refits are discarded;
/// more than 1% of them aborts the run.
pub fn bootstrap_null_sample(
    plan: &BootstrapPlan,
    fitted: &MeanModel,
    spec: &EstimatorSpec,
    kernel: &Kernel,
    grid: &Grid,
    scan: &ScanningFamily,
) -> Result<Vec<f64>> {
    match plan.mode {
        BootstrapMode::Classical => classical_null_sample(plan, fitted, spec, kernel, grid, scan),
        BootstrapMode::Projected => projected_null_sample(plan, fitted, kernel, grid, scan),
    }
}

fn classical_null_sample(
    plan: &BootstrapPlan,
    fitted: &MeanModel,
    spec: &EstimatorSpec,
    kernel: &Kernel,
    grid: &Grid,
    scan: &ScanningFamily,
) -> Result<Vec<f64>> {
    let means = bin_means(fitted, grid)?;
    let theta_obs = fitted.theta();
    let values: Vec<Option<f64>> = (0..plan.replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(i as u64);
            let data = sample_counts(&means, &mut rng);
            let fit = solve(spec, fitted, &data, grid, Some(theta_obs.clone())).ok()?;
            if !fit.converged {
                return None;
            }
            let ctx = MeasureContext::new(
                grid.clone(),
                bin_means(&fit.model, grid).ok()?,
            )
            .ok()?;
            ks_statistic(kernel, &data, &ctx, scan).ok()
        })
        .collect();
    let failures = values.iter().filter(|v| v.is_none()).count();
    if failures * 100 > plan.replicates {
        return Err(Error::Numeric(format!(
            "{failures} of {} bootstrap refits failed",
            plan.replicates
        )));
    }
    Ok(values.into_iter().flatten().collect())
}

/// Precomputed pieces of the projected process for one fitted model: for the
/// parallel part of the kernel, the per-prefix score inner products
/// `<g_par 1_A, s_j>` and the per-bin weights of `g_par` and `s_j`.
pub struct ProjectedScan {
    /// Per-bin weights of g_par, in scan order.
    wg: Vec<f64>,
    /// Per-bin weights of each s_j, in scan order.
    ws: Vec<Vec<f64>>,
    /// `<g_par 1_{A_a}, s_j>` for prefix a = 0..=K.
    q: Vec<Vec<f64>>,
    /// Means in scan order.
    means: Vec<f64>,
    root_k: f64,
}

impl ProjectedScan {
    pub fn new(
        fitted: &MeanModel,
        kernel: &Kernel,
        grid: &Grid,
        scan: &ScanningFamily,
    ) -> Result<Self> {
        let means_grid = bin_means(fitted, grid)?;
        let ctx = MeasureContext::new(grid.clone(), means_grid.clone())?;
        let (par, _) = decompose(kernel, &ctx)?;
        let wpar = par
            .linear_weight()
            .ok_or_else(|| Error::Numeric("parallel part is not linear".into()))?;
        let s = orthonormal_score(fitted, grid)?;
        let p = s.len();
        let k = grid.k();
        let order = scan.order();
        let mut wg = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        for &idx in order {
            let x = grid.center(idx);
            let m = means_grid[idx];
            wg.push(wpar(x, m));
            means.push(m);
        }
        let mut ws: Vec<Vec<f64>> = Vec::with_capacity(p);
        for sj in &s {
            let w = sj
                .linear_weight()
                .ok_or_else(|| Error::Numeric("score kernel is not linear".into()))?;
            ws.push(
                order
                    .iter()
                    .map(|&idx| w(grid.center(idx), means_grid[idx]))
                    .collect(),
            );
        }
        // prefix inner products: <g 1_A, s_j> = (1/K) sum_{k in A} wg ws m
        let mut q = vec![vec![0.0; k + 1]; p];
        for j in 0..p {
            let mut acc = 0.0;
            for i in 0..k {
                acc += wg[i] * ws[j][i] * means[i];
                q[j][i + 1] = acc / k as f64;
            }
        }
        Ok(ProjectedScan { wg, ws, q, means, root_k: (k as f64).sqrt() })
    }

    /// KS statistic of the projected process on one sample drawn at theta-hat:
    /// `max_a |v(g_par 1_A) - sum_j <g_par 1_A, s_j> v(s_j)|`.
    pub fn ks_statistic(&self, counts_in_scan_order: &[f64]) -> f64 {
        let k = self.wg.len();
        let p = self.ws.len();
        let mut vs = vec![0.0; p];
        for j in 0..p {
            let mut acc = 0.0;
            for i in 0..k {
                acc += self.ws[j][i] * (counts_in_scan_order[i] - self.means[i]);
            }
            vs[j] = acc / self.root_k;
        }
        let mut best = 0.0f64;
        let mut prefix = 0.0;
        for i in 0..=k {
            if i > 0 {
                prefix += self.wg[i - 1] * (counts_in_scan_order[i - 1] - self.means[i - 1]);
            }
            let mut val = prefix / self.root_k;
            for j in 0..p {
                val -= self.q[j][i] * vs[j];
            }
            best = best.max(val.abs());
        }
        best
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }
}

fn projected_null_sample(
    plan: &BootstrapPlan,
    fitted: &MeanModel,
    kernel: &Kernel,
    grid: &Grid,
    scan: &ScanningFamily,
) -> Result<Vec<f64>> {
    let proj = ProjectedScan::new(fitted, kernel, grid, scan)?;
    let values: Vec<f64> = (0..plan.replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(i as u64);
            let data = sample_counts(proj.means(), &mut rng);
            let counts: Vec<f64> = data.0.iter().map(|&z| z as f64).collect();
            proj.ks_statistic(&counts)
        })
        .collect();
    Ok(values)
}

/// Bootstrap p-value with the +1/+1 correction: never exactly zero.
pub fn pvalue_from_sample(null_sample: &[f64], observed: f64) -> f64 {
    let exceed = null_sample.iter().filter(|v| **v >= observed).count();
    (1.0 + exceed as f64) / (1.0 + null_sample.len() as f64)
}

/// Full bootstrap p-value for an observed statistic.
pub fn bootstrap_pvalue(
    plan: &BootstrapPlan,
    observed: f64,
    fitted: &MeanModel,
    spec: &EstimatorSpec,
    kernel: &Kernel,
    grid: &Grid,
    scan: &ScanningFamily,
) -> Result<f64> {
    let sample = bootstrap_null_sample(plan, fitted, spec, kernel, grid, scan)?;
    Ok(pvalue_from_sample(&sample, observed))
}

/// Two-sample Kolmogorov distance between empirical CDFs.
pub fn two_sample_ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    xb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let (va, vb) = (xa[i], xb[j]);
        if va <= vb {
            i += 1;
        }
        if vb <= va {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Kolmogorov distance between an empirical CDF and a reference CDF.
pub fn ks_distance_to_cdf<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}
