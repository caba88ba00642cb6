//! Asymptotically distribution-free testing: the standardized partial-sum
//! functions, a fixed block basis, unitary pair-swap operators, the composed
//! chain mapping the fixed basis into the orthonormalized score, the
//! transformed process, KS*, and its closed-form limit law.

use crate::error::{Error, Result};
use crate::estimation::orthonormal_score;
use crate::grid::BinnedCounts;
use crate::measure::{BinFn, Kernel, MeasureContext};
use crate::gofprocess::ScanningFamily;
use std::sync::Arc;

/// A weighted linear kernel `w_k (z - m_k)` stored as one weight per bin
/// (grid order). Everything the transform touches lives in this subspace,
/// where inner products are O(K) sums: `<a, b> = (1/K) sum_k w_a w_b m_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinKernel {
    pub w: Vec<f64>,
}

impl BinKernel {
    pub fn zeros(k: usize) -> Self {
        BinKernel { w: vec![0.0; k] }
    }

    pub fn inner(&self, other: &BinKernel, means: &[f64]) -> f64 {
        let k = self.w.len() as f64;
        self.w
            .iter()
            .zip(&other.w)
            .zip(means)
            .map(|((a, b), m)| a * b * m)
            .sum::<f64>()
            / k
    }

    pub fn norm_sq(&self, means: &[f64]) -> f64 {
        self.inner(self, means)
    }

    /// The divisible statistic `v(g) = (1/sqrt K) sum w_k (nu_k - m_k)`.
    pub fn statistic(&self, data: &BinnedCounts, means: &[f64]) -> f64 {
        let k = self.w.len() as f64;
        self.w
            .iter()
            .zip(&data.0)
            .zip(means)
            .map(|((w, z), m)| w * (*z as f64 - m))
            .sum::<f64>()
            / k.sqrt()
    }

    /// View as a general kernel for cross-module checks.
    pub fn to_kernel(&self, ctx: &MeasureContext, name: &str) -> Kernel {
        let grid = ctx.grid().clone();
        let w = Arc::new(self.w.clone());
        let table: BinFn = Arc::new(move |x, _m| w[grid.index_of(x)]);
        let weval = table.clone();
        let wc = table.clone();
        Kernel::new(name, Arc::new(move |x, z, m| weval(x, m) * (z as f64 - m)))
            .with_linear_weight(table)
            .with_known_c(Arc::new(move |x, m| wc(x, m) * m))
    }
}

/// The standardized partial-sum kernel
/// `ell_t(x, z) = 1{x in A_t} (z - m) / sqrt m` for `t = prefix / K`.
pub fn ell_kernel(prefix: usize, ctx: &MeasureContext, scan: &ScanningFamily) -> BinKernel {
    let mut w = vec![0.0; ctx.k()];
    for &idx in &scan.order()[..prefix] {
        w[idx] = 1.0 / ctx.means()[idx].sqrt();
    }
    BinKernel { w }
}

/// The fixed orthonormal block basis: `p` consecutive scan increments with
/// `r_j = sqrt(p) 1{x in B_j} (z - m) / sqrt m`.
#[derive(Debug, Clone)]
pub struct RBasis {
    /// Scan-position ranges of the blocks.
    pub blocks: Vec<std::ops::Range<usize>>,
    pub kernels: Vec<BinKernel>,
    /// Worst deviation of mu(A_{t_j}) from j/p when p does not divide K.
    pub mass_deviation: f64,
}

/// Block `j` (1-based) covers scan positions `floor((j-1)K/p) .. floor(jK/p)`.
pub fn r_basis(p: usize, ctx: &MeasureContext, scan: &ScanningFamily) -> Result<RBasis> {
    let k = ctx.k();
    if p == 0 || p > k {
        return Err(Error::Validation(format!(
            "block count p = {p} must lie in 1..=K"
        )));
    }
    let mut blocks = Vec::with_capacity(p);
    let mut kernels = Vec::with_capacity(p);
    let mut dev = 0.0f64;
    for j in 1..=p {
        let a = (j - 1) * k / p;
        let b = j * k / p;
        dev = dev.max((b as f64 / k as f64 - j as f64 / p as f64).abs());
        let mut w = vec![0.0; k];
        // exact normalization: ||r_j||^2 = |B_j| * norm_factor^2 / K = 1
        let width = (b - a) as f64;
        let factor = (k as f64 / width).sqrt();
        for &idx in &scan.order()[a..b] {
            w[idx] = factor / ctx.means()[idx].sqrt();
        }
        blocks.push(a..b);
        kernels.push(BinKernel { w });
    }
    Ok(RBasis { blocks, kernels, mass_deviation: dev })
}

/// The pair-swap unitary operator `U_{a,b} f = f - <f, a-b>/(1 - <a,b>) (a-b)`.
///
/// `a` and `b` must have unit norm; `a = b` (or `<a,b> = 1`) degenerates to
/// the identity by convention.
pub fn apply_uab(a: &BinKernel, b: &BinKernel, f: &BinKernel, means: &[f64]) -> Result<BinKernel> {
    for (name, k) in [("a", a), ("b", b)] {
        let n = k.norm_sq(means);
        if (n - 1.0).abs() > 1e-8 {
            return Err(Error::Validation(format!(
                "U_{{a,b}} requires unit-norm arguments; ||{name}||^2 = {n}"
            )));
        }
    }
    let ab = a.inner(b, means);
    if (1.0 - ab).abs() < 1e-12 {
        return Ok(f.clone());
    }
    let fd = f.inner(a, means) - f.inner(b, means);
    let coef = fd / (1.0 - ab);
    let w = f
        .w
        .iter()
        .zip(&a.w)
        .zip(&b.w)
        .map(|((fw, aw), bw)| fw - coef * (aw - bw))
        .collect();
    Ok(BinKernel { w })
}

/// The composed operator `U_p = U_{a_p, s_p} ... U_{a_1, s_1}` with the
/// auxiliary functions `a_1 = r_1`, `a_j = U_{j-1} r_j`. Maps `r_j` to `s_j`.
#[derive(Debug, Clone)]
pub struct UnitaryChain {
    /// Difference directions `d_j = a_j - s_j` of the retained factors.
    dirs: Vec<BinKernel>,
    /// `1 / (1 - <a_j, s_j>)` per retained factor.
    inv: Vec<f64>,
    pub p: usize,
}

impl UnitaryChain {
    pub fn apply(&self, f: &BinKernel, means: &[f64]) -> BinKernel {
        let mut cur = f.clone();
        for (d, c) in self.dirs.iter().zip(&self.inv) {
            let coef = c * cur.inner(d, means);
            for (cw, dw) in cur.w.iter_mut().zip(&d.w) {
                *cw -= coef * dw;
            }
        }
        cur
    }

    pub fn factors(&self) -> usize {
        self.dirs.len()
    }

    pub(crate) fn dirs(&self) -> &[BinKernel] {
        &self.dirs
    }

    pub(crate) fn inv(&self) -> &[f64] {
        &self.inv
    }
}

/// Build the chain mapping the fixed basis `r` into the orthonormal score
/// `s`. A step with `<a_j, s_j> = 1` contributes the identity and is skipped.
pub fn build_chain(r: &RBasis, s: &[BinKernel], ctx: &MeasureContext) -> Result<UnitaryChain> {
    let p = s.len();
    if r.kernels.len() != p {
        return Err(Error::Validation(format!(
            "basis size {} does not match score dimension {p}",
            r.kernels.len()
        )));
    }
    let means = ctx.means();
    let mut dirs = Vec::with_capacity(p);
    let mut inv = Vec::with_capacity(p);
    let mut chain = UnitaryChain { dirs: vec![], inv: vec![], p };
    for j in 0..p {
        let a_j = chain.apply(&r.kernels[j], means);
        let ab = a_j.inner(&s[j], means);
        if (1.0 - ab).abs() >= 1e-12 {
            let d = BinKernel {
                w: a_j.w.iter().zip(&s[j].w).map(|(a, b)| a - b).collect(),
            };
            dirs.push(d);
            inv.push(1.0 / (1.0 - ab));
            chain = UnitaryChain { dirs: dirs.clone(), inv: inv.clone(), p };
        }
    }
    // verify U_p r_j = s_j
    for j in 0..p {
        let mapped = chain.apply(&r.kernels[j], means);
        let diff = BinKernel {
            w: mapped.w.iter().zip(&s[j].w).map(|(a, b)| a - b).collect(),
        };
        let err = diff.norm_sq(means).sqrt();
        if err > 1e-9 {
            return Err(Error::Numeric(format!(
                "chain does not map r_{j} to s_{j}: ||U r - s|| = {err:.2e}"
            )));
        }
    }
    Ok(chain)
}

/// Orthonormalized score as bin-weight kernels at the model's theta.
pub fn score_bin_kernels(
    model: &crate::models::MeanModel,
    ctx: &MeasureContext,
) -> Result<Vec<BinKernel>> {
    let s = orthonormal_score(model, ctx.grid())?;
    s.iter()
        .map(|sk| {
            let w = sk
                .linear_weight()
                .ok_or_else(|| Error::Numeric("score kernel is not linear".into()))?;
            Ok(BinKernel {
                w: ctx
                    .grid()
                    .centers()
                    .iter()
                    .zip(ctx.means())
                    .map(|(x, m)| w(*x, *m))
                    .collect(),
            })
        })
        .collect()
}

/// The transformed partial-sum process `v(U_p Pi_r ell_t)` over the scan
/// grid `t = 0, 1/K, ..., 1`, evaluated on one data set.
pub fn transformed_process(
    data: &BinnedCounts,
    ctx: &MeasureContext,
    chain: &UnitaryChain,
    r: &RBasis,
    scan: &ScanningFamily,
) -> Result<Vec<f64>> {
    data.check_grid(ctx.grid())?;
    let means = ctx.means();
    let mut path = Vec::with_capacity(ctx.k() + 1);
    for prefix in 0..=ctx.k() {
        let ell = ell_kernel(prefix, ctx, scan);
        let mut proj = ell.clone();
        for rj in &r.kernels {
            let a = ell.inner(rj, means);
            for (pw, rw) in proj.w.iter_mut().zip(&rj.w) {
                *pw -= a * rw;
            }
        }
        let f = chain.apply(&proj, means);
        path.push(f.statistic(data, means));
    }
    Ok(path)
}

/// Variance profile `||Pi_r ell_t||^2 = ||ell_t||^2 - sum_j <ell_t, r_j>^2`
/// (unitarity keeps it unchanged through the chain).
pub fn variance_profile(ctx: &MeasureContext, r: &RBasis, scan: &ScanningFamily) -> Vec<f64> {
    let means = ctx.means();
    (0..=ctx.k())
        .map(|prefix| {
            let ell = ell_kernel(prefix, ctx, scan);
            let mut v = ell.norm_sq(means);
            for rj in &r.kernels {
                let a = ell.inner(rj, means);
                v -= a * a;
            }
            v
        })
        .collect()
}

/// Precomputed transformed-process evaluator: one O(pK) pass per data set
/// instead of O(pK^2). Built once per fitted theta.
pub struct TransformedScan {
    order: Vec<usize>,
    means_scan: Vec<f64>,
    inv_sqrt_m: Vec<f64>,
    /// alpha[j][a] = <ell_a, r_j>
    alpha: Vec<Vec<f64>>,
    /// beta[i][a]: chain coefficients of Pi_r ell_a along d_i
    beta: Vec<Vec<f64>>,
    /// r and d kernels in scan order for the per-replicate statistics
    wr_scan: Vec<Vec<f64>>,
    wd_scan: Vec<Vec<f64>>,
}

impl TransformedScan {
    pub fn new(
        ctx: &MeasureContext,
        chain: &UnitaryChain,
        r: &RBasis,
        scan: &ScanningFamily,
    ) -> Self {
        let k = ctx.k();
        let means = ctx.means();
        let order = scan.order().to_vec();
        let means_scan: Vec<f64> = order.iter().map(|&i| means[i]).collect();
        let inv_sqrt_m: Vec<f64> = means_scan.iter().map(|m| 1.0 / m.sqrt()).collect();
        let p = r.kernels.len();
        let nd = chain.dirs().len();

        let to_scan = |bk: &BinKernel| -> Vec<f64> { order.iter().map(|&i| bk.w[i]).collect() };
        let wr_scan: Vec<Vec<f64>> = r.kernels.iter().map(&to_scan).collect();
        let wd_scan: Vec<Vec<f64>> = chain.dirs().iter().map(&to_scan).collect();

        // alpha[j][a] = (1/K) sum_{i < a} wr[j][i] * sqrt(m_i)
        let mut alpha = vec![vec![0.0; k + 1]; p];
        for j in 0..p {
            let mut acc = 0.0;
            for i in 0..k {
                acc += wr_scan[j][i] * means_scan[i].sqrt() / k as f64;
                alpha[j][i + 1] = acc;
            }
        }
        // prefix inner products <ell_a, d_i> and Grams for the beta recursion
        let mut ell_d = vec![vec![0.0; k + 1]; nd];
        for i in 0..nd {
            let mut acc = 0.0;
            for t in 0..k {
                acc += wd_scan[i][t] * means_scan[t].sqrt() / k as f64;
                ell_d[i][t + 1] = acc;
            }
        }
        let gram_rd: Vec<Vec<f64>> = (0..p)
            .map(|j| {
                (0..nd)
                    .map(|i| r.kernels[j].inner(&chain.dirs()[i], means))
                    .collect()
            })
            .collect();
        let gram_dd: Vec<Vec<f64>> = (0..nd)
            .map(|l| {
                (0..nd)
                    .map(|i| chain.dirs()[l].inner(&chain.dirs()[i], means))
                    .collect()
            })
            .collect();
        let mut beta = vec![vec![0.0; k + 1]; nd];
        for a in 0..=k {
            for i in 0..nd {
                let mut v = ell_d[i][a];
                for j in 0..p {
                    v -= alpha[j][a] * gram_rd[j][i];
                }
                for l in 0..i {
                    v -= beta[l][a] * gram_dd[l][i];
                }
                beta[i][a] = chain.inv()[i] * v;
            }
        }
        TransformedScan { order, means_scan, inv_sqrt_m, alpha, beta, wr_scan, wd_scan }
    }

    /// KS* = max over the scan grid of |v(U_p Pi_r ell_t)| on one sample
    /// given in grid order.
    pub fn ks_star(&self, counts: &[f64]) -> f64 {
        self.fold_path(counts, 0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Full path of the transformed process, length K + 1.
    pub fn path(&self, counts: &[f64]) -> Vec<f64> {
        self.fold_path(counts, Vec::with_capacity(self.order.len() + 1), |mut acc, v| {
            acc.push(v);
            acc
        })
    }

    fn fold_path<Acc, F: FnMut(Acc, f64) -> Acc>(
        &self,
        counts: &[f64],
        init: Acc,
        mut fold: F,
    ) -> Acc {
        let k = self.order.len();
        let root_k = (k as f64).sqrt();
        // residuals in scan order
        let resid: Vec<f64> = self
            .order
            .iter()
            .zip(&self.means_scan)
            .map(|(&idx, m)| counts[idx] - m)
            .collect();
        // statistics of the fixed kernels
        let vr: Vec<f64> = self
            .wr_scan
            .iter()
            .map(|w| w.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / root_k)
            .collect();
        let vd: Vec<f64> = self
            .wd_scan
            .iter()
            .map(|w| w.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / root_k)
            .collect();
        let mut acc = init;
        let mut prefix = 0.0;
        for a in 0..=k {
            if a > 0 {
                prefix += self.inv_sqrt_m[a - 1] * resid[a - 1];
            }
            let mut val = prefix / root_k;
            for (j, vrj) in vr.iter().enumerate() {
                val -= self.alpha[j][a] * vrj;
            }
            for (i, vdi) in vd.iter().enumerate() {
                val -= self.beta[i][a] * vdi;
            }
            acc = fold(acc, val);
        }
        acc
    }
}

/// `KS* = max_t |path(t)|`.
pub fn ks_star(path: &[f64]) -> f64 {
    path.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Kolmogorov distribution function
/// `K(y) = 1 - 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 y^2)`, the alternating
/// series truncated once a term falls below 1e-12.
pub fn kolmogorov_cdf(y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..100_000u64 {
        let term = (-2.0 * (j * j) as f64 * y * y).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (1.0 - 2.0 * sum).clamp(0.0, 1.0)
}

/// Finite-K limit law of KS* for a p-parameter fit:
/// `[K(sqrt(p) (y + 0.6 / sqrt(K)))]^p`.
pub fn limit_cdf(y: f64, p: usize, k: usize) -> Result<f64> {
    if y < 0.0 {
        return Err(Error::Domain(format!("KS* value must be nonnegative, got {y}")));
    }
    if p == 0 || k == 0 {
        return Err(Error::Validation("p and K must be positive".into()));
    }
    let pf = p as f64;
    let corrected = y + 0.6 / (k as f64).sqrt();
    Ok(kolmogorov_cdf(pf.sqrt() * corrected).powi(p as i32))
}
