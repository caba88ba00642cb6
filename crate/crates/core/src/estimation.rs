//! Estimating equations: score and least-squares kernels, the optimal
//! weight, Newton solvers, Fisher information, and the orthonormalized score.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{BinnedCounts, Grid};
use crate::measure::{
    c_function, inner_product, BinFn, Kernel, MeasureContext, DEFAULT_TRUNCATION_TOL,
};
use crate::models::{bin_means, dm_dtheta, MeanModel};

/// How the estimating-equation kernels `b_theta` are chosen.
#[derive(Clone)]
pub enum EstimatorMethod {
    /// Maximum likelihood: `b = psi`.
    Mle,
    /// Least squares: `b = -2 mdot (z - m)`.
    LeastSquares,
    /// Minimum-variance weighting of a user kernel: `b = gamma_theta g`.
    OptimalGamma(Kernel),
    /// Arbitrary weights on a user kernel: `b_j = omega_j(x) g`.
    Weighted { base: Kernel, omega: Vec<BinFn> },
}

impl std::fmt::Debug for EstimatorMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorMethod::Mle => write!(f, "mle"),
            EstimatorMethod::LeastSquares => write!(f, "ls"),
            EstimatorMethod::OptimalGamma(g) => write!(f, "gamma:{}", g.name()),
            EstimatorMethod::Weighted { base, .. } => write!(f, "weighted:{}", base.name()),
        }
    }
}

/// Estimator specification; parse from `mle | ls | gamma:<kernel>`.
#[derive(Debug, Clone)]
pub struct EstimatorSpec {
    pub method: EstimatorMethod,
}

impl EstimatorSpec {
    pub fn mle() -> Self {
        EstimatorSpec { method: EstimatorMethod::Mle }
    }

    pub fn least_squares() -> Self {
        EstimatorSpec { method: EstimatorMethod::LeastSquares }
    }

    pub fn optimal_gamma(g: Kernel) -> Self {
        EstimatorSpec { method: EstimatorMethod::OptimalGamma(g) }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Self::mle()),
            "ls" => Ok(Self::least_squares()),
            _ => {
                if let Some(kname) = s.strip_prefix("gamma:") {
                    Ok(Self::optimal_gamma(crate::statistics::make_kernel(kname)?))
                } else {
                    Err(Error::Validation(format!("unknown estimator `{s}`")))
                }
            }
        }
    }

    pub fn is_mle(&self) -> bool {
        matches!(self.method, EstimatorMethod::Mle)
    }

    /// The estimating kernels at the model's current theta.
    pub fn b_kernels(&self, model: &MeanModel, grid: &Grid) -> Result<Vec<Kernel>> {
        match &self.method {
            EstimatorMethod::Mle => score_kernel(model, grid),
            EstimatorMethod::LeastSquares => least_squares_kernel(model, grid),
            EstimatorMethod::OptimalGamma(g) => {
                let gammas = optimal_gamma(g, model, grid)?;
                Ok(gammas
                    .into_iter()
                    .map(|w| crate::statistics::weighted(format!("gamma*{}", g.name()), w, g))
                    .collect())
            }
            EstimatorMethod::Weighted { base, omega } => Ok(omega
                .iter()
                .map(|w| {
                    crate::statistics::weighted(
                        format!("omega*{}", base.name()),
                        w.clone(),
                        base,
                    )
                })
                .collect()),
        }
    }
}

/// Per-bin weight table turned into a `(x, m) -> w` closure via the grid.
fn weight_from_table(grid: &Grid, table: Vec<f64>) -> BinFn {
    let grid = grid.clone();
    let table = Arc::new(table);
    Arc::new(move |x, _m| table[grid.index_of(x)])
}

/// The score kernels `psi_j(x, z) = (mdot_j(x) / m(x)) (z - m(x))`.
pub fn score_kernel(model: &MeanModel, grid: &Grid) -> Result<Vec<Kernel>> {
    let means = bin_means(model, grid)?;
    let dm = dm_dtheta(model, grid)?;
    let p = model.p();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let table: Vec<f64> = (0..grid.k()).map(|k| dm[k][j] / means[k]).collect();
        let w = weight_from_table(grid, table);
        let weval = w.clone();
        let wc = w.clone();
        out.push(
            Kernel::new(
                format!("psi_{j}"),
                Arc::new(move |x, z, m| weval(x, m) * (z as f64 - m)),
            )
            .with_linear_weight(w)
            .with_known_c(Arc::new(move |x, m| wc(x, m) * m)),
        );
    }
    Ok(out)
}

/// Least-squares kernels `b_j(x, z) = -2 mdot_j(x) (z - m(x))`.
pub fn least_squares_kernel(model: &MeanModel, grid: &Grid) -> Result<Vec<Kernel>> {
    let dm = dm_dtheta(model, grid)?;
    let p = model.p();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let table: Vec<f64> = (0..grid.k()).map(|k| -2.0 * dm[k][j]).collect();
        let w = weight_from_table(grid, table);
        let weval = w.clone();
        let wc = w.clone();
        out.push(
            Kernel::new(
                format!("ls_{j}"),
                Arc::new(move |x, z, m| weval(x, m) * (z as f64 - m)),
            )
            .with_linear_weight(w)
            .with_known_c(Arc::new(move |x, m| wc(x, m) * m)),
        );
    }
    Ok(out)
}

/// The minimum-variance weight `gamma_j(x) = E[g psi_j] / E[g^2]` per bin.
///
/// Returns one weight function per parameter; `gamma_j * g` are the optimal
/// estimating kernels for the family of `omega g` estimators.
pub fn optimal_gamma(g: &Kernel, model: &MeanModel, grid: &Grid) -> Result<Vec<BinFn>> {
    let means = bin_means(model, grid)?;
    let dm = dm_dtheta(model, grid)?;
    let p = model.p();
    let tol = DEFAULT_TRUNCATION_TOL;
    // E[g psi_j] = (mdot_j / m) C(x; g); E[g^2] by truncated sums
    let mut tables: Vec<Vec<f64>> = vec![Vec::with_capacity(grid.k()); p];
    for k in 0..grid.k() {
        let x = grid.center(k);
        let m = means[k];
        let c = c_function(g, x, m, tol)?;
        let e2 = crate::measure::expect(g, x, m, 2, tol)?;
        if e2 <= 0.0 {
            return Err(Error::Numeric(format!(
                "degenerate kernel: E[g^2] = {e2} at bin {k}"
            )));
        }
        for j in 0..p {
            tables[j].push((dm[k][j] / m) * c / e2);
        }
    }
    Ok(tables
        .into_iter()
        .map(|t| weight_from_table(grid, t))
        .collect())
}

/// A fitted model with the cached Gram matrices at theta-hat.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MeanModel,
    pub theta_hat: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Residual `max_j |v(b_j)|` at the returned theta.
    pub residual: f64,
    /// `<b, psi^T>` at theta-hat.
    pub gram_b_psi: DMatrix<f64>,
    /// Fisher information `<psi, psi^T>` at theta-hat.
    pub gram_psi_psi: DMatrix<f64>,
}

fn gram(
    a: &[Kernel],
    b: &[Kernel],
    ctx: &MeasureContext,
) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(a.len(), b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            m[(i, j)] = inner_product(&a[i], &b[j], ctx)?;
        }
    }
    Ok(m)
}

/// Fisher information matrix `<psi, psi^T>` at the model's theta.
pub fn fisher_information(model: &MeanModel, grid: &Grid) -> Result<DMatrix<f64>> {
    let means = bin_means(model, grid)?;
    let ctx = MeasureContext::new(grid.clone(), means)?;
    let psi = score_kernel(model, grid)?;
    gram(&psi, &psi, &ctx)
}

/// Inverse square root of a symmetric positive-definite matrix via its
/// eigendecomposition; eigenvalues below 1e-12 raise a rank error.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let p = m.nrows();
    let mut d = DMatrix::zeros(p, p);
    for i in 0..p {
        let ev = sym.eigenvalues[i];
        if ev < 1e-12 {
            return Err(Error::Rank(format!(
                "matrix not positive definite: eigenvalue {ev:.3e}"
            )));
        }
        d[(i, i)] = 1.0 / ev.sqrt();
    }
    Ok(&sym.eigenvectors * d * sym.eigenvectors.transpose())
}

/// Orthonormalized score `s = <psi, psi^T>^{-1/2} psi` as kernels.
pub fn orthonormal_score(model: &MeanModel, grid: &Grid) -> Result<Vec<Kernel>> {
    let psi = score_kernel(model, grid)?;
    let info = fisher_information(model, grid)?;
    let half = inv_sqrt_spd(&info)?;
    let p = psi.len();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let parts: Vec<(f64, Kernel)> =
            (0..p).map(|i| (half[(j, i)], psi[i].clone())).collect();
        out.push(Kernel::linear_combination(format!("s_{j}"), parts));
    }
    Ok(out)
}

/// The estimating-equation values `F_j = v_{theta,K}(b_j)` on the data.
fn equation_values(
    b: &[Kernel],
    data: &BinnedCounts,
    ctx: &MeasureContext,
) -> Result<DVector<f64>> {
    let mut f = DVector::zeros(b.len());
    for (j, bk) in b.iter().enumerate() {
        f[j] = crate::measure::evaluate_statistic(bk, data, ctx)?;
    }
    Ok(f)
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;

/// Solve `v_{theta,K}(b_theta) = 0` by damped Newton iteration with the
/// Jacobian `-sqrt(K) <b, psi^T>`. Non-convergence is flagged on the result,
/// not silently discarded. Falls back to bisection for one-parameter models.
pub fn solve(
    spec: &EstimatorSpec,
    model: &MeanModel,
    data: &BinnedCounts,
    grid: &Grid,
    init: Option<Vec<f64>>,
) -> Result<FitResult> {
    data.check_grid(grid)?;
    let p = model.p();
    let mut theta = match init {
        Some(t) => {
            if t.len() != p {
                return Err(Error::Validation(format!(
                    "init length {} does not match p = {}",
                    t.len(),
                    p
                )));
            }
            t
        }
        None => moment_init(model, data, grid)?,
    };
    if !model.admissible(&theta) {
        return Err(Error::Validation(format!(
            "initial theta {theta:?} not admissible"
        )));
    }

    let root_k = (grid.k() as f64).sqrt();
    let mut iterations = 0;
    let mut converged = false;

    let mut cur = model.with_theta(&theta)?;
    let mut ctx = MeasureContext::new(grid.clone(), bin_means(&cur, grid)?)?;
    let mut b = spec.b_kernels(&cur, grid)?;
    let mut f = equation_values(&b, data, &ctx)?;

    for iter in 0..NEWTON_MAX_ITER {
        iterations = iter + 1;
        let f_norm = f.amax();
        if f_norm < NEWTON_TOL {
            converged = true;
            break;
        }
        let psi = if spec.is_mle() {
            b.clone()
        } else {
            score_kernel(&cur, grid)?
        };
        let b_psi = gram(&b, &psi, &ctx)?;
        let lu = b_psi.lu();
        let Some(delta) = lu.solve(&f) else {
            return Err(Error::Rank("singular <b, psi^T> Jacobian".into()));
        };
        // Newton step theta <- theta + B^{-1} F / sqrt(K), damped until the
        // residual shrinks; accepted state carries into the next iteration
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = theta
                .iter()
                .enumerate()
                .map(|(j, t)| t + step * delta[j] / root_k)
                .collect();
            if let Ok(cand_model) = model.with_theta(&cand) {
                if let Ok(cand_means) = bin_means(&cand_model, grid) {
                    let cand_ctx = MeasureContext::new(grid.clone(), cand_means)?;
                    let cand_b = spec.b_kernels(&cand_model, grid)?;
                    if let Ok(cf) = equation_values(&cand_b, data, &cand_ctx) {
                        if cf.amax() < f_norm || step < 1e-4 {
                            theta = cand;
                            cur = cand_model;
                            ctx = cand_ctx;
                            b = cand_b;
                            f = cf;
                            accepted = true;
                            break;
                        }
                    }
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let mut last_norm = f.amax();

    if !converged && p == 1 {
        if let Some(t) = bisect_single(spec, model, data, grid) {
            theta = vec![t];
            converged = true;
            let cur = model.with_theta(&theta)?;
            let means = bin_means(&cur, grid)?;
            let ctx = MeasureContext::new(grid.clone(), means)?;
            let b = spec.b_kernels(&cur, grid)?;
            last_norm = equation_values(&b, data, &ctx)?.amax();
        }
    }

    let fitted = model.with_theta(&theta)?;
    let means = bin_means(&fitted, grid)?;
    let ctx = MeasureContext::new(grid.clone(), means)?;
    let b = spec.b_kernels(&fitted, grid)?;
    let psi = score_kernel(&fitted, grid)?;
    let gram_b_psi = gram(&b, &psi, &ctx)?;
    let gram_psi_psi = if spec.is_mle() {
        gram_b_psi.clone()
    } else {
        gram(&psi, &psi, &ctx)?
    };
    Ok(FitResult {
        model: fitted,
        theta_hat: theta,
        iterations,
        converged,
        residual: last_norm,
        gram_b_psi,
        gram_psi_psi,
    })
}

/// Method-of-moments starting point: mean count for c, first-moment match
/// for the leading shape parameter.
pub fn moment_init(model: &MeanModel, data: &BinnedCounts, grid: &Grid) -> Result<Vec<f64>> {
    let total = data.total() as f64;
    let c0 = (total / grid.k() as f64).max(1e-6);
    let mut theta = model.theta();
    theta[0] = c0;
    if model.p() > 1 && total > 0.0 {
        let xbar = grid
            .centers()
            .iter()
            .zip(&data.0)
            .map(|(x, n)| x * *n as f64)
            .sum::<f64>()
            / total;
        // bisect the first shape parameter to match E_Lambda[x] = xbar
        let lambda_mean = |beta0: f64| -> Option<f64> {
            let mut t = theta.clone();
            t[1] = beta0;
            let m = model.with_theta(&t).ok()?;
            Some(m.integrate_lambda(|x| x, &[]))
        };
        if let Some(b) = bisect_monotone(lambda_mean, xbar, &beta_bracket(model)) {
            theta[1] = b;
        }
    }
    Ok(theta)
}

fn beta_bracket(model: &MeanModel) -> (f64, f64) {
    use crate::models::Family;
    let (lo, hi) = model.domain;
    match model.family {
        Family::TruncatedExponential => (1e-3, 60.0),
        Family::Linear | Family::PiecewiseLinear { .. } => {
            let half = 0.5 * (hi - lo);
            (-0.999 / half, 0.999 / half)
        }
        Family::TruncatedNormal { .. } => (lo - (hi - lo), hi + (hi - lo)),
        Family::PowerLaw | Family::BrokenPowerLaw { .. } => (-10.0, 12.0),
        Family::Constant => (0.0, 0.0),
    }
}

fn bisect_monotone<F: Fn(f64) -> Option<f64>>(
    f: F,
    target: f64,
    bracket: &(f64, f64),
) -> Option<f64> {
    let (mut a, mut b) = *bracket;
    let fa = f(a)? - target;
    let fb = f(b)? - target;
    if fa * fb > 0.0 {
        return None;
    }
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        let fm = f(mid)? - target;
        if fm == 0.0 {
            return Some(mid);
        }
        if fa * fm <= 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    Some(0.5 * (a + b))
}

/// Bracketed bisection on the single estimating equation for p = 1 models.
fn bisect_single(
    spec: &EstimatorSpec,
    model: &MeanModel,
    data: &BinnedCounts,
    grid: &Grid,
) -> Option<f64> {
    let eq = |c: f64| -> Option<f64> {
        let m = model.with_theta(&[c]).ok()?;
        let means = bin_means(&m, grid).ok()?;
        let ctx = MeasureContext::new(grid.clone(), means).ok()?;
        let b = spec.b_kernels(&m, grid).ok()?;
        Some(equation_values(&b, data, &ctx).ok()?[0])
    };
    let mean = (data.total() as f64 / grid.k() as f64).max(1e-9);
    let (mut lo, mut hi) = (mean * 1e-3, mean * 1e3 + 1.0);
    let flo = eq(lo)?;
    let fhi = eq(hi)?;
    if flo * fhi > 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = eq(mid)?;
        if fm.abs() < NEWTON_TOL {
            return Some(mid);
        }
        if flo * fm <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Family;
    use crate::statistics;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_model(c: f64) -> MeanModel {
        MeanModel::new(Family::Constant, c, vec![], (0.0, 1.0)).unwrap()
    }

    fn exp_model() -> MeanModel {
        MeanModel::new(Family::TruncatedExponential, 5.0, vec![1.5], (0.0, 1.0)).unwrap()
    }

    #[test]
    fn constant_score_is_centered_linear() {
        let model = const_model(5.0);
        let grid = Grid::new(0.0, 1.0, 10).unwrap();
        let psi = score_kernel(&model, &grid).unwrap();
        assert_eq!(psi.len(), 1);
        // psi = (z - c) / c
        for z in [0u64, 3, 8] {
            assert!((psi[0].eval(0.35, z, 5.0) - (z as f64 - 5.0) / 5.0).abs() < 1e-12);
        }
        let means = bin_means(&model, &grid).unwrap();
        let ctx = MeasureContext::new(grid.clone(), means).unwrap();
        let pp = inner_product(&psi[0], &psi[0], &ctx).unwrap();
        assert!((pp - 0.2).abs() < 1e-12);
    }

    #[test]
    fn truncexp_fisher_matches_numeric_oracle() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 50).unwrap();
        let info = fisher_information(&model, &grid).unwrap();
        // oracle: finite-difference score built from numerically differentiated
        // bin means, with the expectation sum coded directly
        let means = bin_means(&model, &grid).unwrap();
        let step = 1e-6;
        let mut dm_fd = vec![vec![0.0; 2]; 50];
        for j in 0..2 {
            let mut tp = model.theta();
            let mut tm = model.theta();
            tp[j] += step;
            tm[j] -= step;
            let mp = bin_means(&model.with_theta(&tp).unwrap(), &grid).unwrap();
            let mm = bin_means(&model.with_theta(&tm).unwrap(), &grid).unwrap();
            for k in 0..50 {
                dm_fd[k][j] = (mp[k] - mm[k]) / (2.0 * step);
            }
        }
        // E[psi_i psi_j] at one bin = (dm_i dm_j / m^2) Var(nu) = dm_i dm_j / m
        for i in 0..2 {
            for j in 0..2 {
                let oracle: f64 = (0..50)
                    .map(|k| dm_fd[k][i] * dm_fd[k][j] / means[k])
                    .sum::<f64>()
                    / 50.0;
                assert!(
                    (info[(i, j)] - oracle).abs() < 1e-5 * oracle.abs().max(1.0),
                    "({i},{j}): {} vs {oracle}",
                    info[(i, j)]
                );
            }
        }
    }

    #[test]
    fn least_squares_is_centered_and_collinear_for_constant() {
        let model = const_model(4.0);
        let grid = Grid::new(0.0, 1.0, 10).unwrap();
        let b = least_squares_kernel(&model, &grid).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        let ctx = MeasureContext::new(grid.clone(), means).unwrap();
        let e = crate::measure::expect(&b[0], 0.15, 4.0, 1, 1e-14).unwrap();
        assert!(e.abs() < 1e-10);
        // proportional to (z - c): same root as the MLE
        let r = b[0].eval(0.15, 7, 4.0) / (7.0 - 4.0);
        for z in [0u64, 2, 9] {
            assert!((b[0].eval(0.15, z, 4.0) - r * (z as f64 - 4.0)).abs() < 1e-12);
        }
        let _ = ctx;
    }

    #[test]
    fn least_squares_minimizes_sum_of_squares() {
        // grid-search oracle on fixed small data
        let model = const_model(3.0);
        let grid = Grid::new(0.0, 1.0, 6).unwrap();
        let data = BinnedCounts(vec![2, 4, 1, 3, 5, 2]);
        let fit = solve(&EstimatorSpec::least_squares(), &model, &data, &grid, None).unwrap();
        assert!(fit.converged);
        let sse = |c: f64| -> f64 {
            data.0.iter().map(|&z| (z as f64 - c).powi(2)).sum()
        };
        let mut best = (f64::INFINITY, 0.0);
        let mut c = 0.5;
        while c < 8.0 {
            let v = sse(c);
            if v < best.0 {
                best = (v, c);
            }
            c += 1e-4;
        }
        assert!((fit.theta_hat[0] - best.1).abs() < 1e-3);
    }

    #[test]
    fn gamma_linear_recovers_score() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 25).unwrap();
        let g = statistics::linear();
        let gammas = optimal_gamma(&g, &model, &grid).unwrap();
        let psi = score_kernel(&model, &grid).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        for k in [0usize, 7, 24] {
            let x = grid.center(k);
            let m = means[k];
            for (j, gw) in gammas.iter().enumerate() {
                let got = gw(x, m) * g.eval(x, 9, m);
                let want = psi[j].eval(x, 9, m);
                assert!((got - want).abs() < 1e-10, "bin {k} par {j}");
            }
        }
    }

    #[test]
    fn gamma_pearson_weight() {
        // gamma(x) = mdot / (2m + 1) for the centered Pearson kernel
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 25).unwrap();
        let g = statistics::pearson();
        let gammas = optimal_gamma(&g, &model, &grid).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        let dm = dm_dtheta(&model, &grid).unwrap();
        for k in [0usize, 11, 24] {
            let x = grid.center(k);
            let m = means[k];
            for j in 0..2 {
                let want = dm[k][j] / (2.0 * m + 1.0);
                let got = gammas[j](x, m);
                assert!(
                    (got - want).abs() < 1e-9 * want.abs().max(1.0),
                    "bin {k} par {j}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn gamma_empty_boxes_matches_bernoulli_form() {
        // |gamma(x)| = mdot / (1 - p(0|m)); the literal E[g psi]/E[g^2] value
        // carries the Bernoulli-score minus sign.
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 25).unwrap();
        let g = statistics::empty_boxes();
        let gammas = optimal_gamma(&g, &model, &grid).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        let dm = dm_dtheta(&model, &grid).unwrap();
        for k in [0usize, 12, 24] {
            let x = grid.center(k);
            let m = means[k];
            for j in 0..2 {
                let bernoulli = dm[k][j] / (1.0 - (-m).exp());
                let got = gammas[j](x, m);
                assert!(
                    (got + bernoulli).abs() < 1e-9 * bernoulli.abs().max(1.0),
                    "bin {k} par {j}: {got} vs -{bernoulli}"
                );
            }
        }
    }

    #[test]
    fn constant_mle_is_mean_count() {
        let model = const_model(2.0);
        let grid = Grid::new(0.0, 1.0, 8).unwrap();
        let data = BinnedCounts(vec![3, 0, 2, 5, 1, 1, 4, 0]);
        let fit = solve(&EstimatorSpec::mle(), &model, &data, &grid, None).unwrap();
        assert!(fit.converged);
        let mean = data.total() as f64 / 8.0;
        assert!((fit.theta_hat[0] - mean).abs() < 1e-12);
        assert!(fit.residual < 1e-8);
    }

    #[test]
    fn truncexp_mle_matches_grid_search() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 200).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = crate::models::sample_counts(&means, &mut rng);
        let fit = solve(&EstimatorSpec::mle(), &model, &data, &grid, None).unwrap();
        assert!(fit.converged, "residual {}", fit.residual);
        // log-likelihood grid-search oracle over (c, beta)
        let loglik = |c: f64, b: f64| -> f64 {
            let m = MeanModel::new(Family::TruncatedExponential, c, vec![b], (0.0, 1.0)).unwrap();
            let means = bin_means(&m, &grid).unwrap();
            means
                .iter()
                .zip(&data.0)
                .map(|(mk, z)| *z as f64 * mk.ln() - mk)
                .sum()
        };
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        let (c_hat, b_hat) = (fit.theta_hat[0], fit.theta_hat[1]);
        let mut c = c_hat - 0.02;
        while c <= c_hat + 0.02 {
            let mut b = b_hat - 0.05;
            while b <= b_hat + 0.05 {
                let v = loglik(c, b);
                if v > best.0 {
                    best = (v, c, b);
                }
                b += 1e-3;
            }
            c += 5e-4;
        }
        assert!((c_hat - best.1).abs() < 1e-3, "{c_hat} vs {}", best.1);
        assert!((b_hat - best.2).abs() < 2e-3, "{b_hat} vs {}", best.2);
    }

    #[test]
    fn estimating_equations_vanish_at_fit() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 100).unwrap();
        let means = bin_means(&model, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = crate::models::sample_counts(&means, &mut rng);
        for spec in [
            EstimatorSpec::mle(),
            EstimatorSpec::least_squares(),
            EstimatorSpec::optimal_gamma(statistics::empty_boxes()),
        ] {
            let fit = solve(&spec, &model, &data, &grid, None).unwrap();
            assert!(fit.converged, "{spec:?}");
            assert!(fit.residual < 1e-8, "{spec:?}: residual {}", fit.residual);
        }
    }

    #[test]
    fn orthonormal_score_is_orthonormal() {
        for model in [exp_model(),
            MeanModel::new(Family::TruncatedNormal { variance: Some(0.04) }, 5.0, vec![0.5], (0.0, 1.0)).unwrap()]
        {
            let grid = Grid::new(0.0, 1.0, 60).unwrap();
            let s = orthonormal_score(&model, &grid).unwrap();
            let means = bin_means(&model, &grid).unwrap();
            let ctx = MeasureContext::new(grid.clone(), means).unwrap();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    let v = inner_product(&s[i], &s[j], &ctx).unwrap();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((v - want).abs() < 1e-9, "({i},{j}): {v}");
                }
            }
        }
    }

    #[test]
    fn bad_init_rejected() {
        let model = const_model(2.0);
        let grid = Grid::new(0.0, 1.0, 4).unwrap();
        let data = BinnedCounts(vec![1, 2, 1, 0]);
        assert!(solve(&EstimatorSpec::mle(), &model, &data, &grid, Some(vec![-1.0])).is_err());
        assert!(solve(&EstimatorSpec::mle(), &model, &data, &grid, Some(vec![1.0, 2.0])).is_err());
    }
}
