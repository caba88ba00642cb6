//! The projector behind parameter estimation, projected variances, Gaussian
//! tests, and shift computation under contiguous alternatives.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimation::{inv_sqrt_spd, score_kernel, EstimatorSpec};
use crate::grid::Grid;
use crate::measure::{c_function, inner_product, Kernel, MeasureContext};
use crate::models::{bin_means, AltSpec, MeanModel};

/// The linear map `Pi g = g - <g, psi^T> <b, psi^T>^{-1} b` describing the
/// effect of plugging an estimated theta into a divisible statistic.
#[derive(Clone)]
pub struct Projector {
    g: Kernel,
    b_kernels: Vec<Kernel>,
    psi: Vec<Kernel>,
    /// Row vector `<g, psi^T> <b, psi^T>^{-1}`.
    coeffs: Vec<f64>,
    /// `<g, psi^T>`.
    a_row: Vec<f64>,
    /// Transposed inverse of `<b, psi^T>`, for projecting other kernels.
    b_psi_inv_t: DMatrix<f64>,
    sigma2: f64,
    mle: bool,
}

impl Projector {
    pub fn projected(&self) -> Kernel {
        let mut parts = vec![(1.0, self.g.clone())];
        for (c, b) in self.coeffs.iter().zip(&self.b_kernels) {
            parts.push((-c, b.clone()));
        }
        Kernel::linear_combination(format!("proj({})", self.g.name()), parts)
    }

    /// Apply the same projection to an arbitrary kernel `f` (the map is
    /// linear in `f` through `<f, psi^T>`).
    pub fn apply(&self, f: &Kernel, ctx: &MeasureContext) -> Result<Kernel> {
        let p = self.psi.len();
        let mut a = DVector::zeros(p);
        for j in 0..p {
            a[j] = inner_product(f, &self.psi[j], ctx)?;
        }
        let coeffs = &self.b_psi_inv_t * a;
        let mut parts = vec![(1.0, f.clone())];
        for (j, b) in self.b_kernels.iter().enumerate() {
            parts.push((-coeffs[j], b.clone()));
        }
        Ok(Kernel::linear_combination(format!("proj({})", f.name()), parts))
    }

    /// `C(x; Pi g) = C(x; g) - sum_j coeff_j C(x; b_j)`.
    pub fn c_projected(&self, x: f64, m: f64, tol: f64) -> Result<f64> {
        let mut c = c_function(&self.g, x, m, tol)?;
        for (co, b) in self.coeffs.iter().zip(&self.b_kernels) {
            c -= co * c_function(b, x, m, tol)?;
        }
        Ok(c)
    }

    /// Asymptotic variance `sigma^2 = ||Pi g||^2`.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn score_inner_products(&self) -> &[f64] {
        &self.a_row
    }

    pub fn is_mle(&self) -> bool {
        self.mle
    }
}

/// Build the projector for kernel `g` under the estimating equations of
/// `spec`, with all Gram matrices computed once and cached.
pub fn build_projector(
    g: &Kernel,
    spec: &EstimatorSpec,
    model: &MeanModel,
    grid: &Grid,
) -> Result<Projector> {
    let means = bin_means(model, grid)?;
    let ctx = MeasureContext::new(grid.clone(), means)?;
    build_projector_in(g, spec, model, grid, &ctx)
}

pub fn build_projector_in(
    g: &Kernel,
    spec: &EstimatorSpec,
    model: &MeanModel,
    grid: &Grid,
    ctx: &MeasureContext,
) -> Result<Projector> {
    let psi = score_kernel(model, grid)?;
    let b = spec.b_kernels(model, grid)?;
    let p = psi.len();
    let mut b_psi = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            b_psi[(i, j)] = inner_product(&b[i], &psi[j], ctx)?;
        }
    }
    let mut a_row = DVector::zeros(p);
    for j in 0..p {
        a_row[j] = inner_product(g, &psi[j], ctx)?;
    }
    let lu = b_psi.clone().lu();
    if !lu.is_invertible() {
        return Err(Error::Rank("<b, psi^T> is singular".into()));
    }
    // coeffs^T = a_row^T B^{-1}  <=>  B^T coeffs = a_row
    let bt_lu = b_psi.transpose().lu();
    let coeffs = bt_lu
        .solve(&a_row)
        .ok_or_else(|| Error::Rank("<b, psi^T> is singular".into()))?;

    // sigma^2 route 1: direct quadratic expansion
    let g2 = inner_product(g, g, ctx)?;
    let mut g_b = DVector::zeros(p);
    for i in 0..p {
        g_b[i] = inner_product(g, &b[i], ctx)?;
    }
    let mut b_b = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            b_b[(i, j)] = inner_product(&b[i], &b[j], ctx)?;
        }
    }
    let quad = coeffs.dot(&(&b_b * &coeffs));
    let sigma2_direct = g2 - 2.0 * coeffs.dot(&g_b) + quad;

    // sigma^2 route 2 (MLE only): ||g||^2 - sum_j <g, s_j>^2
    let sigma2 = if spec.is_mle() {
        let half = inv_sqrt_spd(&b_psi)?;
        let gs = half * &a_row;
        let alt = g2 - gs.dot(&gs);
        if (alt - sigma2_direct).abs() > 1e-8 * sigma2_direct.abs().max(1.0) {
            return Err(Error::Numeric(format!(
                "projected-variance cross-check failed: {alt} vs {sigma2_direct}"
            )));
        }
        alt
    } else {
        sigma2_direct
    };

    let b_psi_inv_t = b_psi
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Rank("<b, psi^T> is singular".into()))?;
    Ok(Projector {
        g: g.clone(),
        b_kernels: b,
        psi,
        coeffs: coeffs.iter().copied().collect(),
        a_row: a_row.iter().copied().collect(),
        b_psi_inv_t,
        sigma2,
        mle: spec.is_mle(),
    })
}

/// Two-sided (or one-sided) Gaussian p-value for an observed statistic.
pub fn gaussian_test(value: f64, variance: f64, sides: u8) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Domain(format!(
            "degenerate variance {variance} in Gaussian test"
        )));
    }
    let n = Normal::new(0.0, variance.sqrt()).expect("valid normal");
    match sides {
        1 => Ok(1.0 - n.cdf(value)),
        2 => Ok(2.0 * (1.0 - n.cdf(value.abs()))),
        _ => Err(Error::Validation(format!("sides must be 1 or 2, got {sides}"))),
    }
}

/// Limiting shift of the statistic under the contiguous alternative `h`:
/// `(1/sqrt c) int C(x; Pi g or g) h(x) mu(dx)` by bin-sum quadrature.
pub fn shift(
    g: &Kernel,
    alt: &AltSpec,
    model: &MeanModel,
    grid: &Grid,
    estimated: bool,
    spec: &EstimatorSpec,
) -> Result<f64> {
    let means = bin_means(model, grid)?;
    let ctx = MeasureContext::new(grid.clone(), means)?;
    let tol = ctx.truncation_tol();
    let k = grid.k() as f64;
    let mut acc = 0.0;
    if estimated {
        let proj = build_projector_in(g, spec, model, grid, &ctx)?;
        for (x, m) in grid.centers().iter().zip(ctx.means()) {
            acc += proj.c_projected(*x, *m, tol)? * alt.h(*x);
        }
    } else {
        for (x, m) in grid.centers().iter().zip(ctx.means()) {
            acc += c_function(g, *x, *m, tol)? * alt.h(*x);
        }
    }
    Ok(acc / k / model.c.sqrt())
}

/// True iff `C(x; Pi g)` vanishes on every bin: the statistic then has no
/// asymptotic power against any contiguous alternative.
pub fn no_power_check(
    g: &Kernel,
    spec: &EstimatorSpec,
    model: &MeanModel,
    grid: &Grid,
    tol: f64,
) -> Result<bool> {
    let means = bin_means(model, grid)?;
    let ctx = MeasureContext::new(grid.clone(), means)?;
    let proj = build_projector_in(g, spec, model, grid, &ctx)?;
    for (x, m) in grid.centers().iter().zip(ctx.means()) {
        if proj.c_projected(*x, *m, ctx.truncation_tol())?.abs() >= tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::norm_sq;
    use crate::models::{make_direction, project_hhat, DirectionKind, Family};
    use crate::statistics;

    fn const_model(c: f64) -> MeanModel {
        MeanModel::new(Family::Constant, c, vec![], (0.0, 1.0)).unwrap()
    }

    fn exp_model() -> MeanModel {
        MeanModel::new(Family::TruncatedExponential, 5.0, vec![1.5], (0.0, 1.0)).unwrap()
    }

    fn ctx_for(model: &MeanModel, grid: &Grid) -> MeasureContext {
        MeasureContext::new(grid.clone(), bin_means(model, grid).unwrap()).unwrap()
    }

    #[test]
    fn pearson_constant_mle_variance_is_two() {
        let model = const_model(5.0);
        let grid = Grid::new(0.0, 1.0, 50).unwrap();
        let proj =
            build_projector(&statistics::pearson(), &EstimatorSpec::mle(), &model, &grid).unwrap();
        assert!((proj.sigma2() - 2.0).abs() < 1e-10, "{}", proj.sigma2());
    }

    #[test]
    fn projector_annihilates_b() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 40).unwrap();
        let ctx = ctx_for(&model, &grid);
        let psi = score_kernel(&model, &grid).unwrap();
        // g = psi_1: Pi g must vanish identically
        let proj =
            build_projector(&psi[1], &EstimatorSpec::mle(), &model, &grid).unwrap();
        let pk = proj.projected();
        let n = norm_sq(&pk, &ctx).unwrap();
        assert!(n.abs() < 1e-9, "||Pi b||^2 = {n}");
    }

    #[test]
    fn projector_fixes_orthogonal_kernels() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 40).unwrap();
        let ctx = ctx_for(&model, &grid);
        let (_, perp) = statistics::decompose(&statistics::pearson(), &ctx).unwrap();
        let proj = build_projector(&perp, &EstimatorSpec::mle(), &model, &grid).unwrap();
        let pk = proj.projected();
        // Pi g = g within 1e-9 in norm
        let diff = Kernel::linear_combination("diff", vec![(1.0, pk), (-1.0, perp.clone())]);
        let n = norm_sq(&diff, &ctx).unwrap();
        assert!(n.abs() < 1e-9, "||Pi g - g||^2 = {n}");
    }

    #[test]
    fn projection_is_idempotent_and_score_orthogonal() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 40).unwrap();
        let ctx = ctx_for(&model, &grid);
        let psi = score_kernel(&model, &grid).unwrap();
        for (name, spec) in [
            ("mle", EstimatorSpec::mle()),
            ("ls", EstimatorSpec::least_squares()),
        ] {
            for g in [statistics::pearson(), statistics::spectral(1), statistics::cash()] {
                let proj = build_projector(&g, &spec, &model, &grid).unwrap();
                let pg = proj.projected();
                // <Pi g, psi_j> = 0
                for (j, p) in psi.iter().enumerate() {
                    let ip = inner_product(&pg, p, &ctx).unwrap();
                    assert!(ip.abs() < 1e-9, "{name} {} <Pi g, psi_{j}> = {ip}", g.name());
                }
                // Pi Pi g = Pi g: norms agree within 1e-9
                let proj2 = build_projector(&pg, &spec, &model, &grid).unwrap();
                let n1 = norm_sq(&pg, &ctx).unwrap();
                let n2 = norm_sq(&proj2.projected(), &ctx).unwrap();
                assert!((n1 - n2).abs() < 1e-9, "{name} {}: {n1} vs {n2}", g.name());
            }
        }
    }

    #[test]
    fn mle_projector_is_self_adjoint() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 30).unwrap();
        let ctx = ctx_for(&model, &grid);
        let spec = EstimatorSpec::mle();
        let kernels = statistics::catalogue();
        for a in &kernels {
            for b in &kernels {
                let pa = build_projector(a, &spec, &model, &grid).unwrap().projected();
                let pb = build_projector(b, &spec, &model, &grid).unwrap().projected();
                let lhs = inner_product(&pa, &pb, &ctx).unwrap();
                let rhs = inner_product(a, &pb, &ctx).unwrap();
                assert!(
                    (lhs - rhs).abs() < 1e-9,
                    "<Pi {}, Pi {}> = {lhs} vs <., .> = {rhs}",
                    a.name(),
                    b.name()
                );
            }
        }
    }

    #[test]
    fn gaussian_test_examples() {
        // the observed Pearson value from the constant-background analysis
        let p = gaussian_test(-0.852, 2.0, 2).unwrap();
        assert!((p - 0.547).abs() < 5e-4, "p = {p}");
        assert_eq!(gaussian_test(0.0, 1.7, 2).unwrap(), 1.0);
        let q = gaussian_test(1.96, 1.0, 2).unwrap();
        assert!((q - 0.05).abs() < 1e-3);
        assert!(gaussian_test(1.0, 0.0, 2).is_err());
        assert!(gaussian_test(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn shift_examples_one_and_two() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 100).unwrap();
        let spec = EstimatorSpec::mle();
        let g = statistics::pearson();

        let h1 = make_direction(&DirectionKind::GammaShape, &model).unwrap();
        let s1 = shift(&g, &h1, &model, &grid, true, &spec).unwrap();
        assert!((s1 - (-0.014)).abs() < 0.002, "shift I = {s1}");

        let h2 = make_direction(&DirectionKind::GaussianBump { x0: 0.5, sigma: 0.05 }, &model)
            .unwrap();
        let s2 = shift(&g, &h2, &model, &grid, true, &spec).unwrap();
        assert!((s2 - (-0.019)).abs() < 0.002, "shift II = {s2}");

        // sigma of the projected Pearson statistic under this null
        let proj = build_projector(&g, &spec, &model, &grid).unwrap();
        let sigma = proj.sigma2().sqrt();
        assert!((sigma - 1.406).abs() < 0.01 || (sigma - 1.416).abs() < 0.01, "sigma = {sigma}");
    }

    #[test]
    fn shift_agrees_on_h_and_hhat() {
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 100).unwrap();
        let spec = EstimatorSpec::mle();
        for g in [statistics::pearson(), statistics::spectral(1)] {
            let h = make_direction(&DirectionKind::GammaShape, &model).unwrap();
            let hhat = project_hhat(&h, &model).unwrap();
            let s_h = shift(&g, &h, &model, &grid, true, &spec).unwrap();
            let s_hhat = shift(&g, &hhat, &model, &grid, true, &spec).unwrap();
            assert!(
                (s_h - s_hhat).abs() < 1e-8,
                "{}: {s_h} vs {s_hhat}",
                g.name()
            );
        }
    }

    #[test]
    fn no_power_cases() {
        let grid = Grid::new(0.0, 1.0, 60).unwrap();
        let spec = EstimatorSpec::mle();
        let cm = const_model(5.0);
        assert!(no_power_check(&statistics::pearson(), &spec, &cm, &grid, 1e-9).unwrap());
        assert!(no_power_check(&statistics::cash(), &spec, &cm, &grid, 1e-9).unwrap());
        let em = exp_model();
        assert!(!no_power_check(&statistics::weighted_linear(), &spec, &em, &grid, 1e-9).unwrap());
    }

    #[test]
    fn shift_of_g_equals_shift_of_parallel_part() {
        // C(x; g) = C(x; g_par), so the known-theta shifts coincide
        let model = exp_model();
        let grid = Grid::new(0.0, 1.0, 80).unwrap();
        let ctx = ctx_for(&model, &grid);
        let spec = EstimatorSpec::mle();
        let h = make_direction(&DirectionKind::GammaShape, &model).unwrap();
        for g in [statistics::pearson(), statistics::spectral(1), statistics::cash()] {
            let (par, _) = statistics::decompose(&g, &ctx).unwrap();
            let s_g = shift(&g, &h, &model, &grid, false, &spec).unwrap();
            let s_par = shift(&par, &h, &model, &grid, false, &spec).unwrap();
            assert!((s_g - s_par).abs() < 1e-8, "{}: {s_g} vs {s_par}", g.name());
        }
    }
}
