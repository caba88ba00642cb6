//! Python bindings for the divstat goodness-of-fit library.

// the pymethods macro expansion triggers this lint on its own conversions
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pyfunction;

use divstat::dfree;
use divstat::error::Error;
use divstat::estimation::{solve, EstimatorSpec};
use divstat::grid::BinnedCounts;
use divstat::harness::{
    analyze_spectrum, parse_model_spec, power_study, AnalysisConfig, BootstrapKind, RunConfig,
    TestKind,
};
use divstat::measure::{evaluate_statistic, MeasureContext};
use divstat::models::{alt_means, bin_means, make_direction, sample_counts, DirectionKind};
use divstat::statistics::make_kernel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err_to_py(e: Error) -> PyErr {
    match e {
        Error::Validation(_) | Error::Domain(_) | Error::Ingest { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// An equal-width binning of a one-dimensional domain.
#[pyclass(name = "Grid")]
#[derive(Clone)]
struct PyGrid {
    inner: divstat::Grid,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(lo: f64, hi: f64, k: usize) -> PyResult<Self> {
        Ok(PyGrid { inner: divstat::Grid::new(lo, hi, k).map_err(err_to_py)? })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn lo(&self) -> f64 {
        self.inner.lo()
    }

    #[getter]
    fn hi(&self) -> f64 {
        self.inner.hi()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    #[getter]
    fn centers(&self) -> Vec<f64> {
        self.inner.centers().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(lo={}, hi={}, k={})",
            self.inner.lo(),
            self.inner.hi(),
            self.inner.k()
        )
    }
}

/// A parametric mean model built from an inline spec string, e.g.
/// `constant:c=5`, `truncexp:rate=1.5,c=5`, `truncnorm:mean=0.5,var=0.04,c=5`.
#[pyclass(name = "Model")]
#[derive(Clone)]
struct PyModel {
    inner: divstat::MeanModel,
}

fn direction_from_kwargs(
    kind: &str,
    x0: Option<f64>,
    sigma: Option<f64>,
    cutpoint: Option<f64>,
) -> PyResult<DirectionKind> {
    match kind {
        "gamma_shape" => Ok(DirectionKind::GammaShape),
        "gaussian_bump" => Ok(DirectionKind::GaussianBump {
            x0: x0.ok_or_else(|| PyValueError::new_err("gaussian_bump needs x0="))?,
            sigma: sigma.ok_or_else(|| PyValueError::new_err("gaussian_bump needs sigma="))?,
        }),
        "broken_power_law" => Ok(DirectionKind::BrokenPowerLaw {
            cutpoint: cutpoint
                .ok_or_else(|| PyValueError::new_err("broken_power_law needs cutpoint="))?,
        }),
        "variance_perturbation" => Ok(DirectionKind::VariancePerturbation),
        other => Err(PyValueError::new_err(format!("unknown direction `{other}`"))),
    }
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(spec: &str, lo: f64, hi: f64) -> PyResult<Self> {
        Ok(PyModel { inner: parse_model_spec(spec, (lo, hi)).map_err(err_to_py)? })
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    fn density(&self, x: f64) -> f64 {
        self.inner.density(x)
    }

    /// Expected counts per bin, summing to c * K.
    fn bin_means(&self, grid: &PyGrid) -> PyResult<Vec<f64>> {
        bin_means(&self.inner, &grid.inner).map_err(err_to_py)
    }

    /// One Poisson sample of the binned counts; deterministic in the seed.
    fn sample(&self, grid: &PyGrid, seed: u64) -> PyResult<Vec<u64>> {
        let means = bin_means(&self.inner, &grid.inner).map_err(err_to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(sample_counts(&means, &mut rng).0)
    }

    /// Per-bin means under a contiguous alternative direction.
    #[pyo3(signature = (grid, kind, strength=1.0, x0=None, sigma=None, cutpoint=None))]
    fn alt_means(
        &self,
        grid: &PyGrid,
        kind: &str,
        strength: f64,
        x0: Option<f64>,
        sigma: Option<f64>,
        cutpoint: Option<f64>,
    ) -> PyResult<Vec<f64>> {
        let dk = direction_from_kwargs(kind, x0, sigma, cutpoint)?;
        let alt = make_direction(&dk, &self.inner)
            .map_err(err_to_py)?
            .with_strength(strength);
        alt_means(&self.inner, &alt, &grid.inner).map_err(err_to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, theta={:?})", self.inner.family, self.inner.theta())
    }
}

/// Fit the model to observed counts; returns a dict with the estimate.
#[pyfunction]
#[pyo3(signature = (model, grid, counts, estimator="mle"))]
fn fit<'py>(
    py: Python<'py>,
    model: &PyModel,
    grid: &PyGrid,
    counts: Vec<u64>,
    estimator: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = EstimatorSpec::parse(estimator).map_err(err_to_py)?;
    let data = BinnedCounts(counts);
    let fit = solve(&spec, &model.inner, &data, &grid.inner, None).map_err(err_to_py)?;
    let out = PyDict::new_bound(py);
    out.set_item("theta_hat", fit.theta_hat)?;
    out.set_item("converged", fit.converged)?;
    out.set_item("iterations", fit.iterations)?;
    out.set_item("residual", fit.residual)?;
    Ok(out)
}

/// The divisible statistic `(1/sqrt K) sum_k g(x_k, nu_k, m_k)` at the
/// model's own theta.
#[pyfunction]
fn statistic(kernel: &str, model: &PyModel, grid: &PyGrid, counts: Vec<u64>) -> PyResult<f64> {
    let k = make_kernel(kernel).map_err(err_to_py)?;
    let means = bin_means(&model.inner, &grid.inner).map_err(err_to_py)?;
    let ctx = MeasureContext::new(grid.inner.clone(), means).map_err(err_to_py)?;
    evaluate_statistic(&k, &BinnedCounts(counts), &ctx).map_err(err_to_py)
}

/// Full goodness-of-fit analysis: fit theta, run the requested test.
///
/// `stat` is one of `single` (Gaussian approximation), `ks` (parametric
/// bootstrap) or `ks_star` (analytic distribution-free limit).
#[pyfunction]
#[pyo3(signature = (model, grid, counts, kernel="wlinear", stat="ks", estimator="mle",
                    bootstrap="projected", parallel_part=false, replicates=10_000, seed=0))]
#[allow(clippy::too_many_arguments)]
fn analyze<'py>(
    py: Python<'py>,
    model: &PyModel,
    grid: &PyGrid,
    counts: Vec<u64>,
    kernel: &str,
    stat: &str,
    estimator: &str,
    bootstrap: &str,
    parallel_part: bool,
    replicates: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let test = match stat {
        "single" => TestKind::Single,
        "ks" => TestKind::Ks,
        "ks_star" => TestKind::KsStar,
        other => return Err(PyValueError::new_err(format!("unknown stat `{other}`"))),
    };
    let bootstrap = match bootstrap {
        "classical" => BootstrapKind::Classical,
        "projected" => BootstrapKind::Projected,
        other => return Err(PyValueError::new_err(format!("unknown bootstrap `{other}`"))),
    };
    let cfg = AnalysisConfig {
        kernel: kernel.to_string(),
        estimator: estimator.to_string(),
        parallel_part,
        test,
        bootstrap,
        replicates,
        seed,
        workers: 0,
        dfree_p: None,
    };
    let report = analyze_spectrum(&grid.inner, &BinnedCounts(counts), &model.inner, &cfg)
        .map_err(err_to_py)?;
    let out = PyDict::new_bound(py);
    out.set_item("kernel", report.statistic_name)?;
    out.set_item("estimator", report.estimator)?;
    out.set_item("theta_hat", report.theta_hat)?;
    out.set_item("statistic", report.statistic)?;
    out.set_item("p_value", report.p_value)?;
    out.set_item("method", report.method)?;
    out.set_item("warnings", report.warnings)?;
    Ok(out)
}

/// Monte Carlo power study from a JSON run configuration.
#[pyfunction]
fn run_power_study<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_json(config_json).map_err(err_to_py)?;
    let r = power_study(&cfg).map_err(err_to_py)?;
    let out = PyDict::new_bound(py);
    out.set_item("statistic", r.statistic)?;
    out.set_item("estimator", r.estimator)?;
    out.set_item("alternative", r.alternative)?;
    out.set_item("replicates", r.replicates)?;
    out.set_item("alpha", r.alpha)?;
    out.set_item("critical_lo", r.critical_lo)?;
    out.set_item("critical_value", r.critical_value)?;
    out.set_item("power", r.power)?;
    out.set_item("mc_standard_error", r.mc_standard_error)?;
    out.set_item("null_mean", r.null_mean)?;
    out.set_item("null_variance", r.null_variance)?;
    out.set_item("alt_mean", r.alt_mean)?;
    out.set_item("alt_variance", r.alt_variance)?;
    Ok(out)
}

/// Validate and load a spectrum CSV (`bin_low,bin_high,count`).
#[pyfunction]
fn load_spectrum(path: &str) -> PyResult<(PyGrid, Vec<u64>)> {
    let (grid, counts) =
        divstat::harness::ingest_spectrum(std::path::Path::new(path)).map_err(err_to_py)?;
    Ok((PyGrid { inner: grid }, counts.0))
}

/// Poisson probability mass function `p(z | t)`.
#[pyfunction]
fn poisson_pmf(z: u64, t: f64) -> PyResult<f64> {
    divstat::measure::poisson_pmf(z, t).map_err(err_to_py)
}

/// Poisson distribution function `P(q | t)`.
#[pyfunction]
fn poisson_cdf(q: u64, t: f64) -> PyResult<f64> {
    divstat::measure::poisson_cdf(q, t).map_err(err_to_py)
}

/// The Kolmogorov distribution function.
#[pyfunction]
fn kolmogorov_cdf(y: f64) -> f64 {
    dfree::kolmogorov_cdf(y)
}

/// Finite-K limit law of the transformed KS* statistic for a p-parameter fit.
#[pyfunction]
fn ks_star_limit_cdf(y: f64, p: usize, k: usize) -> PyResult<f64> {
    dfree::limit_cdf(y, p, k).map_err(err_to_py)
}

/// Two-sided Gaussian p-value for an observed statistic value.
#[pyfunction]
#[pyo3(signature = (value, variance, sides=2))]
fn gaussian_test(value: f64, variance: f64, sides: u8) -> PyResult<f64> {
    divstat::projection::gaussian_test(value, variance, sides).map_err(err_to_py)
}

#[pymodule]
fn divstat_py(_py: Python<'_>, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(statistic, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(run_power_study, m)?)?;
    m.add_function(wrap_pyfunction!(load_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_pmf, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(kolmogorov_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(ks_star_limit_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_test, m)?)?;
    Ok(())
}
