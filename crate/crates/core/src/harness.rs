//! Monte Carlo power-study engine, spectrum ingestion, run configuration,
//! and the report types behind the CLI.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dfree::{build_chain, limit_cdf, r_basis, score_bin_kernels, TransformedScan};
use crate::error::{Error, Result};
use crate::estimation::{solve, EstimatorSpec};
use crate::gofprocess::{
    bootstrap_null_sample, ks_statistic, pvalue_from_sample, BootstrapMode, BootstrapPlan,
    ScanningFamily,
};
use crate::grid::{BinnedCounts, Grid};
use crate::measure::{evaluate_statistic, Kernel, MeasureContext};
use crate::models::{
    alt_means, bin_means, make_direction, sample_counts, AltSpec, DirectionKind, Family, MeanModel,
};
use crate::projection::{build_projector, gaussian_test};
use crate::statistics::{decompose, make_kernel};

/// Model section of a run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub family: crate::models::Family,
    pub c: f64,
    #[serde(default)]
    pub beta: Vec<f64>,
    pub domain: (f64, f64),
}

impl ModelConfig {
    pub fn build(&self) -> Result<MeanModel> {
        MeanModel::new(self.family.clone(), self.c, self.beta.clone(), self.domain)
    }
}

/// Alternative section: direction kind plus signal strength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlternativeConfig {
    #[serde(flatten)]
    pub kind: DirectionKind,
    /// Multiplier on the unit-norm direction (eta relative scale).
    #[serde(default = "default_strength")]
    pub strength: f64,
    /// Perturbation scale T; defaults to c K.
    #[serde(default)]
    pub t_scale: Option<f64>,
}

fn default_strength() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    /// A single divisible statistic, two-sided.
    Single,
    /// KS functional of the partial-sum process.
    Ks,
    /// Distribution-free KS* of the transformed process.
    KsStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapKind {
    Classical,
    Projected,
}

impl From<BootstrapKind> for BootstrapMode {
    fn from(k: BootstrapKind) -> Self {
        match k {
            BootstrapKind::Classical => BootstrapMode::Classical,
            BootstrapKind::Projected => BootstrapMode::Projected,
        }
    }
}

/// Full configuration of a Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub k: usize,
    pub kernel: String,
    /// `mle | ls | gamma:<kernel> | known` (known skips estimation).
    #[serde(default = "default_estimator")]
    pub estimator: String,
    /// Use the weighted-linear parallel part of the kernel instead of the
    /// kernel itself.
    #[serde(default)]
    pub parallel_part: bool,
    #[serde(default)]
    pub alternative: Option<AlternativeConfig>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_test")]
    pub test: TestKind,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: BootstrapKind,
    /// Worker threads; 0 uses the default pool.
    #[serde(default)]
    pub workers: usize,
    /// Blocks of the distribution-free basis; None = number of fitted params.
    #[serde(default)]
    pub dfree_p: Option<usize>,
}

fn default_estimator() -> String {
    "mle".into()
}

fn default_replicates() -> usize {
    10_000
}

fn default_alpha() -> f64 {
    0.05
}

fn default_test() -> TestKind {
    TestKind::Single
}

fn default_bootstrap() -> BootstrapKind {
    BootstrapKind::Classical
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.replicates < 100 {
            return Err(Error::Validation(format!(
                "at least 100 replicates required, got {}",
                self.replicates
            )));
        }
        if self.k == 0 {
            return Err(Error::Validation("K must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)
            .map_err(|e| Error::Validation(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn estimator_spec(&self) -> Result<Option<EstimatorSpec>> {
        if self.estimator == "known" {
            Ok(None)
        } else {
            EstimatorSpec::parse(&self.estimator).map(Some)
        }
    }
}

/// Result of a Monte Carlo power study.
#[derive(Debug, Clone, Serialize)]
pub struct PowerReport {
    pub statistic: String,
    pub test: TestKind,
    pub estimator: String,
    pub alternative: String,
    pub replicates: usize,
    pub alpha: f64,
    /// Lower rejection boundary (equal-tailed two-sided tests only).
    pub critical_lo: Option<f64>,
    /// Upper rejection boundary.
    pub critical_value: f64,
    pub power: f64,
    pub mc_standard_error: f64,
    pub null_mean: f64,
    pub null_variance: f64,
    pub alt_mean: f64,
    pub alt_variance: f64,
    pub seed: u64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Upper empirical quantile: the ceil((1 - alpha) (R + 1))-th order statistic.
fn upper_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let r = sorted.len();
    let rank = ((1.0 - alpha) * (r as f64 + 1.0)).ceil() as usize;
    sorted[rank.clamp(1, r) - 1]
}

/// Lower empirical quantile: the floor(alpha (R + 1))-th order statistic.
fn lower_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let r = sorted.len();
    let rank = (alpha * (r as f64 + 1.0)).floor() as usize;
    sorted[rank.clamp(1, r) - 1]
}

/// One replicate of the configured test statistic. `fit_spec = None` means
/// theta is known and fixed at the data-generating value.
struct StatEngine<'a> {
    model: &'a MeanModel,
    grid: &'a Grid,
    scan: ScanningFamily,
    kernel: Kernel,
    fit_spec: Option<EstimatorSpec>,
    test: TestKind,
    dfree_p: usize,
    null_ctx: MeasureContext,
}

impl<'a> StatEngine<'a> {
    fn new(cfg: &RunConfig, model: &'a MeanModel, grid: &'a Grid) -> Result<Self> {
        let means = bin_means(model, grid)?;
        let null_ctx = MeasureContext::new(grid.clone(), means)?;
        let base = make_kernel(&cfg.kernel)?;
        let kernel = if cfg.parallel_part {
            decompose(&base, &null_ctx)?.0
        } else {
            base
        };
        Ok(StatEngine {
            model,
            grid,
            scan: ScanningFamily::left_to_right(grid.k()),
            kernel,
            fit_spec: cfg.estimator_spec()?,
            test: cfg.test,
            dfree_p: cfg.dfree_p.unwrap_or_else(|| model.p()),
            null_ctx,
        })
    }

    fn statistic(&self, data: &BinnedCounts) -> Result<f64> {
        let ctx = match &self.fit_spec {
            None => self.null_ctx.clone(),
            Some(spec) => {
                let fit = solve(spec, self.model, data, self.grid, Some(self.model.theta()))?;
                if !fit.converged {
                    return Err(Error::NonConvergence {
                        iterations: fit.iterations,
                        residual: fit.residual,
                    });
                }
                MeasureContext::new(self.grid.clone(), bin_means(&fit.model, self.grid)?)?
            }
        };
        match self.test {
            TestKind::Single => evaluate_statistic(&self.kernel, data, &ctx),
            TestKind::Ks => ks_statistic(&self.kernel, data, &ctx, &self.scan),
            TestKind::KsStar => {
                let fitted = match &self.fit_spec {
                    None => self.model.clone(),
                    Some(spec) => {
                        solve(spec, self.model, data, self.grid, Some(self.model.theta()))?.model
                    }
                };
                let r = r_basis(self.dfree_p, &ctx, &self.scan)?;
                let s = score_bin_kernels(&fitted, &ctx)?;
                let chain = build_chain(&r, &s, &ctx)?;
                let fast = TransformedScan::new(&ctx, &chain, &r, &self.scan);
                let counts: Vec<f64> = data.0.iter().map(|&z| z as f64).collect();
                Ok(fast.ks_star(&counts))
            }
        }
    }
}

fn mc_sample(
    engine: &StatEngine<'_>,
    means: &[f64],
    replicates: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<f64>> {
    let values: Vec<Option<f64>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + i as u64);
            let data = sample_counts(means, &mut rng);
            engine.statistic(&data).ok()
        })
        .collect();
    let failures = values.iter().filter(|v| v.is_none()).count();
    if failures * 100 > replicates {
        return Err(Error::Numeric(format!(
            "{failures} of {replicates} replicates failed"
        )));
    }
    Ok(values.into_iter().flatten().collect())
}

fn run_pool<T: Send>(workers: usize, job: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        job()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Validation(format!("worker pool: {e}")))?;
        pool.install(job)
    }
}

/// Simulate the null to calibrate the critical value at level alpha, then
/// simulate the alternative and report the rejection fraction.
pub fn power_study(cfg: &RunConfig) -> Result<PowerReport> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let grid = Grid::new(model.domain.0, model.domain.1, cfg.k)?;
    run_pool(cfg.workers, || {
        let engine = StatEngine::new(cfg, &model, &grid)?;
        let null_means = bin_means(&model, &grid)?;
        let alt = match &cfg.alternative {
            Some(a) => make_direction(&a.kind, &model)?
                .with_strength(a.strength)
                .with_override_t(a.t_scale),
            None => AltSpec::null(),
        };
        let alt_label = alt.label.clone();
        let alt_means_vec = alt_means(&model, &alt, &grid)?;

        let mut null_vals = mc_sample(&engine, &null_means, cfg.replicates, cfg.seed, 0)?;
        let alt_vals = mc_sample(
            &engine,
            &alt_means_vec,
            cfg.replicates,
            cfg.seed,
            cfg.replicates as u64,
        )?;
        let (null_mean, null_variance) = mean_var(&null_vals);
        let (alt_mean, alt_variance) = mean_var(&alt_vals);
        if null_variance <= 0.0 {
            return Err(Error::Numeric("degenerate null distribution".into()));
        }
        null_vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // single statistics are two-sided: equal-tailed MC critical values;
        // the KS-type functionals are nonnegative and one-sided
        let (critical_lo, critical_value) = match cfg.test {
            TestKind::Single => (
                Some(lower_quantile(&null_vals, cfg.alpha / 2.0)),
                upper_quantile(&null_vals, cfg.alpha / 2.0),
            ),
            _ => (None, upper_quantile(&null_vals, cfg.alpha)),
        };
        // discrete statistics put whole atoms on the critical values; ties
        // resolve to acceptance, guarded against float jitter in the sums
        let hi_edge = critical_value + 1e-9 * (1.0 + critical_value.abs());
        let lo_edge = critical_lo.map(|lo| lo - 1e-9 * (1.0 + lo.abs()));
        let rejections = alt_vals
            .iter()
            .filter(|v| **v > hi_edge || lo_edge.is_some_and(|lo| **v < lo))
            .count();
        let power = rejections as f64 / alt_vals.len() as f64;
        let mc_standard_error = (power * (1.0 - power) / alt_vals.len() as f64).sqrt();
        Ok(PowerReport {
            statistic: engine.kernel.name().to_string(),
            test: cfg.test,
            estimator: cfg.estimator.clone(),
            alternative: alt_label,
            replicates: cfg.replicates,
            alpha: cfg.alpha,
            critical_lo,
            critical_value,
            power,
            mc_standard_error,
            null_mean,
            null_variance,
            alt_mean,
            alt_variance,
            seed: cfg.seed,
        })
    })
}

/// Report of one goodness-of-fit analysis on observed data.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub statistic_name: String,
    pub test: TestKind,
    pub estimator: String,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
    pub replicates: usize,
    pub warnings: Vec<String>,
}

/// Fit the model on the observed spectrum and run the requested test.
///
/// For `Single`, the p-value is the two-sided Gaussian approximation from
/// the projected variance; for `Ks`, a parametric bootstrap; for `KsStar`,
/// the closed-form limit law (no simulation).
pub fn analyze_spectrum(
    grid: &Grid,
    data: &BinnedCounts,
    model: &MeanModel,
    cfg: &AnalysisConfig,
) -> Result<TestReport> {
    let mut warnings = Vec::new();
    let spec = EstimatorSpec::parse(&cfg.estimator)?;
    let fit = solve(&spec, model, data, grid, None)?;
    if !fit.converged {
        return Err(Error::NonConvergence {
            iterations: fit.iterations,
            residual: fit.residual,
        });
    }
    let fitted = fit.model.clone();
    let ctx = MeasureContext::new(grid.clone(), bin_means(&fitted, grid)?)?;
    let base = make_kernel(&cfg.kernel)?;
    let kernel = if cfg.parallel_part {
        decompose(&base, &ctx)?.0
    } else {
        base
    };
    let scan = ScanningFamily::left_to_right(grid.k());
    let (stat, p, method) = match cfg.test {
        TestKind::Single => {
            let v = evaluate_statistic(&kernel, data, &ctx)?;
            let proj = build_projector(&kernel, &spec, &fitted, grid)?;
            let p = gaussian_test(v, proj.sigma2(), 2)?;
            (v, p, format!("gaussian(sigma2={:.6})", proj.sigma2()))
        }
        TestKind::Ks => {
            let observed = ks_statistic(&kernel, data, &ctx, &scan)?;
            let plan = BootstrapPlan::new(cfg.replicates, cfg.bootstrap.into(), cfg.seed)?;
            if !plan.is_reportable() {
                warnings.push(format!(
                    "bootstrap p-value rests on only {} replicates; 1000+ recommended",
                    cfg.replicates
                ));
            }
            let sample = run_pool(cfg.workers, || {
                bootstrap_null_sample(&plan, &fitted, &spec, &kernel, grid, &scan)
            })?;
            let p = pvalue_from_sample(&sample, observed);
            (observed, p, format!("{:?} bootstrap", cfg.bootstrap))
        }
        TestKind::KsStar => {
            let p_blocks = cfg.dfree_p.unwrap_or_else(|| fitted.p());
            let r = r_basis(p_blocks, &ctx, &scan)?;
            let s = score_bin_kernels(&fitted, &ctx)?;
            let chain = build_chain(&r, &s, &ctx)?;
            let fast = TransformedScan::new(&ctx, &chain, &r, &scan);
            let counts: Vec<f64> = data.0.iter().map(|&z| z as f64).collect();
            let observed = fast.ks_star(&counts);
            let p = 1.0 - limit_cdf(observed, p_blocks, grid.k())?;
            (observed, p, format!("analytic limit law (p={p_blocks})"))
        }
    };
    Ok(TestReport {
        statistic_name: cfg.kernel.clone(),
        test: cfg.test,
        estimator: cfg.estimator.clone(),
        theta_hat: fit.theta_hat,
        converged: fit.converged,
        statistic: stat,
        p_value: p,
        method,
        replicates: cfg.replicates,
        warnings,
    })
}

impl TestReport {
    /// Flat row for CSV output (vector fields joined as strings).
    pub fn csv_row(&self) -> TestReportRow {
        TestReportRow {
            statistic_name: self.statistic_name.clone(),
            test: self.test,
            estimator: self.estimator.clone(),
            theta_hat: self
                .theta_hat
                .iter()
                .map(|v| format!("{v:.9}"))
                .collect::<Vec<_>>()
                .join(";"),
            converged: self.converged,
            statistic: self.statistic,
            p_value: self.p_value,
            method: self.method.clone(),
            replicates: self.replicates,
        }
    }
}

/// CSV-friendly flattening of [`TestReport`].
#[derive(Debug, Clone, Serialize)]
pub struct TestReportRow {
    pub statistic_name: String,
    pub test: TestKind,
    pub estimator: String,
    pub theta_hat: String,
    pub converged: bool,
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
    pub replicates: usize,
}

/// Test configuration for one observed-data analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub kernel: String,
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default)]
    pub parallel_part: bool,
    #[serde(default = "default_test")]
    pub test: TestKind,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: BootstrapKind,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub dfree_p: Option<usize>,
}

/// Read a spectrum CSV with header `bin_low,bin_high,count`; bins must be
/// contiguous with equal widths, counts nonnegative.
pub fn ingest_spectrum(path: &Path) -> Result<(Grid, BinnedCounts)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Ingest { row: 1, message: e.to_string() })?;
        let want = ["bin_low", "bin_high", "count"];
        if headers.len() < 3 || (0..3).any(|i| headers.get(i) != Some(want[i])) {
            return Err(Error::Ingest {
                row: 1,
                message: format!("header must be `bin_low,bin_high,count`, got `{headers:?}`"),
            });
        }
    }
    let mut lows = Vec::new();
    let mut highs = Vec::new();
    let mut counts = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2; // 1-based, counting the header
        let rec = rec.map_err(|e| Error::Ingest { row, message: e.to_string() })?;
        let parse = |j: usize, name: &str| -> Result<f64> {
            rec.get(j)
                .ok_or_else(|| Error::Ingest { row, message: format!("missing {name}") })?
                .parse::<f64>()
                .map_err(|e| Error::Ingest { row, message: format!("bad {name}: {e}") })
        };
        let lo = parse(0, "bin_low")?;
        let hi = parse(1, "bin_high")?;
        let count = parse(2, "count")?;
        if hi <= lo {
            return Err(Error::Ingest { row, message: format!("empty bin [{lo}, {hi}]") });
        }
        if count < 0.0 || count.fract() != 0.0 {
            return Err(Error::Ingest {
                row,
                message: format!("count must be a nonnegative integer, got {count}"),
            });
        }
        lows.push(lo);
        highs.push(hi);
        counts.push(count as u64);
    }
    if counts.is_empty() {
        return Err(Error::Ingest { row: 2, message: "no data rows".into() });
    }
    let k = counts.len();
    let width0 = highs[0] - lows[0];
    for i in 0..k {
        let row = i + 2;
        if i + 1 < k && (highs[i] - lows[i + 1]).abs() > 1e-9 {
            return Err(Error::Ingest {
                row: row + 1,
                message: format!(
                    "bins not contiguous: previous bin ends at {} but this one starts at {}",
                    highs[i],
                    lows[i + 1]
                ),
            });
        }
        let width = highs[i] - lows[i];
        if (width - width0).abs() > 1e-6 * width0.abs() {
            return Err(Error::Ingest {
                row,
                message: format!("unequal bin widths: {width} vs {width0}"),
            });
        }
    }
    let grid = Grid::new(lows[0], highs[k - 1], k)?;
    Ok((grid, BinnedCounts(counts)))
}

/// Parse inline model specs like `constant`, `linear:slope=0.2`,
/// `truncexp:rate=1.5`, `truncnorm:mean=0.5,var=0.04[,free]`,
/// `powerlaw:slope=2`, `pwlinear:bp=15.6,slope=0`, `brokenpl:cut=1.4,s1=2,s2=2`.
pub fn parse_model_spec(spec: &str, domain: (f64, f64)) -> Result<MeanModel> {
    let (name, args) = match spec.split_once(':') {
        Some((n, a)) => (n, a),
        None => (spec, ""),
    };
    let mut kv = std::collections::HashMap::new();
    for part in args.split(',').filter(|s| !s.is_empty()) {
        match part.split_once('=') {
            Some((k, v)) => {
                let val: f64 = v.parse().map_err(|_| {
                    Error::Validation(format!("bad value `{v}` in model spec"))
                })?;
                kv.insert(k.to_string(), val);
            }
            None => {
                kv.insert(part.to_string(), 1.0);
            }
        }
    }
    let get = |k: &str, default: f64| kv.get(k).copied().unwrap_or(default);
    let c0 = get("c", 1.0);
    match name {
        "constant" => MeanModel::new(Family::Constant, c0, vec![], domain),
        "linear" => MeanModel::new(Family::Linear, c0, vec![get("slope", 0.0)], domain),
        "pwlinear" => {
            let bp = kv.get("bp").copied().ok_or_else(|| {
                Error::Validation("pwlinear needs bp=<breakpoint>".into())
            })?;
            MeanModel::new(
                Family::PiecewiseLinear { breakpoint: bp },
                c0,
                vec![get("slope", 0.0)],
                domain,
            )
        }
        "truncexp" => MeanModel::new(
            Family::TruncatedExponential,
            c0,
            vec![get("rate", 1.0)],
            domain,
        ),
        "truncnorm" => {
            let var = get("var", 1.0);
            if kv.contains_key("free") {
                MeanModel::new(
                    Family::TruncatedNormal { variance: None },
                    c0,
                    vec![get("mean", 0.5), var],
                    domain,
                )
            } else {
                MeanModel::new(
                    Family::TruncatedNormal { variance: Some(var) },
                    c0,
                    vec![get("mean", 0.5)],
                    domain,
                )
            }
        }
        "powerlaw" => MeanModel::new(Family::PowerLaw, c0, vec![get("slope", 2.0)], domain),
        "brokenpl" => {
            let cut = kv.get("cut").copied().ok_or_else(|| {
                Error::Validation("brokenpl needs cut=<cutpoint>".into())
            })?;
            MeanModel::new(
                Family::BrokenPowerLaw { cutpoint: cut },
                c0,
                vec![get("s1", 2.0), get("s2", 2.0)],
                domain,
            )
        }
        other => Err(Error::Validation(format!("unknown model family `{other}`"))),
    }
}

/// Minimal aligned table rendering for the CLI.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            if i < widths.len() {
                widths[i] = widths[i].max(cell.len());
            }
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: Vec<String>, widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:>w$}", w = w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&fmt_row(headers.iter().map(|s| s.to_string()).collect(), &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row.clone(), &widths));
        out.push('\n');
    }
    out
}

/// Append one report row to a CSV file, writing the header if new.
pub fn write_csv_row<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let new = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(new).from_writer(file);
    w.serialize(row)
        .map_err(|e| Error::Validation(format!("csv write: {e}")))?;
    w.flush()?;
    Ok(())
}

/// Warn into stderr; kept separate so library code stays silent.
pub fn warn_to_stderr(warnings: &[String]) {
    let mut err = std::io::stderr();
    for w in warnings {
        let _ = writeln!(err, "warning: {w}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn ingest_valid_fixture() {
        let f = write_tmp("bin_low,bin_high,count\n0.0,0.1,3\n0.1,0.2,0\n0.2,0.3,5\n");
        let (grid, counts) = ingest_spectrum(f.path()).unwrap();
        assert_eq!(grid.k(), 3);
        assert!((grid.lo() - 0.0).abs() < 1e-12);
        assert!((grid.hi() - 0.3).abs() < 1e-12);
        assert_eq!(counts.0, vec![3, 0, 5]);
    }

    #[test]
    fn ingest_gap_names_row() {
        let f = write_tmp("bin_low,bin_high,count\n0.0,0.1,3\n0.15,0.25,1\n");
        match ingest_spectrum(f.path()) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_negative_and_unequal() {
        let f = write_tmp("bin_low,bin_high,count\n0.0,0.1,-2\n");
        assert!(matches!(ingest_spectrum(f.path()), Err(Error::Ingest { row: 2, .. })));
        let f2 = write_tmp("bin_low,bin_high,count\n0.0,0.1,1\n0.1,0.35,1\n");
        assert!(ingest_spectrum(f2.path()).is_err());
        let f3 = write_tmp("a,b,c\n0.0,0.1,1\n");
        assert!(matches!(ingest_spectrum(f3.path()), Err(Error::Ingest { row: 1, .. })));
    }

    #[test]
    fn config_validation() {
        let json = r#"{
            "model": {"family": "constant", "c": 5.0, "domain": [0.0, 1.0]},
            "k": 100, "kernel": "pearson", "replicates": 500, "alpha": 0.05
        }"#;
        let cfg = RunConfig::from_json(json).unwrap();
        assert_eq!(cfg.k, 100);
        assert!(cfg.alternative.is_none());
        let bad = json.replace("0.05", "1.5");
        assert!(RunConfig::from_json(&bad).is_err());
        let too_few = json.replace("500", "10");
        assert!(RunConfig::from_json(&too_few).is_err());
    }

    #[test]
    fn upper_quantile_convention() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        // alpha = 0.05: rank ceil(0.95 * 1001) = 951
        assert_eq!(upper_quantile(&xs, 0.05), 951.0);
    }

    #[test]
    fn null_vs_null_power_matches_level() {
        let cfg = RunConfig::from_json(
            r#"{
            "model": {"family": "constant", "c": 5.0, "domain": [0.0, 1.0]},
            "k": 50, "kernel": "pearson", "estimator": "known",
            "replicates": 4000, "seed": 9, "alpha": 0.05
        }"#,
        )
        .unwrap();
        let report = power_study(&cfg).unwrap();
        // 3 MC standard errors around alpha
        let se = (0.05f64 * 0.95 / 4000.0).sqrt();
        assert!(
            (report.power - 0.05).abs() < 3.0 * se + 0.003,
            "size = {}",
            report.power
        );
    }

    #[test]
    fn determinism_across_worker_counts() {
        let mk = |workers: usize| {
            let mut cfg = RunConfig::from_json(
                r#"{
                "model": {"family": "truncated_exponential", "c": 4.0, "beta": [1.2], "domain": [0.0, 1.0]},
                "k": 40, "kernel": "wlinear", "estimator": "mle",
                "alternative": {"kind": "gamma_shape"},
                "replicates": 400, "seed": 33, "alpha": 0.05
            }"#,
            )
            .unwrap();
            cfg.workers = workers;
            power_study(&cfg).unwrap()
        };
        let a = mk(1);
        let b = mk(4);
        assert_eq!(a.power, b.power);
        assert_eq!(a.critical_value, b.critical_value);
        assert_eq!(a.null_mean, b.null_mean);
    }

    #[test]
    fn render_table_aligns() {
        let s = render_table(
            &["name", "value"],
            &[vec!["a".into(), "1.00".into()], vec!["longer".into(), "2".into()]],
        );
        assert!(s.contains("name"));
        assert!(s.lines().count() == 4);
    }
}
