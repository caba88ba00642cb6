//! Command-line interface: model fitting, goodness-of-fit tests,
//! Monte Carlo power studies, the distribution-free transform, and
//! spectrum-file validation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use divstat::error::Error;
use divstat::estimation::{solve, EstimatorSpec};
use divstat::harness::{
    analyze_spectrum, ingest_spectrum, parse_model_spec, power_study, render_table,
    warn_to_stderr, write_csv_row, AnalysisConfig, BootstrapKind, RunConfig, TestKind,
};

#[derive(Parser)]
#[command(
    name = "divstat",
    about = "Goodness-of-fit inference for sparsely binned Poisson counts",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON run-config file; CLI flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all Monte Carlo streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo / bootstrap replicates.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads (0 = default pool).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for machine-readable CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a mean model to an observed spectrum.
    Fit {
        /// Model spec, e.g. `constant`, `truncexp:rate=1.5`, `pwlinear:bp=15.6`.
        #[arg(long)]
        model: String,
        /// Estimator: `mle | ls | gamma:<kernel>`.
        #[arg(long, default_value = "mle")]
        estimator: String,
        /// Spectrum CSV with header bin_low,bin_high,count.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Goodness-of-fit test on an observed spectrum.
    Gof {
        #[arg(long)]
        model: String,
        /// Kernel: `pearson | cash | linear | wlinear | spectral:q | empty | custom:...`.
        #[arg(long, default_value = "wlinear")]
        kernel: String,
        /// Statistic: `single` (Gaussian), `ks` (bootstrap), `ks-star` (analytic).
        #[arg(long, default_value = "ks")]
        stat: String,
        /// Bootstrap mode for `ks`: classical or projected.
        #[arg(long, default_value = "projected")]
        bootstrap: String,
        /// Use the weighted-linear parallel part of the kernel.
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value = "mle")]
        estimator: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Monte Carlo power study from a run-config file.
    Power {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Distribution-free KS* test with its closed-form p-value.
    Dfree {
        #[arg(long)]
        model: String,
        /// Number of basis blocks, or `auto` for the parameter count.
        #[arg(long, default_value = "auto")]
        p: String,
        /// Report the KS* statistic (flag kept for interface compatibility).
        #[arg(long = "ks-star", default_value_t = true)]
        ks_star: bool,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Validate a spectrum file and report its grid.
    IngestCheck {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fit { model, estimator, data, common } => {
            let (grid, counts) = ingest_spectrum(&data)?;
            let m = parse_model_spec(&model, (grid.lo(), grid.hi()))?;
            let spec = EstimatorSpec::parse(&estimator)?;
            let fit = solve(&spec, &m, &counts, &grid, None)?;
            let rows: Vec<Vec<String>> = fit
                .theta_hat
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let name = if i == 0 { "c".to_string() } else { format!("beta[{}]", i - 1) };
                    vec![name, format!("{v:.6}")]
                })
                .collect();
            println!("{}", render_table(&["parameter", "estimate"], &rows));
            println!(
                "converged: {} after {} iterations (residual {:.2e})",
                fit.converged, fit.iterations, fit.residual
            );
            if !fit.converged {
                return Err(Error::NonConvergence {
                    iterations: fit.iterations,
                    residual: fit.residual,
                });
            }
            if let Some(dir) = common.out {
                std::fs::create_dir_all(&dir)?;
                #[derive(serde::Serialize)]
                struct FitRow {
                    model: String,
                    estimator: String,
                    theta_hat: String,
                    converged: bool,
                    iterations: usize,
                }
                write_csv_row(
                    &dir.join("fit.csv"),
                    &FitRow {
                        model,
                        estimator,
                        theta_hat: format!("{:?}", fit.theta_hat),
                        converged: fit.converged,
                        iterations: fit.iterations,
                    },
                )?;
            }
            Ok(())
        }
        Command::Gof {
            model,
            kernel,
            stat,
            bootstrap,
            parallel,
            estimator,
            data,
            common,
        } => {
            let (grid, counts) = ingest_spectrum(&data)?;
            let m = parse_model_spec(&model, (grid.lo(), grid.hi()))?;
            let test = match stat.as_str() {
                "single" => TestKind::Single,
                "ks" => TestKind::Ks,
                "ks-star" | "ks_star" => TestKind::KsStar,
                other => {
                    return Err(Error::Validation(format!("unknown statistic `{other}`")))
                }
            };
            let bootstrap = match bootstrap.as_str() {
                "classical" => BootstrapKind::Classical,
                "projected" => BootstrapKind::Projected,
                other => {
                    return Err(Error::Validation(format!("unknown bootstrap `{other}`")))
                }
            };
            let cfg = AnalysisConfig {
                kernel,
                estimator,
                parallel_part: parallel,
                test,
                bootstrap,
                replicates: common.reps.unwrap_or(10_000),
                seed: common.seed.unwrap_or(0),
                workers: common.workers.unwrap_or(0),
                dfree_p: None,
            };
            let report = analyze_spectrum(&grid, &counts, &m, &cfg)?;
            warn_to_stderr(&report.warnings);
            let rows = vec![
                vec!["kernel".into(), report.statistic_name.clone()],
                vec!["estimator".into(), report.estimator.clone()],
                vec!["theta_hat".into(), format!("{:?}", report.theta_hat)],
                vec!["statistic".into(), format!("{:.6}", report.statistic)],
                vec!["p_value".into(), format!("{:.6}", report.p_value)],
                vec!["method".into(), report.method.clone()],
            ];
            println!("{}", render_table(&["field", "value"], &rows));
            if let Some(dir) = common.out {
                std::fs::create_dir_all(&dir)?;
                write_csv_row(&dir.join("gof.csv"), &report.csv_row())?;
            }
            Ok(())
        }
        Command::Power { common } => {
            let path = common.config.ok_or_else(|| {
                Error::Validation("power requires --config <file>".into())
            })?;
            let text = std::fs::read_to_string(&path)?;
            let mut cfg = RunConfig::from_json(&text)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(r) = common.reps {
                cfg.replicates = r;
            }
            if let Some(w) = common.workers {
                cfg.workers = w;
            }
            let report = power_study(&cfg)?;
            let rows = vec![
                vec!["statistic".into(), report.statistic.clone()],
                vec!["test".into(), format!("{:?}", report.test)],
                vec!["estimator".into(), report.estimator.clone()],
                vec!["alternative".into(), report.alternative.clone()],
                vec!["replicates".into(), report.replicates.to_string()],
                vec!["critical value".into(), format!("{:.6}", report.critical_value)],
                vec![
                    "power".into(),
                    format!("{:.4} +/- {:.4}", report.power, report.mc_standard_error),
                ],
                vec![
                    "null mean/var".into(),
                    format!("{:.4} / {:.4}", report.null_mean, report.null_variance),
                ],
                vec![
                    "alt mean/var".into(),
                    format!("{:.4} / {:.4}", report.alt_mean, report.alt_variance),
                ],
            ];
            println!("{}", render_table(&["field", "value"], &rows));
            if let Some(dir) = common.out {
                std::fs::create_dir_all(&dir)?;
                write_csv_row(&dir.join("power.csv"), &report)?;
            }
            Ok(())
        }
        Command::Dfree { model, p, ks_star: _, data, common } => {
            let (grid, counts) = ingest_spectrum(&data)?;
            let m = parse_model_spec(&model, (grid.lo(), grid.hi()))?;
            let dfree_p = match p.as_str() {
                "auto" => None,
                other => Some(other.parse::<usize>().map_err(|_| {
                    Error::Validation(format!("--p must be `auto` or an integer, got `{other}`"))
                })?),
            };
            let cfg = AnalysisConfig {
                kernel: "wlinear".into(),
                estimator: "mle".into(),
                parallel_part: false,
                test: TestKind::KsStar,
                bootstrap: BootstrapKind::Projected,
                replicates: common.reps.unwrap_or(10_000),
                seed: common.seed.unwrap_or(0),
                workers: common.workers.unwrap_or(0),
                dfree_p,
            };
            let report = analyze_spectrum(&grid, &counts, &m, &cfg)?;
            let rows = vec![
                vec!["theta_hat".into(), format!("{:?}", report.theta_hat)],
                vec!["KS*".into(), format!("{:.6}", report.statistic)],
                vec!["p_value".into(), format!("{:.6}", report.p_value)],
                vec!["method".into(), report.method.clone()],
            ];
            println!("{}", render_table(&["field", "value"], &rows));
            if let Some(dir) = common.out {
                std::fs::create_dir_all(&dir)?;
                write_csv_row(&dir.join("dfree.csv"), &report.csv_row())?;
            }
            Ok(())
        }
        Command::IngestCheck { data } => {
            let (grid, counts) = ingest_spectrum(&data)?;
            println!(
                "ok: K = {}, domain [{}, {}], delta = {:.6}, total count = {}",
                grid.k(),
                grid.lo(),
                grid.hi(),
                grid.delta(),
                counts.total()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
