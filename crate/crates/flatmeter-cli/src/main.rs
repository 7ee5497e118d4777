//! flatmeter: reparameterization-invariant flatness measures for fully
//! connected ReLU networks — grid training, measurement, reparameterization
//! studies, correlation reports, and numeric self-verification.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use flatmeter_cli::config::{self, ExperimentConfig};
use flatmeter_cli::pipeline::{self, MeasureOverrides, RecordSource, ReparamOverrides};
use flatmeter_cli::verify;
use flatmeter_core::expstats::{GenErrorMode, StatKind};
use flatmeter_core::reparam::ReparamFamily;

#[derive(Parser)]
#[command(
    name = "flatmeter",
    version,
    about = "Reparameterization-invariant flatness measures for ReLU networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every grid cell of an experiment config into a run directory
    Train {
        /// Experiment config: a JSON file path or a preset name
        #[arg(long)]
        config: String,
        /// Run directory to create or resume
        #[arg(long)]
        out: PathBuf,
        /// Worker pool size (default: available cores)
        #[arg(long)]
        jobs: Option<usize>,
        /// Override the grid base seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure flatness of trained checkpoints
    Measure {
        /// A run directory, or a single checkpoint file (needs --config)
        target: PathBuf,
        /// Config (file or preset) when measuring a bare checkpoint
        #[arg(long)]
        config: Option<String>,
        /// Print only these 1-based layers (single-checkpoint mode), e.g. 1,3
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Trace estimator: auto | exact | hutchinson | hutchinson:N
        #[arg(long)]
        trace_mode: Option<String>,
        /// Override the measurement seed
        #[arg(long)]
        seed: Option<u64>,
        /// Worker pool size (default: available cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Apply function-preserving reparameterizations and re-measure
    Reparam {
        /// A measured run directory
        run_dir: PathBuf,
        /// Override the family: layerwise | neuronwise
        #[arg(long)]
        family: Option<ReparamFamily>,
        /// Override the factor interval, e.g. 5,25
        #[arg(long, value_name = "LO,HI")]
        factor_range: Option<String>,
        /// Override the spec-sampling base seed
        #[arg(long)]
        seed: Option<u64>,
        /// Worker pool size (default: available cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Correlate flatness measures with generalization error
    Correlate {
        /// Measured run directories
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Measure keys, e.g. kappa_tau.l2 (default: all measures)
        #[arg(long, value_delimiter = ',')]
        keys: Option<Vec<String>>,
        /// Statistic: pearson | spearman
        #[arg(long, default_value = "spearman")]
        stat: StatKind,
        /// Record population: train | reparam
        #[arg(long, default_value = "train", value_parser = ["train", "reparam"])]
        source: String,
        /// Report directory (default: under the first run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a numeric verification suite
    Verify {
        /// Suite to run
        #[arg(default_value = "all", value_parser = ["invariance", "oracle", "all"])]
        suite: String,
    },
    /// Run a built-in preset end to end (train, measure, reparam, correlate)
    Experiment {
        /// Preset name
        #[arg(value_parser = ["appendix-c-desk", "teacher-smoke"])]
        preset: String,
        /// Run directory to create or resume
        #[arg(long)]
        out: PathBuf,
        /// Worker pool size (default: available cores)
        #[arg(long)]
        jobs: Option<usize>,
        /// Override the grid base seed
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// A config argument is either a JSON file path or a preset name.
fn resolve_config(spec: &str) -> anyhow::Result<ExperimentConfig> {
    let path = Path::new(spec);
    if path.exists() || spec.ends_with(".json") {
        config::load_config(path)
    } else {
        Ok(config::preset(spec)?)
    }
}

fn parse_factor_range(s: &str) -> anyhow::Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        bail!("--factor-range needs the form LO,HI (got '{s}')");
    }
    let lo: f64 = parts[0].trim().parse().context("bad LO in --factor-range")?;
    let hi: f64 = parts[1].trim().parse().context("bad HI in --factor-range")?;
    if !(lo > 0.0 && hi >= lo) {
        bail!("--factor-range must satisfy 0 < LO <= HI (got {lo},{hi})");
    }
    Ok((lo, hi))
}

/// Returns `Ok(true)` on success, `Ok(false)` when a verification suite
/// reports failures (exit 1 without an error message).
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train {
            config,
            out,
            jobs,
            seed,
        } => {
            let mut cfg = resolve_config(&config)?;
            if let Some(s) = seed {
                cfg.grid.base_seed = s;
            }
            let summary = pipeline::cmd_train(&cfg, &out, jobs)?;
            println!(
                "trained {} runs ({} resumed): {} converged, {} diverged",
                summary.trained + summary.skipped,
                summary.skipped,
                summary.converged,
                summary.diverged
            );
            println!("summary: {}", summary.summary_csv.display());
            Ok(true)
        }
        Command::Measure {
            target,
            config,
            layers,
            trace_mode,
            seed,
            jobs,
        } => {
            if target.is_dir() {
                if layers.is_some() {
                    eprintln!(
                        "note: --layers only filters single-checkpoint output; \
                         run-directory records always store every layer"
                    );
                }
                let overrides = MeasureOverrides { trace_mode, seed };
                let records = pipeline::cmd_measure(&target, &overrides, jobs)?;
                println!(
                    "measured {} runs under {}",
                    records.len(),
                    target.join("runs").display()
                );
            } else {
                let spec = config
                    .ok_or_else(|| anyhow::anyhow!("measuring a bare checkpoint needs --config"))?;
                let mut cfg = resolve_config(&spec)?;
                if let Some(tm) = trace_mode {
                    cfg.measurement.trace_mode = tm;
                }
                if let Some(s) = seed {
                    cfg.measurement.seed = Some(s);
                }
                cfg.validate()?;
                let layer_filter = layers.or_else(|| cfg.measurement.layers.clone());
                let stdout = std::io::stdout();
                pipeline::measure_checkpoint(
                    &target,
                    &cfg,
                    layer_filter.as_deref(),
                    &mut stdout.lock(),
                )?;
            }
            Ok(true)
        }
        Command::Reparam {
            run_dir,
            family,
            factor_range,
            seed,
            jobs,
        } => {
            let interval = factor_range.as_deref().map(parse_factor_range).transpose()?;
            let overrides = ReparamOverrides {
                family,
                interval,
                seed,
            };
            let pairs = pipeline::cmd_reparam(&run_dir, overrides, jobs)?;
            let worst_cert = pairs
                .iter()
                .map(|p| p.certificate.max_abs_deviation)
                .fold(0.0f64, f64::max);
            let worst_kappa = pairs
                .iter()
                .map(|p| p.kappa_max_rel_change)
                .fold(0.0f64, f64::max);
            println!(
                "reparameterized {} runs: worst certificate deviation {:.3e}, \
                 worst kappa relative change {:.3e}",
                pairs.len(),
                worst_cert,
                worst_kappa
            );
            Ok(true)
        }
        Command::Correlate {
            dirs,
            keys,
            stat,
            source,
            out,
        } => {
            let source = match source.as_str() {
                "train" => RecordSource::Train,
                _ => RecordSource::Reparam,
            };
            let report_dir = out.unwrap_or_else(|| match source {
                RecordSource::Train => dirs[0].join("report"),
                RecordSource::Reparam => dirs[0].join("reparam").join("report"),
            });
            let (rows, emitted) = pipeline::cmd_correlate(&dirs, keys, stat, source, &report_dir)?;
            for row in &rows {
                println!(
                    "{} {} vs {}: {:+.4} (n={})",
                    row.kind, row.key, row.mode, row.coefficient, row.n
                );
            }
            println!("records: {}", emitted.csv_path.display());
            for p in &emitted.plot_paths {
                println!("plot: {}", p.display());
            }
            Ok(true)
        }
        Command::Verify { suite } => {
            let reports = verify::run_suite(&suite)?;
            let mut all = true;
            for r in &reports {
                println!("{r}");
                all &= r.passed;
            }
            if all {
                println!("verify({suite}): all {} criteria passed", reports.len());
            } else {
                println!("verify({suite}): FAILED");
            }
            Ok(all)
        }
        Command::Experiment {
            preset,
            out,
            jobs,
            seed,
        } => {
            let mut cfg = config::preset(&preset)?;
            if let Some(s) = seed {
                cfg.grid.base_seed = s;
            }
            let outcome = pipeline::run_experiment(&cfg, &out, jobs)?;
            println!(
                "experiment '{}' finished in {:.1}s: {} runs trained ({} resumed), \
                 {} converged, {} diverged",
                preset,
                outcome.seconds,
                outcome.train.trained + outcome.train.skipped,
                outcome.train.skipped,
                outcome.train.converged,
                outcome.train.diverged
            );
            let worst_kappa = outcome
                .pairs
                .iter()
                .map(|p| p.kappa_max_rel_change)
                .fold(0.0f64, f64::max);
            println!(
                "reparameterization: {} pairs, worst kappa relative change {:.3e}",
                outcome.pairs.len(),
                worst_kappa
            );
            let layer_count = cfg.shape.len() - 1;
            for key in pipeline::hidden_kappa_tau_keys(layer_count) {
                if let Some(row) = outcome.correlations.iter().find(|r| {
                    r.key == key && r.mode == GenErrorMode::MeanDifference
                }) {
                    println!(
                        "spearman {} vs gen error (mean difference): {:+.4} (n={})",
                        row.key, row.coefficient, row.n
                    );
                }
            }
            println!("records: {}", outcome.csv_path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
