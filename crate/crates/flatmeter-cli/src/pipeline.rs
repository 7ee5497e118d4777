//! The experiment pipeline: grid training into a resumable run directory,
//! flatness measurement of every checkpoint, reparameterization studies
//! with function-preservation certificates, and correlation reporting.
//!
//! Every stage is deterministic given the config: cell seeds derive from
//! the base seed by counter mixing, outputs are written in grid order, and
//! reruns of a completed directory reproduce files byte for byte.

use crate::config::{config_hash, parse_trace_mode, ConfigError, ExperimentConfig, GridCell};
use crate::dataset;
use anyhow::{bail, Context};
use flatmeter_core::data::{load_checkpoint, save_checkpoint, CheckpointMeta};
use flatmeter_core::expstats::{
    correlate_records, emit, CorrelationResult, EmitOutput, GenErrorMode, RunRecord, StatKind,
};
use flatmeter_core::flatness::{full_report, FlatnessReport};
use flatmeter_core::net::{LabeledSet, MlpNetwork};
use flatmeter_core::reparam::{
    apply, sample_random, verify_function_preserving, Certificate, ReparamFamily, ReparamSpec,
};
use flatmeter_core::rng::mix;
use flatmeter_core::trainer::{initialize, sgd_train, train_error, InitScheme, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub enum PipelineError {
    MissingCheckpoint { run_id: String },
    NotMeasured { run_id: String },
    NoRuns { dir: PathBuf },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::MissingCheckpoint { run_id } => {
                write!(f, "run '{run_id}' has no checkpoint; run `train` first")
            }
            PipelineError::NotMeasured { run_id } => {
                write!(f, "run '{run_id}' has no measured record; run `measure` first")
            }
            PipelineError::NoRuns { dir } => {
                write!(f, "no runs found under {}", dir.display())
            }
        }
    }
}

impl std::error::Error for PipelineError {}

/// One grid cell × repeat with its derived seed and identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSlot {
    pub cell: GridCell,
    pub repeat: usize,
    pub seed: u64,
    pub run_id: String,
}

/// Every run slot in deterministic grid order. The slot seed mixes the
/// base seed with the slot counter, so adding cells never reshuffles the
/// seeds of existing ones.
pub fn expand(cfg: &ExperimentConfig) -> Vec<RunSlot> {
    let mut slots = Vec::new();
    for cell in cfg.cells() {
        for repeat in 0..cfg.grid.repeats {
            let index = slots.len() as u64;
            slots.push(RunSlot {
                cell,
                repeat,
                seed: mix(cfg.grid.base_seed, index),
                run_id: cell.run_id(repeat),
            });
        }
    }
    slots
}

/// Builds the bounded global worker pool. Safe to call more than once; only
/// the first call in a process takes effect.
pub fn init_pool(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Training outcome summary stored per run (the flatness-free half of a
/// record; `measure` upgrades it to a full [`RunRecord`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedCell {
    pub run_id: String,
    pub seed: u64,
    pub init_scheme: InitScheme,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub converged: bool,
    pub diverged: bool,
    pub epochs_run: usize,
    /// +∞ when the run diverged; encoded as a string in JSON so the
    /// round-trip survives non-finite values.
    #[serde(with = "flatmeter_core::expstats::json_f64")]
    pub final_train_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub trained: usize,
    pub skipped: usize,
    pub converged: usize,
    pub diverged: usize,
    pub summary_csv: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
}

/// Creates (or re-opens) a run directory, pinning it to this config's hash.
pub fn prepare_run_dir(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<String> {
    std::fs::create_dir_all(out.join("runs"))?;
    let hash = config_hash(cfg);
    let hash_path = out.join("config.hash");
    if hash_path.exists() {
        let existing = std::fs::read_to_string(&hash_path)?.trim().to_string();
        if existing != hash {
            return Err(ConfigError::HashMismatch {
                dir: out.to_path_buf(),
                expected: hash,
                got: existing,
            }
            .into());
        }
    } else {
        write_json(&out.join("config.json"), cfg)?;
        std::fs::write(&hash_path, format!("{hash}\n"))?;
    }
    Ok(hash)
}

/// Reads the resolved config a run directory was created from.
pub fn read_run_config(out: &Path) -> anyhow::Result<ExperimentConfig> {
    read_json(&out.join("config.json"))
}

fn run_dir(out: &Path, run_id: &str) -> PathBuf {
    out.join("runs").join(run_id)
}

/// Trains every grid cell × repeat, skipping slots that already have a
/// training record (resume by config hash).
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    jobs: Option<usize>,
) -> anyhow::Result<TrainSummary> {
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    init_pool(jobs);
    let hash = prepare_run_dir(cfg, out)?;
    let bundle = dataset::resolve(&cfg.dataset)?;
    if bundle.train.input_dim() != cfg.shape[0] {
        return Err(ConfigError::BadShape {
            reason: format!(
                "input width {} does not match dataset dimension {}",
                cfg.shape[0],
                bundle.train.input_dim()
            ),
        }
        .into());
    }
    let slots = expand(cfg);
    let outcomes: Vec<anyhow::Result<(TrainedCell, bool)>> = slots
        .par_iter()
        .map(|slot| {
            let dir = run_dir(out, &slot.run_id);
            let trained_path = dir.join("trained.json");
            if trained_path.exists() {
                let cell: TrainedCell = read_json(&trained_path)?;
                return Ok((cell, false));
            }
            std::fs::create_dir_all(&dir)?;
            let net0 = initialize(&cfg.shape, slot.cell.init_scheme, slot.seed)?;
            let train_cfg = TrainConfig {
                init_scheme: slot.cell.init_scheme,
                batch_size: slot.cell.batch_size,
                learning_rate: slot.cell.learning_rate,
                seed: slot.seed,
                max_epochs: cfg.training.max_epochs,
                convergence: cfg.training.convergence,
                loss: cfg.loss,
            };
            let outcome = sgd_train(&net0, &bundle.train, &train_cfg)?;
            save_checkpoint(
                &dir.join("checkpoint.ckpt"),
                &outcome.network,
                &CheckpointMeta {
                    seed: slot.seed,
                    config_hash: hash.clone(),
                },
            )?;
            let cell = TrainedCell {
                run_id: slot.run_id.clone(),
                seed: slot.seed,
                init_scheme: slot.cell.init_scheme,
                batch_size: slot.cell.batch_size,
                learning_rate: slot.cell.learning_rate,
                converged: outcome.converged,
                diverged: outcome.diverged,
                epochs_run: outcome.epochs_run,
                final_train_error: outcome.final_train_error,
            };
            write_json(&trained_path, &cell)?;
            Ok((cell, true))
        })
        .collect();

    let mut cells = Vec::with_capacity(outcomes.len());
    let mut trained = 0;
    let mut skipped = 0;
    for r in outcomes {
        let (cell, fresh) = r?;
        if fresh {
            trained += 1;
        } else {
            skipped += 1;
        }
        cells.push(cell);
    }
    let summary_csv = out.join("train_summary.csv");
    let mut text = String::from(
        "run_id,seed,init_scheme,batch_size,learning_rate,converged,diverged,epochs_run,final_train_error\n",
    );
    for c in &cells {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.run_id,
            c.seed,
            c.init_scheme.name(),
            c.batch_size,
            c.learning_rate,
            c.converged,
            c.diverged,
            c.epochs_run,
            c.final_train_error
        ));
    }
    std::fs::write(&summary_csv, text)?;
    Ok(TrainSummary {
        trained,
        skipped,
        converged: cells.iter().filter(|c| c.converged).count(),
        diverged: cells.iter().filter(|c| c.diverged).count(),
        summary_csv,
    })
}

/// The training subset the Hessian is measured on (it is an empirical loss
/// in its own right; smaller sets keep desk-scale runtimes sane).
fn measurement_set(cfg: &ExperimentConfig, train: &LabeledSet) -> anyhow::Result<LabeledSet> {
    dataset::shrink(train, cfg.measurement.subset)
}

/// Runtime measurement overrides; `None` fields use the stored config.
#[derive(Debug, Clone, Default)]
pub struct MeasureOverrides {
    pub trace_mode: Option<String>,
    pub seed: Option<u64>,
}

/// Measures every trained checkpoint, writing one full [`RunRecord`] per
/// run. Deterministic per measurement seed.
pub fn cmd_measure(
    out: &Path,
    overrides: &MeasureOverrides,
    jobs: Option<usize>,
) -> anyhow::Result<Vec<RunRecord>> {
    init_pool(jobs);
    let cfg = read_run_config(out)?;
    let bundle = dataset::resolve(&cfg.dataset)?;
    let measure_set = measurement_set(&cfg, &bundle.train)?;
    let mut mcfg = cfg.measure_config();
    if let Some(tm) = &overrides.trace_mode {
        mcfg.trace = parse_trace_mode(tm).map_err(|reason| ConfigError::BadField {
            field: "trace-mode",
            reason,
        })?;
    }
    if let Some(seed) = overrides.seed {
        mcfg.seed = seed;
    }
    let slots = expand(&cfg);
    let records: Vec<anyhow::Result<RunRecord>> = slots
        .par_iter()
        .map(|slot| {
            let dir = run_dir(out, &slot.run_id);
            let trained_path = dir.join("trained.json");
            let ckpt_path = dir.join("checkpoint.ckpt");
            if !trained_path.exists() || !ckpt_path.exists() {
                return Err(PipelineError::MissingCheckpoint {
                    run_id: slot.run_id.clone(),
                }
                .into());
            }
            let cell: TrainedCell = read_json(&trained_path)?;
            let (net, _meta) = load_checkpoint(&ckpt_path)?;
            // A diverged run stays in the table (converged=false) but its
            // checkpoint cannot be measured; record NaN placeholders.
            let diverged = !cell.final_train_error.is_finite() || !net_is_finite(&net);
            let (test_error, report) = if diverged {
                (f64::NAN, FlatnessReport::unmeasured(&net.shape()))
            } else {
                (
                    train_error(&net, &bundle.test, cfg.loss)?,
                    full_report(&net, &measure_set, cfg.loss, &mcfg)?,
                )
            };
            let record = RunRecord::new(
                cell.run_id.clone(),
                cell.seed,
                cell.init_scheme,
                cell.batch_size,
                cell.learning_rate,
                cell.converged,
                cell.final_train_error,
                test_error,
                bundle.train.len(),
                bundle.test.len(),
                report,
                None,
            );
            write_json(&dir.join("record.json"), &record)?;
            Ok(record)
        })
        .collect();
    records.into_iter().collect()
}

/// Which record population a directory query reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordSource {
    Train,
    Reparam,
}

/// Loads measured records in deterministic grid order.
pub fn collect_records(out: &Path, source: RecordSource) -> anyhow::Result<Vec<RunRecord>> {
    let cfg = read_run_config(out)?;
    let slots = expand(&cfg);
    if slots.is_empty() {
        return Err(PipelineError::NoRuns {
            dir: out.to_path_buf(),
        }
        .into());
    }
    let mut records = Vec::new();
    match source {
        RecordSource::Train => {
            for slot in &slots {
                let path = run_dir(out, &slot.run_id).join("record.json");
                if !path.exists() {
                    return Err(PipelineError::NotMeasured {
                        run_id: slot.run_id.clone(),
                    }
                    .into());
                }
                records.push(read_json(&path)?);
            }
        }
        RecordSource::Reparam => {
            for slot in &slots {
                for rep in 0..cfg.reparam.repetitions {
                    let id = format!("{}-rp{rep}", slot.run_id);
                    let path = out.join("reparam").join("runs").join(&id).join("record.json");
                    if !path.exists() {
                        return Err(PipelineError::NotMeasured { run_id: id }.into());
                    }
                    records.push(read_json(&path)?);
                }
            }
        }
    }
    Ok(records)
}

/// One before/after reparameterization comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamPair {
    pub run_id: String,
    pub reparam_id: String,
    pub spec: ReparamSpec,
    pub certificate: Certificate,
    /// Largest relative change across layers for each invariant measure.
    pub kappa_max_rel_change: f64,
    pub kappa_tau_max_rel_change: f64,
    pub rho_max_rel_change: f64,
    /// Raw spectral quantities per layer, after/before — these are NOT
    /// invariant and demonstrate why the norm factor matters.
    pub raw_lambda_ratio: Vec<f64>,
    pub raw_trace_ratio: Vec<f64>,
    /// 1/α² per layer for layer-wise specs.
    pub expected_raw_ratio: Option<Vec<f64>>,
}

fn net_is_finite(net: &MlpNetwork) -> bool {
    net.params_flat().iter().all(|v| v.is_finite())
}

fn rel_change(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom <= f64::MIN_POSITIVE {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Overrides for `cmd_reparam`; `None` fields fall back to the stored
/// experiment config.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReparamOverrides {
    pub family: Option<ReparamFamily>,
    pub interval: Option<(f64, f64)>,
    pub seed: Option<u64>,
}

/// Applies a sampled function-preserving reparameterization to every
/// measured checkpoint, certifies it, and measures the rescaled network
/// with the same measurement configuration.
pub fn cmd_reparam(
    out: &Path,
    overrides: ReparamOverrides,
    jobs: Option<usize>,
) -> anyhow::Result<Vec<ReparamPair>> {
    init_pool(jobs);
    let cfg = read_run_config(out)?;
    let family = overrides.family.unwrap_or(cfg.reparam.family);
    let interval = overrides.interval.unwrap_or(cfg.reparam.interval);
    let base_seed = overrides.seed.unwrap_or_else(|| mix(cfg.grid.base_seed, 0x5EC5));
    let records = collect_records(out, RecordSource::Train)?;
    let bundle = dataset::resolve(&cfg.dataset)?;
    let measure_set = measurement_set(&cfg, &bundle.train)?;
    let mcfg = cfg.measure_config();
    let slots = expand(&cfg);

    let jobs_list: Vec<(usize, usize)> = (0..slots.len())
        .flat_map(|i| (0..cfg.reparam.repetitions).map(move |rep| (i, rep)))
        .collect();
    let pairs: Vec<anyhow::Result<Option<ReparamPair>>> = jobs_list
        .par_iter()
        .map(|&(i, rep)| {
            let slot = &slots[i];
            let record = &records[i];
            let ckpt_path = run_dir(out, &slot.run_id).join("checkpoint.ckpt");
            let (net, meta) = load_checkpoint(&ckpt_path)?;
            if record.is_diverged() || !net_is_finite(&net) {
                // No network to rescale; carry the diverged row through so
                // the reparam table mirrors the train table row-for-row.
                let id = format!("{}-rp{rep}", slot.run_id);
                let dir = out.join("reparam").join("runs").join(&id);
                std::fs::create_dir_all(&dir)?;
                let post_record = RunRecord {
                    run_id: id,
                    ..record.clone()
                };
                write_json(&dir.join("record.json"), &post_record)?;
                return Ok(None);
            }
            let spec_seed = mix(base_seed, (i * 1009 + rep) as u64);
            let spec = sample_random(&cfg.shape, family, interval, spec_seed)?;
            let rescaled = apply(&net, &spec)?;
            let certificate = verify_function_preserving(
                &net,
                &rescaled,
                cfg.reparam.certificate_probes,
                spec_seed,
                cfg.reparam.certificate_tolerance,
            )?;
            if !certificate.passed {
                bail!(
                    "reparameterization of '{}' failed its function-preservation certificate \
                     (max deviation {:.3e} > {:.3e})",
                    slot.run_id,
                    certificate.max_abs_deviation,
                    certificate.tolerance
                );
            }
            let after = full_report(&rescaled, &measure_set, cfg.loss, &mcfg)?;
            let before = &record.flatness;
            let mut kappa_dev = 0.0f64;
            let mut kappa_tau_dev = 0.0f64;
            let mut rho_dev = 0.0f64;
            let mut raw_lambda_ratio = Vec::with_capacity(before.layers.len());
            let mut raw_trace_ratio = Vec::with_capacity(before.layers.len());
            for (b, a) in before.layers.iter().zip(&after.layers) {
                kappa_dev = kappa_dev.max(rel_change(b.kappa, a.kappa));
                kappa_tau_dev = kappa_tau_dev.max(rel_change(b.kappa_tau, a.kappa_tau));
                for (rb, ra) in b.rho_neuron.iter().zip(&a.rho_neuron) {
                    rho_dev = rho_dev.max(rel_change(*rb, *ra));
                }
                raw_lambda_ratio.push(a.lambda_max / b.lambda_max);
                raw_trace_ratio.push(a.trace / b.trace);
            }
            let expected_raw_ratio = match &spec.kind {
                flatmeter_core::reparam::ReparamKind::Layerwise { factors } => {
                    Some(factors.iter().map(|a| 1.0 / (a * a)).collect())
                }
                _ => None,
            };
            let reparam_id = format!("{}-s{spec_seed}", family.name());
            let id = format!("{}-rp{rep}", slot.run_id);
            let dir = out.join("reparam").join("runs").join(&id);
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&dir.join("checkpoint.ckpt"), &rescaled, &meta)?;
            write_json(&dir.join("spec.json"), &spec)?;
            let post_record = RunRecord {
                run_id: id.clone(),
                flatness: after,
                reparam_id: Some(reparam_id.clone()),
                ..record.clone()
            };
            write_json(&dir.join("record.json"), &post_record)?;
            Ok(Some(ReparamPair {
                run_id: slot.run_id.clone(),
                reparam_id,
                spec,
                certificate,
                kappa_max_rel_change: kappa_dev,
                kappa_tau_max_rel_change: kappa_tau_dev,
                rho_max_rel_change: rho_dev,
                raw_lambda_ratio,
                raw_trace_ratio,
                expected_raw_ratio,
            }))
        })
        .collect();
    let pairs: Vec<ReparamPair> = pairs
        .into_iter()
        .filter_map(|p| p.transpose())
        .collect::<anyhow::Result<_>>()?;
    write_json(&out.join("reparam").join("pairs.json"), &pairs)?;
    Ok(pairs)
}

/// One row of the correlation table: a statistic for one measure key
/// against one generalization-error mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub mode: GenErrorMode,
    pub key: String,
    pub kind: StatKind,
    pub coefficient: f64,
    pub n: usize,
}

impl CorrelationRow {
    fn from_result(mode: GenErrorMode, r: CorrelationResult) -> Self {
        CorrelationRow {
            mode,
            key: r.key,
            kind: r.kind,
            coefficient: r.coefficient,
            n: r.n,
        }
    }
}

/// Per-layer and aggregate measure keys for an L-layer report.
pub fn default_measure_keys(layer_count: usize) -> Vec<String> {
    let mut keys = Vec::new();
    for metric in ["kappa", "kappa_tau", "rho", "rho_sigma"] {
        for l in 1..=layer_count {
            keys.push(format!("{metric}.l{l}"));
        }
    }
    for agg in [
        "kappa_max",
        "kappa_sum",
        "kappa_tau_max",
        "kappa_tau_sum",
        "rho_max",
        "rho_sum",
    ] {
        keys.push(agg.to_string());
    }
    keys
}

/// Hidden-layer κ_τ keys — the paper's headline measure, used for the
/// default scatter plots.
pub fn hidden_kappa_tau_keys(layer_count: usize) -> Vec<String> {
    (1..layer_count).map(|l| format!("kappa_tau.l{l}")).collect()
}

/// Correlates measures against generalization error over records gathered
/// from one or more run directories, writing `correlations.json`, the
/// records table, and scatter plots into `report_dir`.
pub fn cmd_correlate(
    dirs: &[PathBuf],
    keys: Option<Vec<String>>,
    stat: StatKind,
    source: RecordSource,
    report_dir: &Path,
) -> anyhow::Result<(Vec<CorrelationRow>, EmitOutput)> {
    let mut records: Vec<RunRecord> = Vec::new();
    for dir in dirs {
        records.extend(collect_records(dir, source)?);
    }
    if records.is_empty() {
        return Err(PipelineError::NoRuns {
            dir: dirs.first().cloned().unwrap_or_default(),
        }
        .into());
    }
    let layer_count = records[0].flatness.layers.len();
    let keys = keys.unwrap_or_else(|| default_measure_keys(layer_count));
    let mut rows = Vec::new();
    for key in &keys {
        for mode in GenErrorMode::ALL {
            let r = correlate_records(&records, key, mode, stat)?;
            rows.push(CorrelationRow::from_result(mode, r));
        }
    }
    let plots: Vec<(String, GenErrorMode)> = hidden_kappa_tau_keys(layer_count)
        .into_iter()
        .map(|k| (k, GenErrorMode::MeanDifference))
        .collect();
    let emitted = emit(&records, report_dir, &plots)?;
    write_json(&report_dir.join("correlations.json"), &rows)?;
    Ok((rows, emitted))
}

/// Everything a full preset run produces, for reporting and for tests.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub train: TrainSummary,
    pub records: Vec<RunRecord>,
    pub pairs: Vec<ReparamPair>,
    pub correlations: Vec<CorrelationRow>,
    pub reparam_correlations: Vec<CorrelationRow>,
    pub csv_path: PathBuf,
    pub seconds: f64,
}

/// Runs the full pipeline: train → measure → emit → reparam → correlate
/// (both populations).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    jobs: Option<usize>,
) -> anyhow::Result<ExperimentOutcome> {
    let t0 = Instant::now();
    let train = cmd_train(cfg, out, jobs)?;
    let records = cmd_measure(out, &MeasureOverrides::default(), jobs)?;
    let pairs = cmd_reparam(out, ReparamOverrides::default(), jobs)?;
    let (correlations, emitted) = cmd_correlate(
        &[out.to_path_buf()],
        None,
        StatKind::Spearman,
        RecordSource::Train,
        &out.join("report"),
    )?;
    let (reparam_correlations, _) = cmd_correlate(
        &[out.to_path_buf()],
        None,
        StatKind::Spearman,
        RecordSource::Reparam,
        &out.join("reparam").join("report"),
    )?;
    Ok(ExperimentOutcome {
        out_dir: out.to_path_buf(),
        train,
        records,
        pairs,
        correlations,
        reparam_correlations,
        csv_path: emitted.csv_path,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Measures a single checkpoint against a config's dataset and prints the
/// measure table to the given writer; `layers` filters the printed keys
/// (1-based).
pub fn measure_checkpoint(
    ckpt: &Path,
    cfg: &ExperimentConfig,
    layers: Option<&[usize]>,
    writer: &mut dyn std::io::Write,
) -> anyhow::Result<()> {
    let (net, _meta) = load_checkpoint(ckpt)?;
    let bundle = dataset::resolve(&cfg.dataset)?;
    let measure_set = measurement_set(cfg, &bundle.train)?;
    let report = full_report(&net, &measure_set, cfg.loss, &cfg.measure_config())?;
    if let Some(layers) = layers {
        let max = report.layers.len();
        for &l in layers {
            if l == 0 || l > max {
                bail!("layer index {l} out of range (network has layers 1..={max})");
            }
        }
    }
    for (key, value) in report.to_key_values() {
        let keep = match layers {
            None => true,
            Some(ls) => {
                // Per-layer keys look like "kappa.l2" or "rho.l2.j3".
                match key.split(".l").nth(1).and_then(|rest| {
                    rest.split('.').next().and_then(|n| n.parse::<usize>().ok())
                }) {
                    Some(l) => ls.contains(&l),
                    None => true, // aggregates
                }
            }
        };
        if keep {
            writeln!(writer, "{key} = {value}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset_teacher_smoke;
    use tempfile::tempdir;

    #[test]
    fn expand_enumerates_cells_times_repeats_deterministically() {
        let cfg = preset_teacher_smoke();
        let slots = expand(&cfg);
        assert_eq!(slots.len(), 2 * 3);
        assert_eq!(slots[0].run_id, "xavier_normal-b32-lr0.05-r0");
        assert_eq!(slots[5].run_id, "xavier_normal-b64-lr0.1-r2");
        let again = expand(&cfg);
        assert_eq!(slots, again);
        let mut seeds: Vec<u64> = slots.iter().map(|s| s.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 6, "slot seeds must be distinct");
    }

    #[test]
    fn run_dir_rejects_foreign_config() {
        let dir = tempdir().unwrap();
        let cfg = preset_teacher_smoke();
        prepare_run_dir(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.grid.base_seed += 1;
        let err = prepare_run_dir(&other, dir.path()).unwrap_err();
        assert!(err.to_string().contains("different config"), "{err}");
    }

    #[test]
    fn measure_without_training_reports_missing_checkpoint() {
        let dir = tempdir().unwrap();
        let cfg = preset_teacher_smoke();
        prepare_run_dir(&cfg, dir.path()).unwrap();
        let err = cmd_measure(dir.path(), &MeasureOverrides::default(), None).unwrap_err();
        assert!(err.to_string().contains("no checkpoint"), "{err}");
    }

    #[test]
    fn diverged_runs_are_recorded_and_skipped_downstream() {
        let dir = tempdir().unwrap();
        let mut cfg = preset_teacher_smoke();
        // Second cell's step size guarantees the weights blow up.
        cfg.grid.batch_sizes = vec![32, 32];
        cfg.grid.learning_rates = vec![0.05, 5.0e4];
        cfg.grid.repeats = 1;

        let summary = cmd_train(&cfg, dir.path(), None).unwrap();
        assert_eq!(summary.trained, 2);
        assert_eq!(summary.diverged, 1);

        let records = cmd_measure(dir.path(), &MeasureOverrides::default(), None).unwrap();
        assert_eq!(records.len(), 2);
        let bad = records.iter().find(|r| r.is_diverged()).unwrap();
        assert!(!bad.converged);
        assert!(bad.test_error.is_nan());
        assert!(bad.flatness.to_key_values().iter().all(|(_, v)| v.is_nan()));
        let good = records.iter().find(|r| !r.is_diverged()).unwrap();
        assert!(good.flatness.kappa_max.is_finite());
        // Both reports expose the same schema so tables stay rectangular.
        assert_eq!(
            bad.flatness.layers.len(),
            good.flatness.layers.len()
        );

        let pairs = cmd_reparam(dir.path(), ReparamOverrides::default(), None).unwrap();
        assert_eq!(pairs.len(), 1, "no pair for the diverged run");
        let reparam_records = collect_records(dir.path(), RecordSource::Reparam).unwrap();
        assert_eq!(reparam_records.len(), 2, "diverged row carried through");
        assert!(reparam_records.iter().any(|r| r.is_diverged()));
    }
}
