//! Generalization-error estimation, correlation statistics, and result
//! emission (CSV tables and scatter plots).
//!
//! Emission is deterministic: the same records in the same order produce
//! byte-identical files, so result tables can be diffed across reruns.

use crate::flatness::FlatnessReport;
use crate::net::{classification_error, empirical_error, LabeledSet, LossKind, MlpNetwork, NetError};
use crate::trainer::InitScheme;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug)]
pub enum ExpStatsError {
    LengthMismatch {
        xs: usize,
        ys: usize,
    },
    TooFewRuns {
        needed: usize,
        got: usize,
    },
    NonFinite {
        context: &'static str,
    },
    /// One of the correlated variables is constant.
    DegenerateVariance {
        key: String,
    },
    MissingMeasure {
        key: String,
    },
    /// Records disagree on layer count, so no single CSV schema fits.
    SchemaMismatch {
        expected: usize,
        got: usize,
    },
    NoRecords,
    Io(std::io::Error),
    Csv(csv::Error),
    Net(NetError),
}

impl fmt::Display for ExpStatsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpStatsError::LengthMismatch { xs, ys } => {
                write!(f, "variable lengths differ: {xs} vs {ys}")
            }
            ExpStatsError::TooFewRuns { needed, got } => {
                write!(f, "need at least {needed} usable runs, have {got}")
            }
            ExpStatsError::NonFinite { context } => {
                write!(f, "non-finite value in {context}")
            }
            ExpStatsError::DegenerateVariance { key } => {
                write!(f, "variance of '{key}' is zero; correlation undefined")
            }
            ExpStatsError::MissingMeasure { key } => {
                write!(f, "no measure named '{key}' in the flatness report")
            }
            ExpStatsError::SchemaMismatch { expected, got } => {
                write!(f, "record has {got} layers, table schema expects {expected}")
            }
            ExpStatsError::NoRecords => write!(f, "no records to emit"),
            ExpStatsError::Io(e) => e.fmt(f),
            ExpStatsError::Csv(e) => e.fmt(f),
            ExpStatsError::Net(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for ExpStatsError {}

impl From<std::io::Error> for ExpStatsError {
    fn from(e: std::io::Error) -> Self {
        ExpStatsError::Io(e)
    }
}

impl From<csv::Error> for ExpStatsError {
    fn from(e: csv::Error) -> Self {
        ExpStatsError::Csv(e)
    }
}

impl From<NetError> for ExpStatsError {
    fn from(e: NetError) -> Self {
        ExpStatsError::Net(e)
    }
}

/// How the generalization error is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenErrorMode {
    /// mean test error − mean train error
    MeanDifference,
    /// (|train|/|test|)·(summed test error) − summed train error
    ScaledSum,
}

impl GenErrorMode {
    pub const ALL: [GenErrorMode; 2] = [GenErrorMode::MeanDifference, GenErrorMode::ScaledSum];

    pub fn name(self) -> &'static str {
        match self {
            GenErrorMode::MeanDifference => "mean_difference",
            GenErrorMode::ScaledSum => "scaled_sum",
        }
    }
}

impl fmt::Display for GenErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GenErrorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_difference" => Ok(GenErrorMode::MeanDifference),
            "scaled_sum" => Ok(GenErrorMode::ScaledSum),
            other => Err(format!(
                "unknown generalization-error mode '{other}' (expected mean_difference or scaled_sum)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Pearson,
    Spearman,
}

impl StatKind {
    pub fn name(self) -> &'static str {
        match self {
            StatKind::Pearson => "pearson",
            StatKind::Spearman => "spearman",
        }
    }
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StatKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pearson" => Ok(StatKind::Pearson),
            "spearman" => Ok(StatKind::Spearman),
            other => Err(format!(
                "unknown statistic '{other}' (expected pearson or spearman)"
            )),
        }
    }
}

/// serde adapter for f64 fields that must survive JSON round-trips even
/// when non-finite (serde_json writes bare inf/NaN as null): non-finite
/// values are encoded as the strings "inf", "-inf", "NaN".
pub mod json_f64 {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};
    use std::fmt;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct F64Visitor;
        impl Visitor<'_> for F64Visitor {
            type Value = f64;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a float or one of \"inf\", \"-inf\", \"NaN\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "NaN" => Ok(f64::NAN),
                    other => Err(E::custom(format!("unrecognized float string '{other}'"))),
                }
            }
        }
        d.deserialize_any(F64Visitor)
    }
}

/// [`json_f64`] element-wise over a `Vec<f64>`.
pub mod json_f64_vec {
    use super::json_f64;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    struct Elem(f64);

    impl Serialize for Elem {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            json_f64::serialize(&self.0, s)
        }
    }

    impl<'de> Deserialize<'de> for Elem {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            json_f64::deserialize(d).map(Elem)
        }
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &x in v {
            seq.serialize_element(&Elem(x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let elems: Vec<Elem> = Vec::deserialize(d)?;
        Ok(elems.into_iter().map(|e| e.0).collect())
    }
}

/// One trained-and-measured run, the unit of the experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub init_scheme: InitScheme,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub converged: bool,
    #[serde(with = "json_f64")]
    pub train_error: f64,
    #[serde(with = "json_f64")]
    pub test_error: f64,
    #[serde(with = "json_f64")]
    pub gen_err_mean: f64,
    #[serde(with = "json_f64")]
    pub gen_err_scaled: f64,
    pub flatness: FlatnessReport,
    /// Set when the measures were taken after a reparameterization.
    pub reparam_id: Option<String>,
}

impl RunRecord {
    /// Fills in both generalization-error fields from the stored errors and
    /// the set sizes, keeping the fields consistent by construction.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        run_id: String,
        seed: u64,
        init_scheme: InitScheme,
        batch_size: usize,
        learning_rate: f64,
        converged: bool,
        train_error: f64,
        test_error: f64,
        n_train: usize,
        n_test: usize,
        flatness: FlatnessReport,
        reparam_id: Option<String>,
    ) -> Self {
        let ratio = n_train as f64 / n_test as f64;
        RunRecord {
            run_id,
            seed,
            init_scheme,
            batch_size,
            learning_rate,
            converged,
            train_error,
            test_error,
            gen_err_mean: test_error - train_error,
            gen_err_scaled: ratio * (test_error * n_test as f64) - train_error * n_train as f64,
            flatness,
            reparam_id,
        }
    }

    /// Training blew up: non-finite train error by the divergence policy.
    pub fn is_diverged(&self) -> bool {
        !self.train_error.is_finite()
    }

    pub fn gen_error(&self, mode: GenErrorMode) -> f64 {
        match mode {
            GenErrorMode::MeanDifference => self.gen_err_mean,
            GenErrorMode::ScaledSum => self.gen_err_scaled,
        }
    }

    /// Looks a measure up by its table key (e.g. `kappa_tau.l2`, `rho_max`).
    pub fn measure(&self, key: &str) -> Result<f64, ExpStatsError> {
        self.flatness
            .to_key_values()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| ExpStatsError::MissingMeasure {
                key: key.to_string(),
            })
    }

    fn setup_label(&self) -> String {
        format!(
            "{} b={} lr={}",
            self.init_scheme.name(),
            self.batch_size,
            self.learning_rate
        )
    }
}

/// Mean per-sample error under the trainer's convention: squared loss uses
/// the empirical squared error, cross-entropy uses the classification error.
fn set_error(net: &MlpNetwork, set: &LabeledSet, loss: LossKind) -> Result<f64, NetError> {
    match loss {
        LossKind::Squared => empirical_error(net, set, loss),
        LossKind::SoftmaxCrossEntropy => classification_error(net, set),
    }
}

/// Estimated generalization error of `net` given a train/test pair.
pub fn generalization_error(
    net: &MlpNetwork,
    train: &LabeledSet,
    test: &LabeledSet,
    loss: LossKind,
    mode: GenErrorMode,
) -> Result<f64, ExpStatsError> {
    let train_mean = set_error(net, train, loss)?;
    let test_mean = set_error(net, test, loss)?;
    Ok(match mode {
        GenErrorMode::MeanDifference => test_mean - train_mean,
        GenErrorMode::ScaledSum => {
            let ratio = train.len() as f64 / test.len() as f64;
            ratio * (test_mean * test.len() as f64) - train_mean * train.len() as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub key: String,
    pub kind: StatKind,
    pub coefficient: f64,
    pub n: usize,
}

fn validate_pairs(xs: &[f64], ys: &[f64]) -> Result<(), ExpStatsError> {
    if xs.len() != ys.len() {
        return Err(ExpStatsError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(ExpStatsError::TooFewRuns {
            needed: 3,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(ExpStatsError::NonFinite {
            context: "correlation input",
        });
    }
    Ok(())
}

fn pearson_raw(xs: &[f64], ys: &[f64], key: &str) -> Result<f64, ExpStatsError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ExpStatsError::DegenerateVariance {
            key: key.to_string(),
        });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks with ties replaced by the average of the tied positions (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Correlation between two variables. `key` names the x variable in the
/// result and in error messages.
pub fn correlation(
    key: &str,
    xs: &[f64],
    ys: &[f64],
    kind: StatKind,
) -> Result<CorrelationResult, ExpStatsError> {
    validate_pairs(xs, ys)?;
    let coefficient = match kind {
        StatKind::Pearson => pearson_raw(xs, ys, key)?,
        StatKind::Spearman => pearson_raw(&average_ranks(xs), &average_ranks(ys), key)?,
    };
    Ok(CorrelationResult {
        key: key.to_string(),
        kind,
        coefficient,
        n: xs.len(),
    })
}

/// Correlates one flatness measure against one generalization-error mode
/// across all converged runs with finite values on both axes.
pub fn correlate_records(
    records: &[RunRecord],
    key: &str,
    mode: GenErrorMode,
    kind: StatKind,
) -> Result<CorrelationResult, ExpStatsError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in records {
        if !r.converged {
            continue;
        }
        let x = r.measure(key)?;
        let y = r.gen_error(mode);
        if x.is_finite() && y.is_finite() {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.len() < 3 {
        return Err(ExpStatsError::TooFewRuns {
            needed: 3,
            got: xs.len(),
        });
    }
    correlation(key, &xs, &ys, kind)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmitOutput {
    pub csv_path: PathBuf,
    pub plot_paths: Vec<PathBuf>,
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// Writes the experiment table and one scatter plot per requested
/// (measure key, generalization-error mode) pair into `out_dir`.
///
/// The CSV holds every record (diverged runs included, `converged=false`);
/// plots show converged runs only. Output bytes depend only on the records
/// and their order.
pub fn emit(
    records: &[RunRecord],
    out_dir: &Path,
    plots: &[(String, GenErrorMode)],
) -> Result<EmitOutput, ExpStatsError> {
    if records.is_empty() {
        return Err(ExpStatsError::NoRecords);
    }
    std::fs::create_dir_all(out_dir)?;
    let layer_count = records[0].flatness.layers.len();
    for r in records {
        if r.flatness.layers.len() != layer_count {
            return Err(ExpStatsError::SchemaMismatch {
                expected: layer_count,
                got: r.flatness.layers.len(),
            });
        }
    }

    let csv_path = out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut header = vec![
        "run_id".to_string(),
        "seed".to_string(),
        "init_scheme".to_string(),
        "batch_size".to_string(),
        "learning_rate".to_string(),
        "converged".to_string(),
        "train_error".to_string(),
        "test_error".to_string(),
        "gen_err_mean".to_string(),
        "gen_err_scaled".to_string(),
    ];
    for metric in ["kappa", "kappa_tau", "rho", "rho_sigma"] {
        for l in 1..=layer_count {
            header.push(format!("{metric}.l{l}"));
        }
    }
    header.extend(
        [
            "kappa_max",
            "kappa_sum",
            "kappa_tau_max",
            "kappa_tau_sum",
            "rho_max",
            "rho_sum",
        ]
        .map(str::to_string),
    );
    header.push("reparam_id".to_string());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.run_id.clone(),
            r.seed.to_string(),
            r.init_scheme.name().to_string(),
            r.batch_size.to_string(),
            fmt_float(r.learning_rate),
            r.converged.to_string(),
            fmt_float(r.train_error),
            fmt_float(r.test_error),
            fmt_float(r.gen_err_mean),
            fmt_float(r.gen_err_scaled),
        ];
        for pick in [
            |m: &crate::flatness::LayerMeasures| m.kappa,
            |m: &crate::flatness::LayerMeasures| m.kappa_tau,
            |m: &crate::flatness::LayerMeasures| m.rho,
            |m: &crate::flatness::LayerMeasures| m.rho_sigma,
        ] {
            for layer in &r.flatness.layers {
                row.push(fmt_float(pick(layer)));
            }
        }
        let f = &r.flatness;
        for agg in [
            f.kappa_max,
            f.kappa_sum,
            f.kappa_tau_max,
            f.kappa_tau_sum,
            f.rho_max,
            f.rho_sum,
        ] {
            row.push(fmt_float(agg));
        }
        row.push(r.reparam_id.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    drop(w);

    let mut plot_paths = Vec::with_capacity(plots.len());
    for (key, mode) in plots {
        let svg = scatter_svg(records, key, *mode)?;
        let file = format!("scatter_{}_{}.svg", key.replace('.', "-"), mode.name());
        let path = out_dir.join(file);
        std::fs::write(&path, svg)?;
        plot_paths.push(path);
    }
    Ok(EmitOutput {
        csv_path,
        plot_paths,
    })
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const PLOT_W: f64 = 860.0;
const PLOT_H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 280.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

/// Scatter of one measure (log-scaled x) against one generalization-error
/// mode (linear y), converged runs only, colored by training setup.
fn scatter_svg(
    records: &[RunRecord],
    key: &str,
    mode: GenErrorMode,
) -> Result<String, ExpStatsError> {
    // (log10 measure, gen error, setup label) per plottable record.
    let mut points = Vec::new();
    for r in records {
        if !r.converged {
            continue;
        }
        let x = r.measure(key)?;
        let y = r.gen_error(mode);
        if x.is_finite() && x > 0.0 && y.is_finite() {
            points.push((x.log10(), y, r.setup_label()));
        }
    }
    let mut setups: Vec<String> = points.iter().map(|(_, _, s)| s.clone()).collect();
    setups.sort();
    setups.dedup();

    let (x_lo, x_hi, y_lo, y_hi) = if points.is_empty() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let mut x_lo = f64::INFINITY;
        let mut x_hi = f64::NEG_INFINITY;
        let mut y_lo = f64::INFINITY;
        let mut y_hi = f64::NEG_INFINITY;
        for &(x, y, _) in &points {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
        let xpad = (0.05 * (x_hi - x_lo)).max(0.25);
        let ypad = (0.05 * (y_hi - y_lo)).max(1e-12).max(0.05 * y_hi.abs());
        (x_lo - xpad, x_hi + xpad, y_lo - ypad, y_hi + ypad)
    };
    let inner_w = PLOT_W - MARGIN_L - MARGIN_R;
    let inner_h = PLOT_H - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * inner_w;
    let sy = |y: f64| MARGIN_T + (y_hi - y) / (y_hi - y_lo) * inner_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{} vs generalization error ({})</text>\n",
        MARGIN_L + inner_w / 2.0,
        key,
        mode.name()
    ));
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{inner_w}\" height=\"{inner_h}\" \
         fill=\"none\" stroke=\"#333\"/>\n"
    ));

    // Decade ticks on the log x axis.
    let first_decade = x_lo.ceil() as i64;
    let last_decade = x_hi.floor() as i64;
    let span = (last_decade - first_decade).max(0);
    let step = 1 + span / 8;
    let mut d = first_decade;
    while d <= last_decade {
        let px = sx(d as f64);
        svg.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#999\"/>\n",
            MARGIN_T + inner_h,
            MARGIN_T + inner_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">1e{d}</text>\n",
            MARGIN_T + inner_h + 20.0
        ));
        d += step;
    }
    for i in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let py = sy(y);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{MARGIN_L}\" y2=\"{py:.1}\" stroke=\"#999\"/>\n",
            MARGIN_L - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{y:.3e}</text>\n",
            MARGIN_L - 8.0,
            py + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{key} (log scale)</text>\n",
        MARGIN_L + inner_w / 2.0,
        PLOT_H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">generalization error</text>\n",
        MARGIN_T + inner_h / 2.0,
        MARGIN_T + inner_h / 2.0
    ));

    for (x, y, setup) in &points {
        let idx = setups.iter().position(|s| s == setup).expect("known setup");
        let color = PALETTE[idx % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n",
            sx(*x),
            sy(*y)
        ));
    }
    let legend_x = MARGIN_L + inner_w + 20.0;
    for (i, setup) in setups.iter().enumerate() {
        let y = MARGIN_T + 12.0 + 18.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!(
            "<rect x=\"{legend_x:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            y - 10.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\">{setup}</text>\n",
            legend_x + 18.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
