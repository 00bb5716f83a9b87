//! Metrics, the historical-average baseline, and the experiment runner.
//!
//! The runner reproduces the evaluation protocol shape: for every
//! (pattern, rate, fold) cell it masks the training data, refits
//! normalization on the masked data, trains an ensemble, predicts the
//! fold's held-out window, and scores point and interval quality against
//! the original (never-imputed) observations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::{predict, train_ensemble, QueryBatch, TrainConfig};
use crate::config::{DataSection, EncoderSection, ModelSection};
use crate::data::{
    assemble_samples, build_adjacency, fit_preprocess, load_csv, median_pairwise_distance,
    ObservationTable,
};
use crate::error::{Error, Result};
use crate::masking::{apply_pattern, make_cv_splits, MaskPattern};

/// Point-forecast metrics over originally observed targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// NaN when the targets are constant; see `r2_defined`.
    pub r2: f64,
    pub r2_defined: bool,
    /// Symmetric mean absolute percentage error, in percent (0..=200).
    pub smape: f64,
    pub n: usize,
}

/// rmse, mae, r2 and smape for paired vectors.
pub fn metrics_point(y: &[f64], y_hat: &[f64]) -> Result<PointMetrics> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::Contract(format!(
            "metrics_point needs equal non-empty inputs, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let n = y.len() as f64;
    let mut ss_res = 0.0;
    let mut abs = 0.0;
    let mut smape_sum = 0.0;
    for (&yi, &pi) in y.iter().zip(y_hat) {
        let r = yi - pi;
        ss_res += r * r;
        abs += r.abs();
        let denom = yi.abs() + pi.abs();
        if denom > 0.0 {
            smape_sum += 2.0 * r.abs() / denom;
        }
    }
    let mean_y = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    let (r2, r2_defined) = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot, true)
    } else {
        (f64::NAN, false)
    };
    Ok(PointMetrics {
        rmse: (ss_res / n).sqrt(),
        mae: abs / n,
        r2,
        r2_defined,
        smape: 100.0 * smape_sum / n,
        n: y.len(),
    })
}

/// Interval metrics. Targets with |y| <= 1e-6 are excluded from the
/// relative width mean and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub aiw: f64,
    pub riwm: f64,
    pub excluded: usize,
}

const RIWM_EPS: f64 = 1e-6;

pub fn metrics_interval(intervals: &[(f64, f64)], y: &[f64]) -> Result<IntervalMetrics> {
    if intervals.len() != y.len() {
        return Err(Error::Contract("one interval per target required".into()));
    }
    if intervals.is_empty() {
        return Ok(IntervalMetrics {
            aiw: 0.0,
            riwm: 0.0,
            excluded: 0,
        });
    }
    let n = intervals.len() as f64;
    let aiw = intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / n;
    let mut riwm_sum = 0.0;
    let mut used = 0usize;
    for ((lo, hi), &yi) in intervals.iter().zip(y) {
        if yi.abs() > RIWM_EPS {
            riwm_sum += (hi - lo) / yi;
            used += 1;
        }
    }
    let riwm = if used > 0 { riwm_sum / used as f64 } else { 0.0 };
    Ok(IntervalMetrics {
        aiw,
        riwm,
        excluded: intervals.len() - used,
    })
}

/// Historical-average baseline: per-station mean at each hour of day, with
/// station-mean and global-mean fallbacks.
#[derive(Debug, Clone)]
pub struct HaBaseline {
    hour_means: HashMap<(usize, i64), f64>,
    node_means: Vec<Option<f64>>,
    global_mean: f64,
    steps_per_day: i64,
}

pub fn ha_fit(train: &ObservationTable) -> Result<HaBaseline> {
    let steps_per_day = train
        .frequency()
        .steps_per_day()
        .ok_or_else(|| Error::Config("baseline needs a day-divisible frequency".into()))?;
    let n = train.stations().len();
    let mut sums: HashMap<(usize, i64), (f64, usize)> = HashMap::new();
    let mut node_sums = vec![(0.0, 0usize); n];
    let mut total = (0.0, 0usize);
    for r in train.records() {
        let Some(y) = r.target else { continue };
        let hod = r.t_idx.rem_euclid(steps_per_day);
        let e = sums.entry((r.station, hod)).or_insert((0.0, 0));
        e.0 += y;
        e.1 += 1;
        node_sums[r.station].0 += y;
        node_sums[r.station].1 += 1;
        total.0 += y;
        total.1 += 1;
    }
    if total.1 == 0 {
        return Err(Error::Contract("baseline needs at least one observation".into()));
    }
    Ok(HaBaseline {
        hour_means: sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        node_means: node_sums
            .into_iter()
            .map(|(s, c)| if c > 0 { Some(s / c as f64) } else { None })
            .collect(),
        global_mean: total.0 / total.1 as f64,
        steps_per_day,
    })
}

impl HaBaseline {
    /// Forecast: station mean at this hour of day, else station mean, else
    /// the global mean.
    pub fn forecast(&self, t_idx: i64, station: usize) -> f64 {
        let hod = t_idx.rem_euclid(self.steps_per_day);
        if let Some(&m) = self.hour_means.get(&(station, hod)) {
            return m;
        }
        if let Some(Some(m)) = self.node_means.get(station) {
            return *m;
        }
        self.global_mean
    }
}

/// Full evaluation specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Dataset CSV path.
    pub data: String,
    #[serde(default)]
    pub schema: DataSection,
    pub patterns: Vec<MaskPattern>,
    pub rates: Vec<f64>,
    /// Fold subset; default all folds.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    /// Restrict each fold's evaluation window to its first N steps.
    #[serde(default)]
    pub horizon_steps: Option<i64>,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub model: ModelSection,
    pub training: TrainConfig,
    #[serde(default = "crate::config::default_interval_level")]
    pub interval_level: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub mask_seed: u64,
    /// Covariate subset fed to the model (incremental-covariate runs);
    /// default all declared covariates.
    #[serde(default)]
    pub covariates_used: Option<Vec<String>>,
}

fn default_k_folds() -> usize {
    5
}

impl ExperimentSpec {
    pub fn from_json(raw: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(raw)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() || self.rates.is_empty() {
            return Err(Error::Config("patterns and rates must be non-empty".into()));
        }
        for &r in &self.rates {
            if !(0.0..=0.8).contains(&r) {
                return Err(Error::Config(format!("rate {r} outside [0, 0.8]")));
            }
        }
        if let Some(h) = self.horizon_steps {
            if h < 1 {
                return Err(Error::Config("horizon_steps must be >= 1".into()));
            }
        }
        self.training.validate()?;
        self.model.stack().validate()?;
        if !(0.0 < self.interval_level && self.interval_level < 1.0) {
            return Err(Error::Config(format!(
                "interval_level {} outside (0,1)",
                self.interval_level
            )));
        }
        Ok(())
    }

    /// Stable fingerprint of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        format!("{:016x}", fnv1a(canonical.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// One aggregate row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub pattern: String,
    pub rate: f64,
    pub fold: usize,
    pub model: String,
    pub rmse: f64,
    pub mae: f64,
    /// Null in JSON when undefined (constant targets).
    pub r2: Option<f64>,
    pub smape: f64,
    pub aiw: f64,
    pub riwm: f64,
    pub n: usize,
}

/// Aggregate report: deterministic given (spec, seeds). Wall-clock timings
/// are kept out of this structure so reruns are byte-identical; the runner
/// writes them to a separate timings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec_fingerprint: String,
    pub rows: Vec<ReportRow>,
}

/// Per-cell wall-clock timings, reported separately from the deterministic
/// aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub pattern: String,
    pub rate: f64,
    pub fold: usize,
    pub runtime_s: f64,
}

/// Model name used for this crate's rows in reports.
pub const MODEL_NAME: &str = "fieldcast";
/// Reference baseline name.
pub const BASELINE_NAME: &str = "ha";

/// Deterministic per-cell seed derivation.
fn cell_seed(base: u64, pattern_idx: usize, rate_idx: usize, fold: usize) -> u64 {
    base.wrapping_add(pattern_idx as u64 * 1_000_000)
        .wrapping_add(rate_idx as u64 * 1_000)
        .wrapping_add(fold as u64)
}

/// Everything `run_experiment` produces.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub timings: TimingReport,
    /// Per-cell prediction files written (empty when no out_dir given).
    pub prediction_files: Vec<PathBuf>,
}

/// Execute the full protocol. `jobs` bounds particle parallelism inside
/// each cell; cells themselves run sequentially in deterministic order.
/// When `out_dir` is given, per-cell prediction CSVs are written there.
pub fn run_experiment(
    spec: &ExperimentSpec,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    spec.validate()?;
    let schema = spec.schema.csv_schema()?;
    let loaded = load_csv(&spec.data, &schema)?;
    let mut table = loaded.table;
    table.discretize_time(None)?;
    if let Some(used) = &spec.covariates_used {
        table = table.project_covariates(used)?;
    }
    run_experiment_on(spec, &table, jobs, out_dir)
}

/// Same as [`run_experiment`] but on an already-loaded, discretized table
/// (used by tests and the synthetic examples).
pub fn run_experiment_on(
    spec: &ExperimentSpec,
    table: &ObservationTable,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    spec.validate()?;
    let metric = spec.schema.metric();
    let sigma_d = spec
        .schema
        .sigma_d
        .unwrap_or_else(|| median_pairwise_distance(table.stations(), metric));
    let graph = build_adjacency(table.stations(), sigma_d, metric)?;
    let splits = make_cv_splits(table, spec.k_folds, spec.split_seed)?;
    let folds: Vec<usize> = match &spec.folds {
        Some(list) => {
            for &f in list {
                if f >= spec.k_folds {
                    return Err(Error::Config(format!(
                        "fold {f} out of range 0..{}",
                        spec.k_folds
                    )));
                }
            }
            list.clone()
        }
        None => (0..spec.k_folds).collect(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut files = Vec::new();

    for (pi, &pattern) in spec.patterns.iter().enumerate() {
        for (ri, &rate) in spec.rates.iter().enumerate() {
            for &fold in &folds {
                let started = std::time::Instant::now();
                let cell = run_cell(
                    spec, table, &graph, &splits, pattern, rate, fold,
                    cell_seed(spec.mask_seed, pi, ri, fold),
                    cell_seed(spec.training.master_seed, pi, ri, fold),
                    jobs,
                )
                .map_err(|e| {
                    Error::Contract(format!(
                        "cell (pattern={}, rate={rate}, fold={fold}): {e}",
                        pattern.name()
                    ))
                })?;

                if let Some(dir) = out_dir {
                    let name =
                        format!("predictions_{}_{:.2}_{}.csv", pattern.name(), rate, fold);
                    let path = dir.join(name);
                    write_cell_csv(&path, table, &cell)?;
                    files.push(path);
                }

                let y = &cell.y_true;
                let ours_point = metrics_point(y, &cell.y_pred)?;
                let ours_int = metrics_interval(&cell.intervals, y)?;
                rows.push(report_row(pattern, rate, fold, MODEL_NAME, ours_point, ours_int));

                let ha_point = metrics_point(y, &cell.ha_pred)?;
                rows.push(report_row(
                    pattern,
                    rate,
                    fold,
                    BASELINE_NAME,
                    ha_point,
                    IntervalMetrics {
                        aiw: 0.0,
                        riwm: 0.0,
                        excluded: 0,
                    },
                ));

                timings.push(TimingRow {
                    pattern: pattern.name().to_string(),
                    rate,
                    fold,
                    runtime_s: started.elapsed().as_secs_f64(),
                });
            }
        }
    }

    Ok(ExperimentOutput {
        report: ExperimentReport {
            spec_fingerprint: spec.fingerprint(),
            rows,
        },
        timings: TimingReport { rows: timings },
        prediction_files: files,
    })
}

fn report_row(
    pattern: MaskPattern,
    rate: f64,
    fold: usize,
    model: &str,
    p: PointMetrics,
    i: IntervalMetrics,
) -> ReportRow {
    ReportRow {
        pattern: pattern.name().to_string(),
        rate,
        fold,
        model: model.to_string(),
        rmse: p.rmse,
        mae: p.mae,
        r2: if p.r2_defined { Some(p.r2) } else { None },
        smape: p.smape,
        aiw: i.aiw,
        riwm: i.riwm,
        n: p.n,
    }
}

/// Raw per-cell outcome.
struct CellOutcome {
    cells: Vec<(i64, usize)>,
    y_true: Vec<f64>,
    y_pred: Vec<f64>,
    intervals: Vec<(f64, f64)>,
    ha_pred: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec: &ExperimentSpec,
    table: &ObservationTable,
    graph: &crate::data::MonitoringGraph,
    splits: &crate::masking::SplitPlan,
    pattern: MaskPattern,
    rate: f64,
    fold: usize,
    mask_seed: u64,
    master_seed: u64,
    jobs: usize,
) -> Result<CellOutcome> {
    let train_full = splits.train_table(table, fold);
    let plan = apply_pattern(&train_full, pattern, rate, mask_seed)?;
    let masked = plan.apply(&train_full)?;

    // normalization is refit on the masked training data
    let stats = fit_preprocess(&masked)?;
    let span = masked
        .time_index_range()
        .map(|(lo, hi)| hi - lo + 1)
        .unwrap_or(0);
    let enc_cfg = spec.encoder.resolve(span)?;

    let mut training = spec.training.clone();
    training.master_seed = master_seed;
    let (ensemble, _curves) =
        train_ensemble(&masked, graph, &stats, enc_cfg, spec.model.stack(), training, jobs)?;

    let mut test = splits.test_table(table, fold);
    if let Some(h) = spec.horizon_steps {
        let start = splits.test_window_start;
        test = test.filter_records(|r| r.t_idx < start + h);
    }
    let test_samples = assemble_samples(&test, &ensemble.stats)?;
    if test_samples.is_empty() {
        return Err(Error::Contract("fold has no observed test targets".into()));
    }
    let queries = QueryBatch::from_samples(&test_samples, &ensemble.encoder)?;
    let ctx = ensemble.context();
    let mixtures = predict(&ensemble, &ctx, &queries)?;

    let ha = ha_fit(&masked)?;
    let mut y_true = Vec::with_capacity(mixtures.len());
    let mut y_pred = Vec::with_capacity(mixtures.len());
    let mut intervals = Vec::with_capacity(mixtures.len());
    let mut ha_pred = Vec::with_capacity(mixtures.len());
    for (i, mix) in mixtures.iter().enumerate() {
        let (t_idx, station) = test_samples.back_refs[i];
        y_true.push(ensemble.stats.unnormalize_target(test_samples.labels[i]));
        y_pred.push(mix.point_mean());
        intervals.push(mix.interval(spec.interval_level)?);
        ha_pred.push(ha.forecast(t_idx, station));
    }
    Ok(CellOutcome {
        cells: test_samples.back_refs.clone(),
        y_true,
        y_pred,
        intervals,
        ha_pred,
    })
}

fn write_cell_csv(path: &Path, table: &ObservationTable, cell: &CellOutcome) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["time_index", "station_id", "y_true", "y_pred", "lower", "upper"])?;
    for (i, &(t_idx, station)) in cell.cells.iter().enumerate() {
        let (lo, hi) = cell.intervals[i];
        w.write_record(&[
            t_idx.to_string(),
            table.stations().get(station).id.clone(),
            format!("{}", cell.y_true[i]),
            format!("{}", cell.y_pred[i]),
            format!("{lo}"),
            format!("{hi}"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Tidy long-format plot rows: one per (model, pattern, rate, metric),
/// averaged over folds.
pub fn plot_data(report: &ExperimentReport) -> Vec<(String, String, f64, String, f64)> {
    #[derive(Default)]
    struct Acc {
        sums: [f64; 6],
        n: usize,
        r2_n: usize,
    }
    let mut acc: std::collections::BTreeMap<(String, String, u64), Acc> =
        std::collections::BTreeMap::new();
    for row in &report.rows {
        let key = (row.model.clone(), row.pattern.clone(), row.rate.to_bits());
        let a = acc.entry(key).or_default();
        a.sums[0] += row.rmse;
        a.sums[1] += row.mae;
        if let Some(r2) = row.r2 {
            a.sums[2] += r2;
            a.r2_n += 1;
        }
        a.sums[3] += row.smape;
        a.sums[4] += row.aiw;
        a.sums[5] += row.riwm;
        a.n += 1;
    }
    let metric_names = ["rmse", "mae", "r2", "smape", "aiw", "riwm"];
    let mut out = Vec::new();
    for ((model, pattern, rate_bits), a) in acc {
        let rate = f64::from_bits(rate_bits);
        for (k, name) in metric_names.iter().enumerate() {
            let denom = if *name == "r2" { a.r2_n } else { a.n };
            if denom == 0 {
                continue;
            }
            out.push((
                model.clone(),
                pattern.clone(),
                rate,
                name.to_string(),
                a.sums[k] / denom as f64,
            ));
        }
    }
    out
}
