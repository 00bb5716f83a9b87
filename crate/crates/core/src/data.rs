//! Observation tables, preprocessing, and the monitoring graph.
//!
//! Data flows long-format: one row per (timestamp, station) with an optional
//! target and optional exogenous covariates. Targets that are absent are
//! tracked explicitly (the observed set O with size eta) rather than imputed.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Sampling frequency of a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frequency {
    seconds: u64,
}

impl Frequency {
    pub fn hourly() -> Self {
        Self { seconds: 3600 }
    }

    pub fn minutes(n: u64) -> Self {
        Self { seconds: n * 60 }
    }

    pub fn seconds(&self) -> u64 {
        self.seconds
    }

    /// Parse config strings like `hourly`, `daily`, `30min`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hourly" => Ok(Self::hourly()),
            "daily" => Ok(Self { seconds: 86_400 }),
            other => {
                if let Some(mins) = other.strip_suffix("min") {
                    let n: u64 = mins
                        .parse()
                        .map_err(|_| Error::Config(format!("bad frequency `{other}`")))?;
                    if n == 0 {
                        return Err(Error::Config("frequency must be positive".into()));
                    }
                    Ok(Self::minutes(n))
                } else {
                    Err(Error::Config(format!(
                        "unknown frequency `{other}` (expected hourly, daily, or Nmin)"
                    )))
                }
            }
        }
    }

    /// Steps per day, if a day is a whole number of steps.
    pub fn steps_per_day(&self) -> Option<i64> {
        if 86_400 % self.seconds == 0 {
            Some((86_400 / self.seconds) as i64)
        } else {
            None
        }
    }
}

/// One monitoring site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

/// The fixed set of monitoring sites; indices are stable and shared by every
/// table derived from the same load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StationSet {
    stations: Vec<Station>,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &stations {
            if !s.lat.is_finite() || !s.lon.is_finite() {
                return Err(Error::Domain(format!("station `{}` has non-finite coordinates", s.id)));
            }
            if !seen.insert(s.id.clone()) {
                return Err(Error::Config(format!("duplicate station id `{}`", s.id)));
            }
        }
        if stations.is_empty() {
            return Err(Error::Config("station set must not be empty".into()));
        }
        Ok(Self { stations })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Station {
        &self.stations[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Station> {
        self.stations.iter()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }
}

/// One (timestamp, station) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub timestamp: DateTime<Utc>,
    /// Integer time index; valid after `discretize_time`.
    pub t_idx: i64,
    pub station: usize,
    /// None means the cell is excluded from the observed set O.
    pub target: Option<f64>,
    pub covariates: Vec<f64>,
}

/// Long-format observation table with an explicit observed-mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTable {
    stations: StationSet,
    records: Vec<ObservationRecord>,
    freq: Frequency,
    covariate_names: Vec<String>,
    t0: Option<DateTime<Utc>>,
}

impl ObservationTable {
    pub fn new(
        stations: StationSet,
        records: Vec<ObservationRecord>,
        freq: Frequency,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let mut keys = HashSet::with_capacity(records.len());
        for r in &records {
            if r.station >= stations.len() {
                return Err(Error::Contract(format!("record references station {}", r.station)));
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::Dimension(format!(
                    "record has {} covariates, schema declares {}",
                    r.covariates.len(),
                    covariate_names.len()
                )));
            }
            if !keys.insert((r.timestamp, r.station)) {
                return Err(Error::DuplicateKey {
                    timestamp: r.timestamp.to_rfc3339(),
                    station: stations.get(r.station).id.clone(),
                });
            }
        }
        Ok(Self {
            stations,
            records,
            freq,
            covariate_names,
            t0: None,
        })
    }

    pub fn stations(&self) -> &StationSet {
        &self.stations
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn frequency(&self) -> Frequency {
        self.freq
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn reference_time(&self) -> Option<DateTime<Utc>> {
        self.t0
    }

    /// Number of observed cells (eta).
    pub fn eta(&self) -> usize {
        self.records.iter().filter(|r| r.target.is_some()).count()
    }

    /// Observed (t_idx, station) cells; requires a discretized table.
    pub fn observed_cells(&self) -> Vec<(i64, usize)> {
        self.records
            .iter()
            .filter(|r| r.target.is_some())
            .map(|r| (r.t_idx, r.station))
            .collect()
    }

    pub fn time_index_range(&self) -> Option<(i64, i64)> {
        let mut it = self.records.iter().map(|r| r.t_idx);
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for t in it {
            lo = lo.min(t);
            hi = hi.max(t);
        }
        Some((lo, hi))
    }

    /// Map timestamps to integer indices as offsets from `t0` in frequency
    /// units. `None` uses the earliest timestamp, making the minimum index 0.
    pub fn discretize_time(&mut self, t0: Option<DateTime<Utc>>) -> Result<()> {
        let t0 = match t0 {
            Some(t) => t,
            None => self
                .records
                .iter()
                .map(|r| r.timestamp)
                .min()
                .ok_or_else(|| Error::Contract("cannot discretize an empty table".into()))?,
        };
        let step = self.freq.seconds as i64;
        for r in &mut self.records {
            let delta = r.timestamp.timestamp() - t0.timestamp();
            if delta < 0 {
                return Err(Error::Contract(format!(
                    "timestamp {} is before the reference time {}",
                    r.timestamp.to_rfc3339(),
                    t0.to_rfc3339()
                )));
            }
            if delta % step != 0 {
                return Err(Error::Alignment(r.timestamp.to_rfc3339()));
            }
            r.t_idx = delta / step;
        }
        self.t0 = Some(t0);
        Ok(())
    }

    /// Copy of this table with the targets of `removed` cells made absent.
    /// Covariates of removed cells are untouched.
    pub fn with_targets_removed(&self, removed: &BTreeSet<(i64, usize)>) -> ObservationTable {
        let mut out = self.clone();
        for r in &mut out.records {
            if removed.contains(&(r.t_idx, r.station)) {
                r.target = None;
            }
        }
        out
    }

    /// Copy containing only records matching the predicate. Station indices
    /// are preserved so graphs and descriptors stay aligned.
    pub fn filter_records(&self, keep: impl Fn(&ObservationRecord) -> bool) -> ObservationTable {
        let mut out = self.clone();
        out.records.retain(|r| keep(r));
        out
    }

    /// Copy keeping only the named covariate columns, in the given order.
    /// Supports incremental-covariate experiments.
    pub fn project_covariates(&self, keep: &[String]) -> Result<ObservationTable> {
        let positions: Vec<usize> = keep
            .iter()
            .map(|name| {
                self.covariate_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))
            })
            .collect::<Result<_>>()?;
        let mut out = self.clone();
        out.covariate_names = keep.to_vec();
        for r in &mut out.records {
            r.covariates = positions.iter().map(|&p| r.covariates[p]).collect();
        }
        Ok(out)
    }
}

/// Declared CSV layout: fixed columns plus named covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub covariates: Vec<String>,
    pub frequency: Frequency,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            frequency: Frequency::hourly(),
        }
    }
}

/// Result of a CSV load: the table plus how many malformed rows were
/// filtered out.
#[derive(Debug)]
pub struct LoadOutcome {
    pub table: ObservationTable,
    pub dropped_rows: usize,
}

fn parse_timestamp(raw: &str, line: usize) -> Result<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Ok(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(Utc.from_utc_datetime(&naive));
        }
    }
    Err(Error::Timestamp {
        value: raw.to_string(),
        line,
    })
}

/// Load a long-format observation CSV.
///
/// Header: `timestamp,station_id,lat,lon,target` followed by the schema's
/// covariate columns. An empty target field marks the cell unobserved. Rows
/// with malformed coordinates or covariates are dropped (sample filtering);
/// unparsable timestamps and duplicate (time, station) keys are hard errors.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LoadOutcome> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_ts = col("timestamp")?;
    let c_station = col("station_id")?;
    let c_lat = col("lat")?;
    let c_lon = col("lon")?;
    let c_target = col("target")?;
    let c_covs: Vec<usize> = schema
        .covariates
        .iter()
        .map(|name| col(name))
        .collect::<Result<_>>()?;

    let mut stations: Vec<Station> = Vec::new();
    let mut station_index: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    let mut dropped = 0usize;

    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = row?;
        let raw_ts = row.get(c_ts).unwrap_or("").trim();
        if raw_ts.is_empty() {
            dropped += 1;
            continue;
        }
        let timestamp = parse_timestamp(raw_ts, line)?;

        let station_id = row.get(c_station).unwrap_or("").trim().to_string();
        if station_id.is_empty() {
            dropped += 1;
            continue;
        }

        let lat = row.get(c_lat).unwrap_or("").trim().parse::<f64>();
        let lon = row.get(c_lon).unwrap_or("").trim().parse::<f64>();
        let (lat, lon) = match (lat, lon) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
            _ => {
                dropped += 1;
                continue;
            }
        };

        let target_raw = row.get(c_target).unwrap_or("").trim();
        let target = if target_raw.is_empty() || target_raw.eq_ignore_ascii_case("nan") {
            None
        } else {
            match target_raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => None,
            }
        };

        let mut covariates = Vec::with_capacity(c_covs.len());
        let mut cov_ok = true;
        for &c in &c_covs {
            match row.get(c).unwrap_or("").trim().parse::<f64>() {
                Ok(v) if v.is_finite() => covariates.push(v),
                _ => {
                    cov_ok = false;
                    break;
                }
            }
        }
        if !cov_ok {
            dropped += 1;
            continue;
        }

        let station = match station_index.get(&station_id) {
            Some(&idx) => {
                let s = &stations[idx];
                if s.lat != lat || s.lon != lon {
                    return Err(Error::Domain(format!(
                        "station `{station_id}` has inconsistent coordinates at line {line}"
                    )));
                }
                idx
            }
            None => {
                let idx = stations.len();
                stations.push(Station {
                    id: station_id.clone(),
                    lat,
                    lon,
                });
                station_index.insert(station_id, idx);
                idx
            }
        };

        records.push(ObservationRecord {
            timestamp,
            t_idx: 0,
            station,
            target,
            covariates,
        });
    }

    let table = ObservationTable::new(
        StationSet::new(stations)?,
        records,
        schema.frequency,
        schema.covariates.clone(),
    )?;
    Ok(LoadOutcome {
        table,
        dropped_rows: dropped,
    })
}

/// Write a table back to the CSV layout accepted by `load_csv`.
pub fn write_csv(table: &ObservationTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec![
        "timestamp".to_string(),
        "station_id".to_string(),
        "lat".to_string(),
        "lon".to_string(),
        "target".to_string(),
    ];
    header.extend(table.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for r in table.records() {
        let s = table.stations().get(r.station);
        let mut row = vec![
            r.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            s.id.clone(),
            format!("{}", s.lat),
            format!("{}", s.lon),
            r.target.map(|v| format!("{v}")).unwrap_or_default(),
        ];
        row.extend(r.covariates.iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Mean and population standard deviation of one feature column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

/// Fit z-score statistics. Uses the population (1/n) standard deviation;
/// constant columns clamp std to 1 so apply becomes pure centering.
pub fn zscore_fit(values: &[f64]) -> Result<ColumnStats> {
    if values.is_empty() {
        return Err(Error::Contract("zscore_fit on an empty column".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(ColumnStats {
        mean,
        std: if std > 0.0 { std } else { 1.0 },
    })
}

pub fn zscore_apply(value: f64, stats: &ColumnStats) -> f64 {
    (value - stats.mean) / stats.std
}

pub fn zscore_invert(z: f64, stats: &ColumnStats) -> f64 {
    z * stats.std + stats.mean
}

/// Distance metric for the adjacency kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMetric {
    /// Plain Euclidean distance in coordinate (degree) space. Default.
    Euclidean,
    /// Great-circle distance in kilometres.
    Haversine,
}

impl DistanceMetric {
    pub fn distance(self, a: &Station, b: &Station) -> f64 {
        match self {
            DistanceMetric::Euclidean => {
                let dx = a.lat - b.lat;
                let dy = a.lon - b.lon;
                (dx * dx + dy * dy).sqrt()
            }
            DistanceMetric::Haversine => {
                const R_EARTH_KM: f64 = 6371.0;
                let (lat1, lon1) = (a.lat.to_radians(), a.lon.to_radians());
                let (lat2, lon2) = (b.lat.to_radians(), b.lon.to_radians());
                let dlat = lat2 - lat1;
                let dlon = lon2 - lon1;
                let h = (dlat / 2.0).sin().powi(2)
                    + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
                2.0 * R_EARTH_KM * h.sqrt().asin()
            }
        }
    }
}

/// Gaussian-kernel adjacency over the station set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringGraph {
    pub adjacency: Tensor,
    pub sigma_d: f64,
    pub metric: DistanceMetric,
    /// Distinct stations at zero distance (kernel value 1), kept for logging.
    pub coincident_pairs: Vec<(usize, usize)>,
}

impl MonitoringGraph {
    pub fn station_count(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Median of all pairwise distances; the scale-free default for sigma_d.
/// Falls back to 1.0 when there are no pairs.
pub fn median_pairwise_distance(stations: &StationSet, metric: DistanceMetric) -> f64 {
    let n = stations.len();
    let mut dists = Vec::with_capacity(n.saturating_sub(1) * n / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(metric.distance(stations.get(i), stations.get(j)));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// A(i,j) = exp(-d_ij^2 / sigma_d^2) off the diagonal, zero diagonal.
pub fn build_adjacency(
    stations: &StationSet,
    sigma_d: f64,
    metric: DistanceMetric,
) -> Result<MonitoringGraph> {
    if sigma_d <= 0.0 || !sigma_d.is_finite() {
        return Err(Error::Config(format!("sigma_d must be positive, got {sigma_d}")));
    }
    let n = stations.len();
    let mut adjacency = Tensor::zeros(n, n);
    let mut coincident = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.distance(stations.get(i), stations.get(j));
            let w = (-(d * d) / (sigma_d * sigma_d)).exp();
            if d == 0.0 {
                coincident.push((i, j));
            }
            adjacency.set(i, j, w);
            adjacency.set(j, i, w);
        }
    }
    Ok(MonitoringGraph {
        adjacency,
        sigma_d,
        metric,
        coincident_pairs: coincident,
    })
}

/// Normalization statistics fitted on (masked) training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub target: ColumnStats,
    pub lat: ColumnStats,
    pub lon: ColumnStats,
    pub covariates: Vec<ColumnStats>,
    pub t0: DateTime<Utc>,
    /// Largest observed training index; scales the trend channel t/t_max.
    pub t_max: i64,
    /// Min-max bounds over the station set for the unit-interval Fourier coords.
    pub lat_bounds: (f64, f64),
    pub lon_bounds: (f64, f64),
}

impl PreprocessStats {
    pub fn unnormalize_target(&self, z: f64) -> f64 {
        zscore_invert(z, &self.target)
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        zscore_apply(y, &self.target)
    }

    /// Min-max coordinate mapping used by the spatial Fourier features.
    /// Degenerate bounds (single station) map to 0.5.
    pub fn coords01(&self, lat: f64, lon: f64) -> (f64, f64) {
        let map = |v: f64, (lo, hi): (f64, f64)| {
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.5
            }
        };
        (map(lat, self.lat_bounds), map(lon, self.lon_bounds))
    }
}

/// Fit preprocessing statistics over the observed cells of a discretized
/// (typically masked training) table.
pub fn fit_preprocess(table: &ObservationTable) -> Result<PreprocessStats> {
    let t0 = table
        .reference_time()
        .ok_or_else(|| Error::Contract("fit_preprocess requires a discretized table".into()))?;
    let observed: Vec<&ObservationRecord> =
        table.records().iter().filter(|r| r.target.is_some()).collect();
    if observed.is_empty() {
        return Err(Error::Contract("no observed targets to fit on".into()));
    }

    let targets: Vec<f64> = observed.iter().map(|r| r.target.unwrap()).collect();
    let lats: Vec<f64> = observed
        .iter()
        .map(|r| table.stations().get(r.station).lat)
        .collect();
    let lons: Vec<f64> = observed
        .iter()
        .map(|r| table.stations().get(r.station).lon)
        .collect();

    let n_cov = table.covariate_names().len();
    let mut covariates = Vec::with_capacity(n_cov);
    for c in 0..n_cov {
        let col: Vec<f64> = observed.iter().map(|r| r.covariates[c]).collect();
        covariates.push(zscore_fit(&col)?);
    }

    let t_max = observed.iter().map(|r| r.t_idx).max().unwrap_or(0).max(1);

    let lat_lo = table.stations().iter().map(|s| s.lat).fold(f64::INFINITY, f64::min);
    let lat_hi = table.stations().iter().map(|s| s.lat).fold(f64::NEG_INFINITY, f64::max);
    let lon_lo = table.stations().iter().map(|s| s.lon).fold(f64::INFINITY, f64::min);
    let lon_hi = table.stations().iter().map(|s| s.lon).fold(f64::NEG_INFINITY, f64::max);

    Ok(PreprocessStats {
        target: zscore_fit(&targets)?,
        lat: zscore_fit(&lats)?,
        lon: zscore_fit(&lons)?,
        covariates,
        t0,
        t_max,
        lat_bounds: (lat_lo, lat_hi),
        lon_bounds: (lon_lo, lon_hi),
    })
}

/// Model-ready samples: one row per observed cell.
///
/// The feature matrix holds the bounded trend channel and z-scored
/// coordinates/covariates; the raw integer index is kept alongside for the
/// harmonic time features, and unit-interval coords for the Fourier map.
#[derive(Debug, Clone)]
pub struct SampleMatrix {
    pub features: Tensor,
    pub t_raw: Vec<i64>,
    /// z-scored targets.
    pub labels: Vec<f64>,
    pub station_idx: Vec<usize>,
    pub coords01: Vec<(f64, f64)>,
    pub back_refs: Vec<(i64, usize)>,
    pub d_prepro: usize,
}

impl SampleMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stack the observed cells of a discretized table into a sample matrix
/// using previously fitted statistics.
pub fn assemble_samples(table: &ObservationTable, stats: &PreprocessStats) -> Result<SampleMatrix> {
    let t0 = table
        .reference_time()
        .ok_or_else(|| Error::Contract("assemble_samples requires a discretized table".into()))?;
    if t0 != stats.t0 {
        return Err(Error::Contract(
            "table reference time differs from fitted statistics".into(),
        ));
    }
    if table.covariate_names().len() != stats.covariates.len() {
        return Err(Error::Dimension(format!(
            "table has {} covariates, stats were fitted on {}",
            table.covariate_names().len(),
            stats.covariates.len()
        )));
    }

    let d_prepro = 3 + stats.covariates.len(); // trend, lat, lon, covariates
    let mut features = Vec::new();
    let mut t_raw = Vec::new();
    let mut labels = Vec::new();
    let mut station_idx = Vec::new();
    let mut coords01 = Vec::new();
    let mut back_refs = Vec::new();

    for r in table.records() {
        let Some(y) = r.target else { continue };
        let s = table.stations().get(r.station);
        features.push(r.t_idx as f64 / stats.t_max as f64);
        features.push(zscore_apply(s.lat, &stats.lat));
        features.push(zscore_apply(s.lon, &stats.lon));
        for (v, cs) in r.covariates.iter().zip(&stats.covariates) {
            features.push(zscore_apply(*v, cs));
        }
        t_raw.push(r.t_idx);
        labels.push(zscore_apply(y, &stats.target));
        station_idx.push(r.station);
        coords01.push(stats.coords01(s.lat, s.lon));
        back_refs.push((r.t_idx, r.station));
    }

    let rows = labels.len();
    Ok(SampleMatrix {
        features: Tensor::new(rows, d_prepro, features)?,
        t_raw,
        labels,
        station_idx,
        coords01,
        back_refs,
        d_prepro,
    })
}
