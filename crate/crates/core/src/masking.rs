//! Missing-data pattern simulators and site-based cross-validation splits.
//!
//! Each simulator removes target values only (covariates stay) from the
//! observed cells of a discretized table, at a controlled rate, and returns
//! a replayable `MaskPlan`. Patterns:
//!
//! - random: individual cells, sporadic loss
//! - node: whole-day outages at single stations
//! - timestamp: network-wide loss at sampled instants
//! - block: whole-day outages across every station at once

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ObservationTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    Random,
    Node,
    Timestamp,
    Block,
}

impl MaskPattern {
    pub const ALL: [MaskPattern; 4] = [
        MaskPattern::Random,
        MaskPattern::Node,
        MaskPattern::Timestamp,
        MaskPattern::Block,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "node" => Ok(Self::Node),
            "timestamp" => Ok(Self::Timestamp),
            "block" => Ok(Self::Block),
            other => Err(Error::Config(format!(
                "unknown pattern `{other}` (expected random, node, timestamp, block)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Node => "node",
            Self::Timestamp => "timestamp",
            Self::Block => "block",
        }
    }
}

/// A replayable record of which cells a simulator removed.
///
/// Serializes to JSON with `removed` as a sorted list of
/// `[time_index, station_id]` pairs, so replays are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub pattern: MaskPattern,
    pub rate_requested: f64,
    pub rate_realized: f64,
    pub seed: u64,
    pub removed: BTreeSet<(i64, String)>,
}

impl MaskPlan {
    /// Apply the plan: targets of removed cells become absent.
    pub fn apply(&self, table: &ObservationTable) -> Result<ObservationTable> {
        let mut cells = BTreeSet::new();
        for (t, id) in &self.removed {
            let station = table
                .stations()
                .index_of(id)
                .ok_or_else(|| Error::Config(format!("plan references unknown station `{id}`")))?;
            cells.insert((*t, station));
        }
        Ok(table.with_targets_removed(&cells))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=0.8).contains(&rate) {
        return Err(Error::Config(format!("rate {rate} out of range [0, 0.8]")));
    }
    Ok(())
}

fn observed_sorted(table: &ObservationTable) -> Result<Vec<(i64, usize)>> {
    if table.reference_time().is_none() {
        return Err(Error::Contract("masking requires a discretized table".into()));
    }
    let mut cells = table.observed_cells();
    cells.sort_unstable();
    Ok(cells)
}

fn finish(
    table: &ObservationTable,
    pattern: MaskPattern,
    rate: f64,
    seed: u64,
    removed_cells: BTreeSet<(i64, usize)>,
    eta: usize,
) -> MaskPlan {
    let removed = removed_cells
        .into_iter()
        .map(|(t, s)| (t, table.stations().get(s).id.clone()))
        .collect::<BTreeSet<_>>();
    let realized = if eta == 0 {
        0.0
    } else {
        removed.len() as f64 / eta as f64
    };
    MaskPlan {
        pattern,
        rate_requested: rate,
        rate_realized: realized,
        seed,
        removed,
    }
}

/// Remove exactly floor(rate * eta) uniformly sampled observed cells.
pub fn apply_random(table: &ObservationTable, rate: f64, seed: u64) -> Result<MaskPlan> {
    check_rate(rate)?;
    let mut cells = observed_sorted(table)?;
    let eta = cells.len();
    let target = (rate * eta as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    let removed: BTreeSet<(i64, usize)> = cells.into_iter().take(target).collect();
    Ok(finish(table, MaskPattern::Random, rate, seed, removed, eta))
}

fn steps_per_day(table: &ObservationTable) -> Result<i64> {
    table.frequency().steps_per_day().ok_or_else(|| {
        Error::Config("day-structured masking needs a frequency that divides one day".into())
    })
}

/// Shared driver for the structured patterns: shuffle the candidate units,
/// take units until the removed-cell count first reaches the target.
fn structured<U: Ord + Clone>(
    table: &ObservationTable,
    pattern: MaskPattern,
    rate: f64,
    seed: u64,
    mut units: Vec<U>,
    cells_of: impl Fn(&U) -> Vec<(i64, usize)>,
) -> Result<MaskPlan> {
    check_rate(rate)?;
    let eta = observed_sorted(table)?.len();
    let target = (rate * eta as f64).floor() as usize;

    units.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);

    let mut removed: BTreeSet<(i64, usize)> = BTreeSet::new();
    for unit in &units {
        if removed.len() >= target {
            break;
        }
        for cell in cells_of(unit) {
            removed.insert(cell);
        }
    }
    if removed.len() < target {
        return Err(Error::RateUnreachable {
            requested: rate,
            max_achievable: removed.len() as f64 / eta.max(1) as f64,
        });
    }
    Ok(finish(table, pattern, rate, seed, removed, eta))
}

/// Whole-day outages at single stations: sampled (station, day) pairs each
/// remove that station's observed cells across the day's steps.
pub fn apply_node(table: &ObservationTable, rate: f64, seed: u64) -> Result<MaskPlan> {
    let spd = steps_per_day(table)?;
    let cells = observed_sorted(table)?;
    let mut units: BTreeSet<(usize, i64)> = BTreeSet::new();
    for &(t, s) in &cells {
        units.insert((s, t.div_euclid(spd)));
    }
    let by_cell: BTreeSet<(i64, usize)> = cells.into_iter().collect();
    structured(
        table,
        MaskPattern::Node,
        rate,
        seed,
        units.into_iter().collect(),
        |&(station, day)| {
            (day * spd..(day + 1) * spd)
                .filter(|&t| by_cell.contains(&(t, station)))
                .map(|t| (t, station))
                .collect()
        },
    )
}

/// Network-wide loss at sampled instants: each sampled timestamp removes the
/// observed cells of every station at that instant.
pub fn apply_timestamp(table: &ObservationTable, rate: f64, seed: u64) -> Result<MaskPlan> {
    let cells = observed_sorted(table)?;
    let mut units: BTreeSet<i64> = BTreeSet::new();
    for &(t, _) in &cells {
        units.insert(t);
    }
    let by_cell: BTreeSet<(i64, usize)> = cells.into_iter().collect();
    let n = table.stations().len();
    structured(
        table,
        MaskPattern::Timestamp,
        rate,
        seed,
        units.into_iter().collect(),
        |&t| {
            (0..n)
                .filter(|&s| by_cell.contains(&(t, s)))
                .map(|s| (t, s))
                .collect()
        },
    )
}

/// Contiguous spatio-temporal rectangles: each sampled day removes a full
/// day of observations at every station simultaneously.
pub fn apply_block(table: &ObservationTable, rate: f64, seed: u64) -> Result<MaskPlan> {
    let spd = steps_per_day(table)?;
    let cells = observed_sorted(table)?;
    let mut units: BTreeSet<i64> = BTreeSet::new();
    for &(t, _) in &cells {
        units.insert(t.div_euclid(spd));
    }
    let by_cell: BTreeSet<(i64, usize)> = cells.into_iter().collect();
    let n = table.stations().len();
    structured(
        table,
        MaskPattern::Block,
        rate,
        seed,
        units.into_iter().collect(),
        |&day| {
            let mut out = Vec::new();
            for t in day * spd..(day + 1) * spd {
                for s in 0..n {
                    if by_cell.contains(&(t, s)) {
                        out.push((t, s));
                    }
                }
            }
            out
        },
    )
}

pub fn apply_pattern(
    table: &ObservationTable,
    pattern: MaskPattern,
    rate: f64,
    seed: u64,
) -> Result<MaskPlan> {
    match pattern {
        MaskPattern::Random => apply_random(table, rate, seed),
        MaskPattern::Node => apply_node(table, rate, seed),
        MaskPattern::Timestamp => apply_timestamp(table, rate, seed),
        MaskPattern::Block => apply_block(table, rate, seed),
    }
}

/// Site-based k-fold assignment with a shared final-month test window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// fold index per station.
    pub fold_of: Vec<usize>,
    pub k: usize,
    /// Cells with t_idx >= this and a held-out station form the test set.
    pub test_window_start: i64,
}

impl SplitPlan {
    pub fn fold_stations(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|&(_, &f)| f == fold)
            .map(|(s, _)| s)
            .collect()
    }

    fn is_test_cell(&self, fold: usize, t_idx: i64, station: usize) -> bool {
        self.fold_of[station] == fold && t_idx >= self.test_window_start
    }

    /// Training table for a fold: full-period data from other sites plus
    /// pre-window data from the held-out sites.
    pub fn train_table(&self, table: &ObservationTable, fold: usize) -> ObservationTable {
        table.filter_records(|r| !self.is_test_cell(fold, r.t_idx, r.station))
    }

    /// Test table for a fold: the final month of the held-out sites.
    pub fn test_table(&self, table: &ObservationTable, fold: usize) -> ObservationTable {
        table.filter_records(|r| self.is_test_cell(fold, r.t_idx, r.station))
    }
}

/// Final-month length in steps (calendar-free: 30 days).
const TEST_WINDOW_DAYS: i64 = 30;

/// Shuffle stations into k near-equal folds; the test window is the last
/// 30 days of the index range.
pub fn make_cv_splits(table: &ObservationTable, k: usize, seed: u64) -> Result<SplitPlan> {
    let n = table.stations().len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot split {n} stations into {k} folds")));
    }
    let spd = steps_per_day(table)?;
    let (lo, hi) = table
        .time_index_range()
        .ok_or_else(|| Error::Contract("cannot split an empty table".into()))?;
    if table.reference_time().is_none() {
        return Err(Error::Contract("make_cv_splits requires a discretized table".into()));
    }
    let window = TEST_WINDOW_DAYS * spd;
    if hi - lo + 1 < window {
        return Err(Error::Config(format!(
            "time span {} steps is shorter than the {window}-step test window",
            hi - lo + 1
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = n / k;
    let remainder = n % k;
    let mut fold_of = vec![0usize; n];
    let mut cursor = 0usize;
    for fold in 0..k {
        let size = base + usize::from(fold < remainder);
        for &station in &order[cursor..cursor + size] {
            fold_of[station] = fold;
        }
        cursor += size;
    }

    Ok(SplitPlan {
        fold_of,
        k,
        test_window_start: hi - window + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Frequency, ObservationRecord, ObservationTable, Station, StationSet};
    use chrono::{TimeZone, Utc};

    /// Fully observed grid: `n` stations, `t_steps` hourly steps.
    pub(crate) fn grid_table(n: usize, t_steps: i64) -> ObservationTable {
        let stations = StationSet::new(
            (0..n)
                .map(|i| Station {
                    id: format!("s{i:02}"),
                    lat: (i / 3) as f64 * 0.5,
                    lon: (i % 3) as f64 * 0.5,
                })
                .collect(),
        )
        .unwrap();
        let base = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let mut records = Vec::new();
        for t in 0..t_steps {
            for s in 0..n {
                records.push(ObservationRecord {
                    timestamp: base + chrono::Duration::hours(t),
                    t_idx: 0,
                    station: s,
                    target: Some((t + s as i64) as f64),
                    covariates: vec![],
                });
            }
        }
        let mut table =
            ObservationTable::new(stations, records, Frequency::hourly(), vec![]).unwrap();
        table.discretize_time(None).unwrap();
        table
    }

    #[test]
    fn rate_zero_removes_nothing() {
        let t = grid_table(4, 48);
        for pattern in MaskPattern::ALL {
            let plan = apply_pattern(&t, pattern, 0.0, 1).unwrap();
            assert!(plan.removed.is_empty(), "{pattern:?}");
            let masked = plan.apply(&t).unwrap();
            assert_eq!(masked.eta(), t.eta());
        }
    }

    #[test]
    fn random_removes_exact_floor_count() {
        let t = grid_table(5, 200); // eta = 1000
        let plan = apply_random(&t, 0.3, 7).unwrap();
        assert_eq!(plan.removed.len(), 300);
        assert!((plan.rate_realized - 0.3).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_plan_different_seed_differs() {
        let t = grid_table(4, 100);
        let a = apply_random(&t, 0.4, 11).unwrap();
        let b = apply_random(&t, 0.4, 11).unwrap();
        let c = apply_random(&t, 0.4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.removed, c.removed);
    }

    #[test]
    fn node_unit_is_a_contiguous_station_day() {
        let t = grid_table(3, 72);
        // smallest nonzero rate that needs exactly one unit: 24 cells of 216
        let plan = apply_node(&t, 24.0 / 216.0, 3).unwrap();
        assert_eq!(plan.removed.len(), 24);
        let stations: BTreeSet<&String> = plan.removed.iter().map(|(_, s)| s).collect();
        assert_eq!(stations.len(), 1);
        let times: Vec<i64> = plan.removed.iter().map(|(t, _)| *t).collect();
        let day = times[0].div_euclid(24);
        assert!(times.iter().all(|&t| t.div_euclid(24) == day));
        assert_eq!(times.len(), 24);
    }

    #[test]
    fn node_histogram_is_multiple_of_day_length() {
        let t = grid_table(4, 96);
        let plan = apply_node(&t, 0.5, 9).unwrap();
        let mut counts = std::collections::HashMap::new();
        for (_, s) in &plan.removed {
            *counts.entry(s.clone()).or_insert(0usize) += 1;
        }
        for (_, c) in counts {
            assert_eq!(c % 24, 0);
        }
    }

    #[test]
    fn timestamp_removal_is_all_or_nothing_per_instant() {
        let t = grid_table(6, 50);
        let plan = apply_timestamp(&t, 0.2, 5).unwrap();
        let mut by_time = std::collections::HashMap::new();
        for (ti, _) in &plan.removed {
            *by_time.entry(*ti).or_insert(0usize) += 1;
        }
        for (_, c) in by_time {
            assert_eq!(c, 6);
        }
    }

    #[test]
    fn single_timestamp_unit_removes_all_stations() {
        let t = grid_table(18, 40);
        let plan = apply_timestamp(&t, 18.0 / (18.0 * 40.0), 2).unwrap();
        assert_eq!(plan.removed.len(), 18);
        let times: BTreeSet<i64> = plan.removed.iter().map(|(t, _)| *t).collect();
        assert_eq!(times.len(), 1);
    }

    #[test]
    fn block_unit_is_full_rectangle() {
        let t = grid_table(18, 72);
        let one_day = (18 * 24) as f64 / (18.0 * 72.0);
        let plan = apply_block(&t, one_day, 4).unwrap();
        assert_eq!(plan.removed.len(), 18 * 24);
        let times: BTreeSet<i64> = plan.removed.iter().map(|(t, _)| *t).collect();
        assert_eq!(times.len(), 24);
        let min = *times.iter().next().unwrap();
        let max = *times.iter().last().unwrap();
        assert_eq!(max - min + 1, 24, "contiguous day");
        assert_eq!(min.rem_euclid(24), 0, "starts at hour zero");
    }

    #[test]
    fn structured_patterns_only_touch_observed_cells() {
        let t = grid_table(3, 96);
        // pre-mask a station-day, then mask again on the sparser table
        let pre: BTreeSet<(i64, usize)> = (24..48).map(|ti| (ti, 1usize)).collect();
        let sparse = t.with_targets_removed(&pre);
        let eta = sparse.eta();
        let plan = apply_node(&sparse, 0.5, 13).unwrap();
        // realized rate counts newly removed observed cells only
        assert_eq!(plan.removed.len(), (plan.rate_realized * eta as f64).round() as usize);
        for (ti, id) in &plan.removed {
            let s = sparse.stations().index_of(id).unwrap();
            assert!(!pre.contains(&(*ti, s)), "removed an already-missing cell");
        }
    }

    #[test]
    fn fully_masked_table_yields_empty_plan() {
        let t = grid_table(2, 24);
        let all: BTreeSet<(i64, usize)> =
            (0..24).flat_map(|ti| [(ti, 0usize), (ti, 1usize)]).collect();
        let empty = t.with_targets_removed(&all);
        assert_eq!(empty.eta(), 0);
        let plan = apply_node(&empty, 0.5, 1).unwrap();
        assert!(plan.removed.is_empty());
    }

    #[test]
    fn rate_out_of_range_rejected() {
        let t = grid_table(2, 30);
        assert!(matches!(apply_random(&t, 0.9, 1), Err(Error::Config(_))));
        assert!(matches!(apply_random(&t, -0.1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn plan_json_roundtrip_is_identical() {
        let t = grid_table(3, 48);
        let plan = apply_node(&t, 0.3, 21).unwrap();
        let json = plan.to_json().unwrap();
        let back = MaskPlan::from_json(&json).unwrap();
        assert_eq!(plan, back);
        assert_eq!(json, back.to_json().unwrap());
        // replay produces the same masked table
        let a = plan.apply(&t).unwrap();
        let b = back.apply(&t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_partition_stations_and_windows() {
        let t = grid_table(18, 24 * 40);
        let plan = make_cv_splits(&t, 5, 3).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|f| plan.fold_stations(f).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4, 4, 4]);

        let mut test_cells_total = 0usize;
        for fold in 0..5 {
            let train = plan.train_table(&t, fold);
            let test = plan.test_table(&t, fold);
            test_cells_total += test.records().len();
            assert_eq!(train.records().len() + test.records().len(), t.records().len());
            // disjointness
            let train_keys: BTreeSet<(i64, usize)> =
                train.records().iter().map(|r| (r.t_idx, r.station)).collect();
            for r in test.records() {
                assert!(!train_keys.contains(&(r.t_idx, r.station)));
            }
        }
        // every station's last month appears in exactly one fold's test set
        assert_eq!(test_cells_total, 18 * 30 * 24);
    }

    #[test]
    fn split_rejects_short_span() {
        let t = grid_table(6, 100);
        assert!(matches!(make_cv_splits(&t, 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn realized_rates_within_one_point_on_full_grid() {
        let t = grid_table(9, 720);
        for pattern in MaskPattern::ALL {
            for r in 1..=8 {
                let rate = r as f64 / 10.0;
                let plan = apply_pattern(&t, pattern, rate, 77).unwrap();
                assert!(
                    (plan.rate_realized - rate).abs() <= 0.01,
                    "{pattern:?} rate {rate}: realized {}",
                    plan.rate_realized
                );
            }
        }
    }
}
