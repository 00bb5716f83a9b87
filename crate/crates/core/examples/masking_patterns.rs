//! Simulate the four missing-data patterns at several rates and show their
//! structure (realized rates, per-pattern shape of the removed set).
//!
//! ```bash
//! cargo run --release --example masking_patterns
//! ```

use std::collections::BTreeSet;

use fieldcast::masking::{apply_pattern, make_cv_splits, MaskPattern};
use fieldcast::synth::{harmonic_grid, SyntheticSpec};

fn main() -> fieldcast::Result<()> {
    let table = harmonic_grid(&SyntheticSpec {
        t_steps: 1440,
        ..Default::default()
    })?;
    let (lo, hi) = table.time_index_range().unwrap();
    println!(
        "grid: {} stations x {} hourly steps, {} observed cells\n",
        table.stations().len(),
        hi - lo + 1,
        table.eta()
    );

    println!("{:<10} {:>6} {:>10} {:>9}  structure", "pattern", "rate", "realized", "removed");
    for pattern in MaskPattern::ALL {
        for rate in [0.1, 0.3, 0.6] {
            let plan = apply_pattern(&table, pattern, rate, 7)?;
            let stations: BTreeSet<&String> = plan.removed.iter().map(|(_, s)| s).collect();
            let instants: BTreeSet<i64> = plan.removed.iter().map(|(t, _)| *t).collect();
            let shape = match pattern {
                MaskPattern::Random => format!("{} stations, {} instants", stations.len(), instants.len()),
                MaskPattern::Node => format!(
                    "{} stations hit, all in whole-day blocks",
                    stations.len()
                ),
                MaskPattern::Timestamp => format!("{} network-wide instants", instants.len()),
                MaskPattern::Block => format!(
                    "{} instants in contiguous >= 24h runs across all stations",
                    instants.len()
                ),
            };
            println!(
                "{:<10} {:>6.2} {:>10.4} {:>9}  {shape}",
                pattern.name(),
                rate,
                plan.rate_realized,
                plan.removed.len()
            );
        }
    }

    // site-based cross-validation with a final-month test window
    let splits = make_cv_splits(&table, 5, 3)?;
    println!("\n5-fold site splits (test window starts at index {}):", splits.test_window_start);
    for fold in 0..5 {
        let stations: Vec<String> = splits
            .fold_stations(fold)
            .iter()
            .map(|&s| table.stations().get(s).id.clone())
            .collect();
        let train = splits.train_table(&table, fold);
        let test = splits.test_table(&table, fold);
        println!(
            "  fold {fold}: held-out sites {:?}, train cells {}, test cells {}",
            stations,
            train.eta(),
            test.eta()
        );
    }
    Ok(())
}
