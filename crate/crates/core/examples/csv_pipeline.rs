//! The data pipeline end to end: write a CSV, load it with a schema,
//! discretize time, fit preprocessing on training data, build the station
//! graph, and assemble model-ready samples.
//!
//! ```bash
//! cargo run --release --example csv_pipeline
//! ```

use fieldcast::data::{
    assemble_samples, build_adjacency, fit_preprocess, load_csv, median_pairwise_distance,
    write_csv, CsvSchema, DistanceMetric,
};
use fieldcast::synth::{harmonic_grid, SyntheticSpec};

fn main() -> fieldcast::Result<()> {
    let dir = std::env::temp_dir().join("fieldcast_csv_pipeline");
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("observations.csv");

    // generate and persist a small network
    let table = harmonic_grid(&SyntheticSpec {
        grid_side: 2,
        t_steps: 96,
        ..Default::default()
    })?;
    write_csv(&table, &path)?;
    println!("wrote {}", path.display());

    // load through the declared schema
    let schema = CsvSchema::default(); // hourly, no covariates
    let loaded = load_csv(&path, &schema)?;
    let mut table = loaded.table;
    println!(
        "loaded {} records across {} stations ({} rows filtered)",
        table.records().len(),
        table.stations().len(),
        loaded.dropped_rows
    );

    table.discretize_time(None)?;
    let (lo, hi) = table.time_index_range().unwrap();
    println!("time indices {lo}..{hi} at hourly resolution");

    // z-score statistics fitted on the observed training cells
    let stats = fit_preprocess(&table)?;
    println!(
        "target mean {:.3}, std {:.3}; trend scale t_max = {}",
        stats.target.mean, stats.target.std, stats.t_max
    );

    // Gaussian-kernel adjacency over the stations
    let metric = DistanceMetric::Euclidean;
    let sigma_d = median_pairwise_distance(table.stations(), metric);
    let graph = build_adjacency(table.stations(), sigma_d, metric)?;
    println!("\nadjacency (sigma_d = median pairwise distance = {sigma_d:.3}):");
    for i in 0..graph.station_count() {
        let row: Vec<String> = (0..graph.station_count())
            .map(|j| format!("{:.3}", graph.adjacency.get(i, j)))
            .collect();
        println!("  {}", row.join("  "));
    }

    // one model-ready row per observed cell
    let samples = assemble_samples(&table, &stats)?;
    println!(
        "\nassembled {} samples with {} preprocessed channels each",
        samples.len(),
        samples.d_prepro
    );
    let y0 = stats.unnormalize_target(samples.labels[0]);
    println!(
        "first sample: t={}, station {}, normalized label {:.3} (raw {:.3})",
        samples.t_raw[0], samples.station_idx[0], samples.labels[0], y0
    );
    Ok(())
}
