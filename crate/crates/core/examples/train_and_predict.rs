//! Train a small ensemble on a synthetic sensor grid and predict a held-out
//! window with uncertainty intervals.
//!
//! ```bash
//! cargo run --release --example train_and_predict
//! ```

use fieldcast::bayes::{predict, train_ensemble, QueryBatch, TrainConfig};
use fieldcast::data::{
    assemble_samples, build_adjacency, fit_preprocess, median_pairwise_distance, DistanceMetric,
};
use fieldcast::encoder::EncoderConfig;
use fieldcast::gated::StackConfig;
use fieldcast::synth::{harmonic_grid, SyntheticSpec};

fn main() -> fieldcast::Result<()> {
    let start = std::time::Instant::now();

    // fully observed 3x3 grid, 720 hourly steps; hold out the last week
    let spec = SyntheticSpec::default();
    let table = harmonic_grid(&spec)?;
    let holdout = 168i64;
    let (_, t_max) = table.time_index_range().unwrap();
    let split_at = t_max - holdout + 1;
    let train_table = table.filter_records(|r| r.t_idx < split_at);
    let test_table = table.filter_records(|r| r.t_idx >= split_at);

    let stats = fit_preprocess(&train_table)?;
    let metric = DistanceMetric::Euclidean;
    let sigma_d = median_pairwise_distance(train_table.stations(), metric);
    let graph = build_adjacency(train_table.stations(), sigma_d, metric)?;

    let enc = EncoderConfig::default();
    let stack = StackConfig {
        layers: 2,
        hidden: 64,
        ca_reduction: 8,
    };
    let train_cfg = TrainConfig {
        epochs: 150,
        particles: 2,
        master_seed: 42,
        batch_size: 512,
        lr0: 5e-3,
        weight_decay: 0.01,
        max_grad_norm: 1.0,
        lr_min_ratio: 0.01,
    };

    println!(
        "training {} particles on {} samples ...",
        train_cfg.particles,
        train_table.eta()
    );
    let (ensemble, curves) = train_ensemble(&train_table, &graph, &stats, enc, stack, train_cfg, 0)?;
    for (m, curve) in curves.iter().enumerate() {
        let first = curve.first().map(|c| c.loss).unwrap_or(f64::NAN);
        let last = curve.last().map(|c| c.loss).unwrap_or(f64::NAN);
        println!(
            "  particle {m}: objective {first:.1} -> {last:.1}, sigma {:.4}",
            ensemble.particles[m].sigma() * ensemble.stats.target.std
        );
    }

    // predict the held-out window
    let test_samples = assemble_samples(&test_table, &ensemble.stats)?;
    let queries = QueryBatch::from_samples(&test_samples, &ensemble.encoder)?;
    let ctx = ensemble.context();
    let mixtures = predict(&ensemble, &ctx, &queries)?;

    let mut sse = 0.0;
    let mut covered = 0usize;
    let mut width_sum = 0.0;
    let mut truths = Vec::new();
    for (i, mix) in mixtures.iter().enumerate() {
        let y = ensemble.stats.unnormalize_target(test_samples.labels[i]);
        truths.push(y);
        let err = mix.point_mean() - y;
        sse += err * err;
        let (lo, hi) = mix.interval(0.95)?;
        if (lo..=hi).contains(&y) {
            covered += 1;
        }
        width_sum += hi - lo;
    }
    let n = mixtures.len() as f64;
    let rmse = (sse / n).sqrt();
    let mean_y = truths.iter().sum::<f64>() / n;
    let ss_tot: f64 = truths.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r2 = 1.0 - sse / ss_tot;

    println!("test RMSE  {rmse:.3}");
    println!("test R^2   {r2:.3}");
    println!("95% interval coverage {:.3}, mean width {:.2}", covered as f64 / n, width_sum / n);
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
