//! Run the full evaluation protocol on a synthetic grid: mask the training
//! data, train per fold, score against held-out observations, and compare
//! with the historical-average baseline.
//!
//! Uses a deliberately small configuration so it finishes in about a
//! minute; real runs go through the `fieldcast eval` subcommand.
//!
//! ```bash
//! cargo run --release --example cross_validation_eval
//! ```

use fieldcast::bayes::TrainConfig;
use fieldcast::config::{DataSection, EncoderSection, ModelSection};
use fieldcast::eval::{plot_data, run_experiment_on, ExperimentSpec};
use fieldcast::masking::MaskPattern;
use fieldcast::synth::{harmonic_grid, SyntheticSpec};

fn main() -> fieldcast::Result<()> {
    let table = harmonic_grid(&SyntheticSpec {
        t_steps: 960,
        noise_sd: 0.4,
        ..Default::default()
    })?;

    let spec = ExperimentSpec {
        data: "synthetic".into(), // table passed directly below
        schema: DataSection::default(),
        patterns: vec![MaskPattern::Random, MaskPattern::Block],
        rates: vec![0.0, 0.3],
        folds: Some(vec![0, 1]),
        k_folds: 5,
        horizon_steps: None,
        encoder: EncoderSection {
            periods: vec![24, 168],
            harmonics: vec![2, 1],
            fourier_k: 2,
            gat_heads: 2,
            gat_dim: 4,
            gat_out_dim: 4,
            ..Default::default()
        },
        model: ModelSection {
            cglu_layers: 1,
            hidden_dim: 24,
            ca_reduction: 8,
        },
        training: TrainConfig {
            epochs: 40,
            particles: 2,
            master_seed: 11,
            batch_size: 1024,
            lr0: 5e-3,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            lr_min_ratio: 0.01,
        },
        interval_level: 0.95,
        split_seed: 3,
        mask_seed: 5,
        covariates_used: None,
    };

    let output = run_experiment_on(&spec, &table, 0, None)?;
    println!("spec fingerprint {}\n", output.report.spec_fingerprint);
    println!(
        "{:<8} {:>5} {:>5}  {:<10} {:>8} {:>8} {:>7} {:>8} {:>7}",
        "pattern", "rate", "fold", "model", "rmse", "mae", "r2", "smape", "aiw"
    );
    for row in &output.report.rows {
        println!(
            "{:<8} {:>5.2} {:>5}  {:<10} {:>8.3} {:>8.3} {:>7.3} {:>8.2} {:>7.2}",
            row.pattern,
            row.rate,
            row.fold,
            row.model,
            row.rmse,
            row.mae,
            row.r2.unwrap_or(f64::NAN),
            row.smape,
            row.aiw
        );
    }

    println!("\nfold-averaged plot data (model, pattern, rate, metric, value):");
    for (model, pattern, rate, metric, value) in plot_data(&output.report) {
        if metric == "rmse" {
            println!("  {model:<10} {pattern:<8} {rate:>4.2} {metric:<6} {value:.3}");
        }
    }
    println!("\ncell wall times:");
    for t in &output.timings.rows {
        println!("  {} rate {:.2} fold {}: {:.1}s", t.pattern, t.rate, t.fold, t.runtime_s);
    }
    Ok(())
}
