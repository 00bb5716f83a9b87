//! Verify reverse-mode gradients against central finite differences, from
//! single ops up to the full training objective.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use fieldcast::autodiff::{grad_check, GradSet, ParamSet, Tape, Tensor};
use fieldcast::bayes::{init_params, objective_grad_check, prepare_training};
use fieldcast::data::{build_adjacency, fit_preprocess, median_pairwise_distance, DistanceMetric};
use fieldcast::encoder::EncoderConfig;
use fieldcast::gated::StackConfig;
use fieldcast::synth::{harmonic_grid, SyntheticSpec};

fn main() -> fieldcast::Result<()> {
    // a single op: y = (x W + b)^2 summed
    let mut params = ParamSet::new();
    params.insert("w", Tensor::new(2, 2, vec![0.3, -0.7, 0.5, 0.9])?)?;
    params.insert("b", Tensor::new(1, 2, vec![0.1, -0.2])?)?;
    let x = Tensor::new(3, 2, vec![1.0, 0.5, -0.4, 0.8, 0.2, -1.1])?;
    let err = grad_check(
        |p: &ParamSet| -> fieldcast::Result<(f64, GradSet)> {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = tape.affine(xv, bound.var("w"), bound.var("b"))?;
            let sq = tape.square(y);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).scalar_value(), bound.collect_grads(&tape, &grads)))
        },
        &params,
        1e-4,
    )?;
    println!("affine + square + sum: max relative FD error {err:.3e}");

    // The full MAP objective through encoder, stack and prior. Finite
    // differences on a scalar that contains the prior over thousands of
    // parameters are conditioning-limited, so the check runs on a small
    // 8-sample training set at a late-training noise level where every
    // gradient is well resolved at eps = 1e-4.
    let table = harmonic_grid(&SyntheticSpec {
        t_steps: 240,
        ..Default::default()
    })?;
    let stats = fit_preprocess(&table)?;
    let metric = DistanceMetric::Euclidean;
    let graph = build_adjacency(
        table.stations(),
        median_pairwise_distance(table.stations(), metric),
        metric,
    )?;
    let stack = StackConfig {
        layers: 2,
        hidden: 16,
        ca_reduction: 8,
    };
    let enc = EncoderConfig {
        periods: vec![fieldcast::encoder::SeasonalPeriod::new(24, 2)],
        fourier_k: 2,
        gat: fieldcast::encoder::GatConfig {
            heads: 2,
            head_dim: 3,
            out_dim: 4,
        },
        ca_reduction: 8,
        freeze_channel_stats: false,
    };
    let full = prepare_training(&table, &graph, &stats, enc)?;
    let picked: Vec<usize> = {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(303);
        (0..8).map(|_| rng.random_range(0..full.labels.len())).collect()
    };
    let data = fieldcast::bayes::TrainData {
        ctx: full.ctx.clone(),
        fixed: full.fixed.select_rows(&picked),
        labels: picked.iter().map(|&i| full.labels[i]).collect(),
        stations: picked.iter().map(|&i| full.stations[i]).collect(),
        eta: 8,
    };
    let mut params = init_params(&data.ctx.cfg, &stack, 3, 91)?;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        params.get_mut(name).unwrap().scale_assign(1.5);
    }
    *params.get_mut("noise/log_sigma").unwrap() = Tensor::scalar(-3.0);
    let batch: Vec<usize> = (0..8).collect();
    let err = objective_grad_check(&params, &data, &stack, &batch, 1e-4)?;
    println!("full MAP objective on 8 samples: max relative FD error {err:.3e}");
    println!("({} trainable scalars checked)", params.scalar_count());
    Ok(())
}
