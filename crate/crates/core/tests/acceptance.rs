//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! The criteria are property-based and directional: gradient oracles,
//! synthetic-field recovery against a historical-average reference,
//! interval calibration, mixture-variance consistency against Monte Carlo,
//! masking-protocol structure, metric cross-checks, degradation direction,
//! loss-masking invariance, and end-to-end determinism.

use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fieldcast::autodiff::{grad_check, Activation, GradSet, ParamSet, Tape, Tensor};
use fieldcast::bayes::{
    mixture_quantile, predict, predictive_variance, train_ensemble, train_particle,
    MixtureComponent, PredictiveMixture, QueryBatch, TrainConfig,
};
use fieldcast::data::{
    assemble_samples, build_adjacency, fit_preprocess, median_pairwise_distance, write_csv,
    DistanceMetric, ObservationTable,
};
use fieldcast::encoder::{EncoderConfig, GatConfig, SeasonalPeriod};
use fieldcast::eval::{ha_fit, metrics_interval, metrics_point};
use fieldcast::gated::StackConfig;
use fieldcast::masking::{apply_pattern, MaskPattern, MaskPlan};
use fieldcast::synth::{harmonic_grid, SyntheticSpec};

fn report(criterion: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{criterion}] {verdict} - {detail}");
    assert!(pass, "[{criterion}] {detail}");
}

// ---------------------------------------------------------------------
// criterion 1: gradient oracle
// ---------------------------------------------------------------------

/// Run a finite-difference check for a closure over one named tensor.
fn check_op(
    name: &str,
    init: Tensor,
    f: impl Fn(&mut Tape, fieldcast::autodiff::Var) -> fieldcast::Result<fieldcast::autodiff::Var>,
) -> f64 {
    let mut params = ParamSet::new();
    params.insert("x", init).unwrap();
    let err = grad_check(
        |p: &ParamSet| -> fieldcast::Result<(f64, GradSet)> {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let y = f(&mut tape, bound.var("x"))?;
            let loss = if tape.value(y).is_scalar() {
                y
            } else {
                let sq = tape.square(y);
                tape.sum(sq)
            };
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).scalar_value(), bound.collect_grads(&tape, &grads)))
        },
        &params,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "op `{name}` FD error {err}");
    err
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random values bounded away from zero (activation kinks).
fn random_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.random_range(0.2..1.2)
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_1_gradient_oracle() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;

    // elementwise and structural ops on random tensors with dims <= 8
    for trial in 0..3 {
        let (r, c) = (2 + trial, 3 + trial);
        let x = random_off_kink(&mut rng, r, c);
        let w = random_tensor(&mut rng, c, 4, -0.8, 0.8);
        let b = random_tensor(&mut rng, 1, 4, -0.5, 0.5);
        worst = worst.max(check_op("affine", x.clone(), |t, v| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            t.affine(v, wv, bv)
        }));
        worst = worst.max(check_op("matmul_param_rhs", w.clone(), |t, v| {
            let xv = t.constant(x.clone());
            t.matmul(xv, v)
        }));
        for kind in [
            Activation::Elu,
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Relu,
            Activation::LeakyRelu,
        ] {
            worst = worst.max(check_op(
                &format!("activation_{kind:?}"),
                x.clone(),
                move |t, v| Ok(t.act(v, kind)),
            ));
        }
        let other = random_tensor(&mut rng, r, c, -1.0, 1.0);
        worst = worst.max(check_op("add", x.clone(), |t, v| {
            let o = t.constant(other.clone());
            t.add(v, o)
        }));
        worst = worst.max(check_op("sub", x.clone(), |t, v| {
            let o = t.constant(other.clone());
            t.sub(v, o)
        }));
        worst = worst.max(check_op("mul", x.clone(), |t, v| {
            let o = t.constant(other.clone());
            t.mul(v, o)
        }));
        let row = random_tensor(&mut rng, 1, c, 0.3, 1.5);
        worst = worst.max(check_op("mul_row", x.clone(), |t, v| {
            let rv = t.constant(row.clone());
            t.mul_row(v, rv)
        }));
        worst = worst.max(check_op("mul_row_param_row", row.clone(), |t, v| {
            let m = t.constant(x.clone());
            t.mul_row(m, v)
        }));
        let scalar = Tensor::scalar(rng.random_range(0.2..1.0));
        worst = worst.max(check_op("mul_scalar", x.clone(), |t, v| {
            let s = t.constant(scalar.clone());
            t.mul_scalar(v, s)
        }));
        worst = worst.max(check_op("mul_scalar_param_scalar", scalar.clone(), |t, v| {
            let m = t.constant(x.clone());
            t.mul_scalar(m, v)
        }));
        worst = worst.max(check_op("exp", x.clone(), |t, v| Ok(t.exp(v))));
        let positive = random_tensor(&mut rng, r, c, 0.4, 2.0);
        worst = worst.max(check_op("log", positive, |t, v| Ok(t.log(v))));
        worst = worst.max(check_op("square", x.clone(), |t, v| Ok(t.square(v))));
        worst = worst.max(check_op("scale", x.clone(), |t, v| Ok(t.scale(v, -1.7))));
        worst = worst.max(check_op("offset", x.clone(), |t, v| Ok(t.offset(v, 0.9))));
        worst = worst.max(check_op("mean_rows", x.clone(), |t, v| Ok(t.mean_rows(v))));
        worst = worst.max(check_op("sum", x.clone(), |t, v| Ok(t.sum(v))));
        worst = worst.max(check_op("concat_cols", x.clone(), |t, v| {
            let o = t.constant(other.clone());
            t.concat_cols(&[v, o])
        }));
        let mask: Vec<bool> = (0..r * c).map(|i| i % 3 != 0).collect();
        worst = worst.max(check_op("softmax_rows_masked", x.clone(), |t, v| {
            t.softmax_rows_masked(v, Arc::new(mask.clone()))
        }));
        let col = random_tensor(&mut rng, r, 1, -1.0, 1.0);
        worst = worst.max(check_op("outer_sum", col.clone(), |t, v| {
            let o = t.constant(col.clone());
            t.outer_sum(v, o)
        }));
        worst = worst.max(check_op("gather_rows", x.clone(), |t, v| {
            t.gather_rows(v, Arc::new(vec![0, r - 1, 0]))
        }));
        worst = worst.max(check_op("logistic_log_pdf", x.clone(), |t, v| {
            Ok(t.logistic_log_pdf(v))
        }));
        worst = worst.max(check_op("add_row_param_row", b.clone(), |t, v| {
            let m = t.constant(random_tensor(&mut rng.clone(), r, 4, -1.0, 1.0));
            t.add_row(m, v)
        }));
    }

    // The full MAP objective on 8 random samples: 2 units, width 16, every
    // encoder block active. Finite differencing a scalar that includes the
    // prior over every parameter is conditioning-limited: at eps = 1e-4 the
    // f64 representation of the objective (thousands, from the prior bulk)
    // quantizes the central difference. The check therefore runs at a
    // documented well-conditioned instance: the training set is exactly the
    // 8 samples (likelihood scale 1), the noise parameter sits at a
    // late-training level so every weight carries a solid likelihood
    // gradient, weights at 1.5x their init scale, and a seed at which no
    // activation input sits within eps of a ReLU/LeakyReLU kink (central
    // differences straddling a kink do not estimate a one-sided gradient).
    let table = harmonic_grid(&SyntheticSpec {
        t_steps: 240,
        ..Default::default()
    })
    .unwrap();
    let stats = fit_preprocess(&table).unwrap();
    let metric = DistanceMetric::Euclidean;
    let graph = build_adjacency(
        table.stations(),
        median_pairwise_distance(table.stations(), metric),
        metric,
    )
    .unwrap();
    let enc = EncoderConfig {
        periods: vec![SeasonalPeriod::new(24, 2)],
        fourier_k: 2,
        gat: GatConfig {
            heads: 2,
            head_dim: 3,
            out_dim: 4,
        },
        ca_reduction: 8,
        freeze_channel_stats: false,
    };
    let stack = StackConfig {
        layers: 2,
        hidden: 16,
        ca_reduction: 8,
    };
    let full = fieldcast::bayes::prepare_training(&table, &graph, &stats, enc).unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(303);
    let chosen: Vec<usize> = (0..8).map(|_| pick.random_range(0..full.labels.len())).collect();
    let data = fieldcast::bayes::TrainData {
        ctx: full.ctx.clone(),
        fixed: full.fixed.select_rows(&chosen),
        labels: chosen.iter().map(|&i| full.labels[i]).collect(),
        stations: chosen.iter().map(|&i| full.stations[i]).collect(),
        eta: chosen.len(),
    };
    let mut params = fieldcast::bayes::init_params(&data.ctx.cfg, &stack, 3, 91).unwrap();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        params.get_mut(name).unwrap().scale_assign(1.5);
    }
    *params.get_mut("noise/log_sigma").unwrap() = Tensor::scalar(-3.0);
    let batch: Vec<usize> = (0..8).collect();
    let full_err =
        fieldcast::bayes::objective_grad_check(&params, &data, &stack, &batch, 1e-4).unwrap();
    worst = worst.max(full_err);

    let elapsed = started.elapsed();
    report(
        "criterion 1",
        worst < 1e-5 && elapsed.as_secs() < 60,
        &format!(
            "max FD relative error {worst:.2e} (objective {full_err:.2e}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------
// criteria 2 + 3: synthetic-field recovery and interval calibration
// ---------------------------------------------------------------------

#[test]
fn criterion_2_and_3_synthetic_recovery_and_calibration() {
    let spec = SyntheticSpec::default(); // 3x3 grid, T=720, noise sd 0.5
    let table = harmonic_grid(&spec).unwrap();
    let (_, t_hi) = table.time_index_range().unwrap();
    let split_at = t_hi - 168 + 1;
    let train = table.filter_records(|r| r.t_idx < split_at);
    let test = table.filter_records(|r| r.t_idx >= split_at);

    let stats = fit_preprocess(&train).unwrap();
    let metric = DistanceMetric::Euclidean;
    let graph = build_adjacency(
        train.stations(),
        median_pairwise_distance(train.stations(), metric),
        metric,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 150,
        particles: 4,
        master_seed: 20,
        batch_size: 512,
        lr0: 5e-3,
        weight_decay: 0.01,
        max_grad_norm: 1.0,
        lr_min_ratio: 0.01,
    };
    let stack = StackConfig {
        layers: 2,
        hidden: 64,
        ca_reduction: 8,
    };
    let (ensemble, _) = train_ensemble(
        &train,
        &graph,
        &stats,
        EncoderConfig::default(),
        stack,
        cfg,
        0,
    )
    .unwrap();

    let test_samples = assemble_samples(&test, &ensemble.stats).unwrap();
    let queries = QueryBatch::from_samples(&test_samples, &ensemble.encoder).unwrap();
    let ctx = ensemble.context();
    let mixtures = predict(&ensemble, &ctx, &queries).unwrap();

    let y: Vec<f64> = test_samples
        .labels
        .iter()
        .map(|&z| ensemble.stats.unnormalize_target(z))
        .collect();
    let y_hat: Vec<f64> = mixtures.iter().map(|m| m.point_mean()).collect();
    let point = metrics_point(&y, &y_hat).unwrap();

    let ha = ha_fit(&train).unwrap();
    let ha_pred: Vec<f64> = test_samples
        .back_refs
        .iter()
        .map(|&(t, s)| ha.forecast(t, s))
        .collect();
    let ha_point = metrics_point(&y, &ha_pred).unwrap();

    report(
        "criterion 2",
        point.rmse <= 1.0 && point.r2 >= 0.8 && point.rmse < ha_point.rmse,
        &format!(
            "test RMSE {:.3} (<= 1.0), R2 {:.3} (>= 0.8), HA RMSE {:.3}",
            point.rmse, point.r2, ha_point.rmse
        ),
    );

    let mut covered = 0usize;
    for (mix, &truth) in mixtures.iter().zip(&y) {
        let (lo, hi) = mix.interval(0.95).unwrap();
        if (lo..=hi).contains(&truth) {
            covered += 1;
        }
    }
    let coverage = covered as f64 / y.len() as f64;
    report(
        "criterion 3",
        (0.88..=0.99).contains(&coverage),
        &format!("95% interval empirical coverage {coverage:.3} in [0.88, 0.99]"),
    );
}

// ---------------------------------------------------------------------
// criterion 4: variance decomposition vs Monte Carlo
// ---------------------------------------------------------------------

#[test]
fn criterion_4_variance_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let sizes = [1usize, 2, 4, 16];
    let mut max_rel: f64 = 0.0;
    for trial in 0..20 {
        let m = sizes[trial % sizes.len()];
        let components: Vec<MixtureComponent> = (0..m)
            .map(|_| MixtureComponent {
                mean: rng.random_range(-5.0..5.0),
                std: rng.random_range(0.5..2.0),
            })
            .collect();
        let mix = PredictiveMixture::new(components.clone());
        let analytic = predictive_variance(&mix);

        // independent Monte-Carlo route: draw a component uniformly, then a
        // Box-Muller normal within it
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let c = &components[rng.random_range(0..m)];
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let draw = c.mean + c.std * z;
            sum += draw;
            sum_sq += draw * draw;
        }
        let mean = sum / n as f64;
        let mc_var = sum_sq / n as f64 - mean * mean;
        let rel = (analytic - mc_var).abs() / analytic;
        max_rel = max_rel.max(rel);
    }
    report(
        "criterion 4",
        max_rel < 0.01,
        &format!("max |analytic - MC|/analytic = {max_rel:.4} over 20 mixtures (1e6 draws)"),
    );
}

// ---------------------------------------------------------------------
// criterion 5: quantile correctness
// ---------------------------------------------------------------------

#[test]
fn criterion_5_quantile_correctness() {
    // inverse standard normal CDF reference points
    const Z_975: f64 = 1.959_963_984_540_054;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_single: f64 = 0.0;
    for _ in 0..10 {
        let mu = rng.random_range(-10.0..10.0);
        let sigma = rng.random_range(0.5..3.0);
        let mix = PredictiveMixture::new(vec![MixtureComponent { mean: mu, std: sigma }]);
        for (q, z) in [(0.025, -Z_975), (0.5, 0.0), (0.975, Z_975)] {
            let expected = mu + sigma * z;
            let got = mixture_quantile(&mix, q).unwrap();
            worst_single = worst_single.max((got - expected).abs());
        }
    }

    let mut worst_roundtrip: f64 = 0.0;
    for trial in 0..100 {
        let m = 1 + trial % 5;
        let mix = PredictiveMixture::new(
            (0..m)
                .map(|_| MixtureComponent {
                    mean: rng.random_range(-8.0..8.0),
                    std: rng.random_range(0.5..2.5),
                })
                .collect(),
        );
        for q in [0.025, 0.1, 0.5, 0.9, 0.975] {
            let x = mix.quantile(q).unwrap();
            worst_roundtrip = worst_roundtrip.max((mix.cdf(x) - q).abs());
        }
    }
    report(
        "criterion 5",
        worst_single < 1e-4 && worst_roundtrip < 1e-6,
        &format!(
            "single-component quantile error {worst_single:.2e} (< 1e-4), \
             CDF(quantile(q)) error {worst_roundtrip:.2e} (< 1e-6)"
        ),
    );
}

// ---------------------------------------------------------------------
// criterion 6: masking protocol
// ---------------------------------------------------------------------

#[test]
fn criterion_6_masking_protocol() {
    let table = harmonic_grid(&SyntheticSpec::default()).unwrap(); // 9 x 720
    let eta = table.eta();
    let n = table.stations().len();
    let mut checked = 0usize;

    for pattern in MaskPattern::ALL {
        for r in 1..=8 {
            let rate = r as f64 / 10.0;
            let plan = apply_pattern(&table, pattern, rate, 606).unwrap();
            assert!(
                (plan.rate_realized - rate).abs() <= 0.01,
                "{pattern:?} at {rate}: realized {}",
                plan.rate_realized
            );

            // replay byte-identically
            let json = plan.to_json().unwrap();
            let replayed = MaskPlan::from_json(&json).unwrap();
            assert_eq!(json, replayed.to_json().unwrap());
            assert_eq!(plan.apply(&table).unwrap(), replayed.apply(&table).unwrap());

            let removed: Vec<(i64, usize)> = plan
                .removed
                .iter()
                .map(|(t, id)| (*t, table.stations().index_of(id).unwrap()))
                .collect();
            match pattern {
                MaskPattern::Random => {
                    assert_eq!(removed.len(), (rate * eta as f64).floor() as usize);
                }
                MaskPattern::Node => {
                    // per-station 24-multiples, and each (station, day) block complete
                    let mut per_station: BTreeMap<usize, usize> = BTreeMap::new();
                    let mut per_block: BTreeMap<(usize, i64), Vec<i64>> = BTreeMap::new();
                    for &(t, s) in &removed {
                        *per_station.entry(s).or_default() += 1;
                        per_block.entry((s, t.div_euclid(24))).or_default().push(t);
                    }
                    for (&s, &count) in &per_station {
                        assert_eq!(count % 24, 0, "station {s} count {count}");
                    }
                    for ((_, day), mut hours) in per_block {
                        hours.sort_unstable();
                        assert_eq!(hours.len(), 24);
                        assert_eq!(hours[0], day * 24);
                        assert_eq!(hours[23], day * 24 + 23);
                    }
                }
                MaskPattern::Timestamp => {
                    let mut per_instant: BTreeMap<i64, usize> = BTreeMap::new();
                    for &(t, _) in &removed {
                        *per_instant.entry(t).or_default() += 1;
                    }
                    for (&t, &count) in &per_instant {
                        assert_eq!(count, n, "instant {t} removed {count} of {n} stations");
                    }
                }
                MaskPattern::Block => {
                    // all stations at every removed instant, and instants form
                    // maximal runs of length >= 24
                    let mut per_instant: BTreeMap<i64, usize> = BTreeMap::new();
                    for &(t, _) in &removed {
                        *per_instant.entry(t).or_default() += 1;
                    }
                    let instants: Vec<i64> = per_instant.keys().copied().collect();
                    for (&t, &count) in &per_instant {
                        assert_eq!(count, n, "instant {t}");
                    }
                    let mut run = 1usize;
                    for w in instants.windows(2) {
                        if w[1] == w[0] + 1 {
                            run += 1;
                        } else {
                            assert!(run >= 24, "run of {run} < 24 before gap");
                            run = 1;
                        }
                    }
                    assert!(run >= 24, "final run of {run} < 24");
                }
            }
            checked += 1;
        }
    }
    report(
        "criterion 6",
        checked == 32,
        &format!("{checked}/32 (pattern, rate) cells within 1 point of target with structure intact"),
    );
}

// ---------------------------------------------------------------------
// criterion 7: metric oracle
// ---------------------------------------------------------------------

#[test]
fn criterion_7_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = 100;
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..50.0)).collect();
        let y_hat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-5.0..5.0)).collect();
        let intervals: Vec<(f64, f64)> = y_hat
            .iter()
            .map(|&p| {
                let w = rng.random_range(0.1..4.0);
                (p - w, p + w)
            })
            .collect();

        let point = metrics_point(&y, &y_hat).unwrap();
        let interval = metrics_interval(&intervals, &y).unwrap();

        // independent direct-formula recomputation
        let nf = n as f64;
        let rmse = (y
            .iter()
            .zip(&y_hat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / nf)
            .sqrt();
        let mae = y.iter().zip(&y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / nf;
        let mean_y = y.iter().sum::<f64>() / nf;
        let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
        let ss_res: f64 = y.iter().zip(&y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
        let r2 = 1.0 - ss_res / ss_tot;
        let smape = 100.0
            * y.iter()
                .zip(&y_hat)
                .map(|(a, b)| {
                    let d = a.abs() + b.abs();
                    if d == 0.0 {
                        0.0
                    } else {
                        2.0 * (a - b).abs() / d
                    }
                })
                .sum::<f64>()
            / nf;
        let aiw = intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / nf;
        let mut riwm_sum = 0.0;
        let mut used = 0usize;
        for ((lo, hi), &yi) in intervals.iter().zip(&y) {
            if yi.abs() > 1e-6 {
                riwm_sum += (hi - lo) / yi;
                used += 1;
            }
        }
        let riwm = riwm_sum / used as f64;

        for (a, b) in [
            (point.rmse, rmse),
            (point.mae, mae),
            (point.r2, r2),
            (point.smape, smape),
            (interval.aiw, aiw),
            (interval.riwm, riwm),
        ] {
            worst = worst.max((a - b).abs());
        }
    }

    // a point predictor (no intervals) reports zero interval metrics,
    // matching the reference-baseline convention
    let empty = metrics_interval(&[], &[]).unwrap();
    let ha_convention = empty.aiw == 0.0 && empty.riwm == 0.0;

    report(
        "criterion 7",
        worst < 1e-12 && ha_convention,
        &format!("max |metric - direct recomputation| = {worst:.2e}; point-predictor AIW=RIWM=0"),
    );
}

// ---------------------------------------------------------------------
// criterion 8: directional degradation with missing rate
// ---------------------------------------------------------------------

#[test]
fn criterion_8_directional_degradation() {
    let spec = SyntheticSpec::default();
    let table = harmonic_grid(&spec).unwrap();
    let (_, t_hi) = table.time_index_range().unwrap();
    let split_at = t_hi - 168 + 1;
    let train_full = table.filter_records(|r| r.t_idx < split_at);
    let test = table.filter_records(|r| r.t_idx >= split_at);
    let metric = DistanceMetric::Euclidean;
    let graph = build_adjacency(
        table.stations(),
        median_pairwise_distance(table.stations(), metric),
        metric,
    )
    .unwrap();

    let stack = StackConfig {
        layers: 1,
        hidden: 32,
        ca_reduction: 8,
    };
    let rates = [0.0, 0.3, 0.6];
    let seeds = [1u64, 2, 3];
    let mut mean_rmse = Vec::new();
    for (ri, &rate) in rates.iter().enumerate() {
        let mut total = 0.0;
        for &seed in &seeds {
            let masked = if rate == 0.0 {
                train_full.clone()
            } else {
                apply_pattern(&train_full, MaskPattern::Random, rate, 800 + seed)
                    .unwrap()
                    .apply(&train_full)
                    .unwrap()
            };
            let stats = fit_preprocess(&masked).unwrap();
            let cfg = TrainConfig {
                epochs: 100,
                particles: 2,
                master_seed: 1000 * (ri as u64 + 1) + seed,
                batch_size: 512,
                lr0: 5e-3,
                weight_decay: 0.01,
                max_grad_norm: 1.0,
                lr_min_ratio: 0.01,
            };
            let (ensemble, _) = train_ensemble(
                &masked,
                &graph,
                &stats,
                EncoderConfig::default(),
                stack,
                cfg,
                0,
            )
            .unwrap();
            let test_samples = assemble_samples(&test, &ensemble.stats).unwrap();
            let queries = QueryBatch::from_samples(&test_samples, &ensemble.encoder).unwrap();
            let ctx = ensemble.context();
            let mixtures = predict(&ensemble, &ctx, &queries).unwrap();
            let y: Vec<f64> = test_samples
                .labels
                .iter()
                .map(|&z| ensemble.stats.unnormalize_target(z))
                .collect();
            let y_hat: Vec<f64> = mixtures.iter().map(|m| m.point_mean()).collect();
            total += metrics_point(&y, &y_hat).unwrap().rmse;
        }
        mean_rmse.push(total / seeds.len() as f64);
    }

    // non-decreasing in rate, with 5% slack between adjacent rates
    let ok = mean_rmse.windows(2).all(|w| w[1] >= w[0] * 0.95);
    report(
        "criterion 8",
        ok,
        &format!(
            "mean test RMSE over 3 seeds at rates {{0, 0.3, 0.6}}: {:.3} / {:.3} / {:.3}",
            mean_rmse[0], mean_rmse[1], mean_rmse[2]
        ),
    );
}

// ---------------------------------------------------------------------
// criterion 9: loss-masking invariance
// ---------------------------------------------------------------------

#[test]
fn criterion_9_loss_masking_invariance() {
    let spec = SyntheticSpec {
        t_steps: 240,
        ..Default::default()
    };
    let table = harmonic_grid(&spec).unwrap();
    let plan = apply_pattern(&table, MaskPattern::Random, 0.3, 909).unwrap();

    // flip the stored target of one masked cell in the raw table
    let (flip_t, flip_id) = plan.removed.iter().next().unwrap().clone();
    let flip_station = table.stations().index_of(&flip_id).unwrap();
    let mut flipped = table.clone();
    {
        // rebuild with one record's target changed
        let records: Vec<_> = flipped
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                if r.t_idx == flip_t && r.station == flip_station {
                    r.target = Some(r.target.unwrap() + 1.0e4);
                }
                r
            })
            .collect();
        flipped = ObservationTable::new(
            table.stations().clone(),
            records,
            table.frequency(),
            table.covariate_names().to_vec(),
        )
        .unwrap();
        flipped.discretize_time(table.reference_time()).unwrap();
    }

    let metric = DistanceMetric::Euclidean;
    let graph = build_adjacency(
        table.stations(),
        median_pairwise_distance(table.stations(), metric),
        metric,
    )
    .unwrap();
    let stack = StackConfig {
        layers: 1,
        hidden: 16,
        ca_reduction: 8,
    };
    let cfg = TrainConfig {
        epochs: 1,
        particles: 1,
        master_seed: 77,
        batch_size: usize::MAX >> 1, // one full batch
        lr0: 5e-3,
        weight_decay: 0.01,
        max_grad_norm: 1.0,
        lr_min_ratio: 0.01,
    };

    let run = |source: &ObservationTable| {
        let masked = plan.apply(source).unwrap();
        let stats = fit_preprocess(&masked).unwrap();
        let data = fieldcast::bayes::prepare_training(
            &masked,
            &graph,
            &stats,
            EncoderConfig::default(),
        )
        .unwrap();
        let (particle, _) = train_particle(&data, &stack, &cfg, 1234).unwrap();
        particle.params
    };
    let params_a = run(&table);
    let params_b = run(&flipped);

    let mut identical = true;
    for ((name_a, ta), (_, tb)) in params_a.iter().zip(params_b.iter()) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            if x.to_bits() != y.to_bits() {
                identical = false;
                eprintln!("parameter {name_a} differs");
                break;
            }
        }
    }
    report(
        "criterion 9",
        identical,
        "flipping a masked cell's stored target leaves every parameter bitwise unchanged after one full-batch epoch",
    );
}

// ---------------------------------------------------------------------
// criterion 10: end-to-end determinism of the evaluation command
// ---------------------------------------------------------------------

#[test]
fn criterion_10_eval_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let table = harmonic_grid(&SyntheticSpec {
        t_steps: 960,
        noise_sd: 0.3,
        ..Default::default()
    })
    .unwrap();
    let data_path = dir.path().join("grid.csv");
    write_csv(&table, &data_path).unwrap();

    let spec_path = dir.path().join("spec.json");
    fs::write(
        &spec_path,
        format!(
            r#"{{
  "data": "{}",
  "patterns": ["random"],
  "rates": [0.3],
  "folds": [0],
  "k_folds": 5,
  "encoder": {{ "periods": [24], "harmonics": [2], "fourier_k": 2,
               "gat_heads": 2, "gat_dim": 4, "gat_out_dim": 4 }},
  "model": {{ "cglu_layers": 1, "hidden_dim": 16 }},
  "training": {{ "epochs": 8, "particles": 2, "master_seed": 5, "batch_size": 2048, "lr0": 0.005 }},
  "split_seed": 3,
  "mask_seed": 9
}}"#,
            data_path.display()
        ),
    )
    .unwrap();

    let run_eval = |out: &std::path::Path, jobs: &str| {
        let code = fieldcast::cli::run([
            "fieldcast",
            "eval",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--jobs",
            jobs,
        ]);
        assert_eq!(code, 0, "eval failed");
        fs::read(out.join("aggregate.json")).unwrap()
    };

    let a = run_eval(&dir.path().join("run_a"), "1");
    let b = run_eval(&dir.path().join("run_b"), "1");
    let c = run_eval(&dir.path().join("run_c"), "4");

    // the reference rows keep the point-predictor interval convention
    let report_parsed: fieldcast::eval::ExperimentReport =
        serde_json::from_str(std::str::from_utf8(&a).unwrap()).unwrap();
    let ha_ok = report_parsed
        .rows
        .iter()
        .filter(|r| r.model == "ha")
        .all(|r| r.aiw == 0.0 && r.riwm == 0.0);

    report(
        "criterion 10",
        a == b && a == c && ha_ok,
        "aggregate JSON byte-identical across reruns and across --jobs 1 vs --jobs 4",
    );
}
