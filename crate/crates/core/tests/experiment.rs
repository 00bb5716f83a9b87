//! Experiment-runner behavior: protocol collapse at rate zero, reference
//! rows, horizons, and the incremental-covariate path.

use fieldcast::bayes::{predict, train_ensemble, QueryBatch, TrainConfig};
use fieldcast::config::{DataSection, EncoderSection, ModelSection};
use fieldcast::data::{
    assemble_samples, build_adjacency, fit_preprocess, median_pairwise_distance, write_csv,
    DistanceMetric,
};
use fieldcast::eval::{metrics_point, run_experiment, run_experiment_on, ExperimentSpec};
use fieldcast::masking::{make_cv_splits, MaskPattern};
use fieldcast::synth::{harmonic_grid, SyntheticSpec};

fn small_sections() -> (EncoderSection, ModelSection, TrainConfig) {
    (
        EncoderSection {
            periods: vec![24],
            harmonics: vec![2],
            fourier_k: 2,
            gat_heads: 2,
            gat_dim: 4,
            gat_out_dim: 4,
            ..Default::default()
        },
        ModelSection {
            cglu_layers: 1,
            hidden_dim: 12,
            ca_reduction: 8,
        },
        TrainConfig {
            epochs: 6,
            particles: 1,
            master_seed: 4,
            batch_size: 4096,
            lr0: 5e-3,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            lr_min_ratio: 0.01,
        },
    )
}

fn grid() -> fieldcast::data::ObservationTable {
    harmonic_grid(&SyntheticSpec {
        t_steps: 960,
        noise_sd: 0.3,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn rate_zero_collapses_to_direct_invocation() {
    let table = grid();
    let (encoder, model, training) = small_sections();
    let spec = ExperimentSpec {
        data: "unused".into(),
        schema: DataSection::default(),
        patterns: vec![MaskPattern::Random],
        rates: vec![0.0],
        folds: Some(vec![0]),
        k_folds: 5,
        horizon_steps: None,
        encoder: encoder.clone(),
        model: model.clone(),
        training: training.clone(),
        interval_level: 0.95,
        split_seed: 3,
        mask_seed: 9,
        covariates_used: None,
    };
    let output = run_experiment_on(&spec, &table, 1, None).unwrap();
    let ours: Vec<_> = output.report.rows.iter().filter(|r| r.model == "fieldcast").collect();
    assert_eq!(ours.len(), 1);

    // direct route: same split, no masking, manual train/predict/score.
    // the runner derives the ensemble master seed per cell, reproduce that.
    let splits = make_cv_splits(&table, 5, 3).unwrap();
    let train = splits.train_table(&table, 0);
    let test = splits.test_table(&table, 0);
    let stats = fit_preprocess(&train).unwrap();
    let metric = DistanceMetric::Euclidean;
    let graph = build_adjacency(
        table.stations(),
        median_pairwise_distance(table.stations(), metric),
        metric,
    )
    .unwrap();
    let span = train.time_index_range().map(|(lo, hi)| hi - lo + 1).unwrap();
    let mut training_direct = training.clone();
    training_direct.master_seed = training.master_seed; // pattern 0, rate 0, fold 0 offsets are all zero
    let (ensemble, _) = train_ensemble(
        &train,
        &graph,
        &stats,
        encoder.resolve(span).unwrap(),
        model.stack(),
        training_direct,
        1,
    )
    .unwrap();
    let samples = assemble_samples(&test, &ensemble.stats).unwrap();
    let queries = QueryBatch::from_samples(&samples, &ensemble.encoder).unwrap();
    let ctx = ensemble.context();
    let mixtures = predict(&ensemble, &ctx, &queries).unwrap();
    let y: Vec<f64> = samples
        .labels
        .iter()
        .map(|&z| ensemble.stats.unnormalize_target(z))
        .collect();
    let y_hat: Vec<f64> = mixtures.iter().map(|m| m.point_mean()).collect();
    let direct = metrics_point(&y, &y_hat).unwrap();

    assert_eq!(ours[0].rmse.to_bits(), direct.rmse.to_bits());
    assert_eq!(ours[0].mae.to_bits(), direct.mae.to_bits());
    assert_eq!(ours[0].n, direct.n);
}

#[test]
fn every_cell_reports_a_reference_row() {
    let table = grid();
    let (encoder, model, training) = small_sections();
    let spec = ExperimentSpec {
        data: "unused".into(),
        schema: DataSection::default(),
        patterns: vec![MaskPattern::Random, MaskPattern::Timestamp],
        rates: vec![0.0, 0.3],
        folds: Some(vec![0, 2]),
        k_folds: 5,
        horizon_steps: Some(48),
        encoder,
        model,
        training,
        interval_level: 0.95,
        split_seed: 3,
        mask_seed: 9,
        covariates_used: None,
    };
    let output = run_experiment_on(&spec, &table, 1, None).unwrap();
    // 2 patterns x 2 rates x 2 folds, one model row + one reference row each
    assert_eq!(output.report.rows.len(), 2 * 2 * 2 * 2);
    for chunk in output.report.rows.chunks(2) {
        assert_eq!(chunk[0].model, "fieldcast");
        assert_eq!(chunk[1].model, "ha");
        assert_eq!(chunk[1].aiw, 0.0);
        assert_eq!(chunk[1].riwm, 0.0);
        // shared cell coordinates
        assert_eq!(chunk[0].pattern, chunk[1].pattern);
        assert_eq!((chunk[0].rate, chunk[0].fold), (chunk[1].rate, chunk[1].fold));
        // horizon restricted the window: 48 steps x up to 2 stations per fold
        assert!(chunk[0].n <= 48 * 2);
    }
}

#[test]
fn covariate_subset_flows_through_csv_path() {
    // write a CSV with one informative covariate, then run once with it and
    // once without it
    let dir = tempfile::tempdir().unwrap();
    let base = grid();
    // add a covariate column equal to the noiseless signal
    let spec_gen = SyntheticSpec {
        t_steps: 960,
        noise_sd: 0.3,
        ..Default::default()
    };
    let records: Vec<_> = base
        .records()
        .iter()
        .cloned()
        .map(|mut r| {
            let s = base.stations().get(r.station);
            r.covariates = vec![spec_gen.signal(r.t_idx, s.lat, s.lon)];
            r
        })
        .collect();
    let table = fieldcast::data::ObservationTable::new(
        base.stations().clone(),
        records,
        base.frequency(),
        vec!["signal_proxy".into()],
    )
    .unwrap();
    let path = dir.path().join("cov.csv");
    write_csv(&table, &path).unwrap();

    let (encoder, model, training) = small_sections();
    let mut spec = ExperimentSpec {
        data: path.display().to_string(),
        schema: DataSection {
            covariates: vec!["signal_proxy".into()],
            ..Default::default()
        },
        patterns: vec![MaskPattern::Random],
        rates: vec![0.0],
        folds: Some(vec![0]),
        k_folds: 5,
        horizon_steps: Some(48),
        encoder,
        model,
        training,
        interval_level: 0.95,
        split_seed: 3,
        mask_seed: 9,
        covariates_used: Some(vec!["signal_proxy".into()]),
    };
    let with_cov = run_experiment(&spec, 1, None).unwrap();
    spec.covariates_used = Some(vec![]);
    let without_cov = run_experiment(&spec, 1, None).unwrap();

    let rmse_of = |out: &fieldcast::eval::ExperimentOutput| {
        out.report
            .rows
            .iter()
            .find(|r| r.model == "fieldcast")
            .map(|r| r.rmse)
            .unwrap()
    };
    // both run; results differ because the model input changed
    assert_ne!(rmse_of(&with_cov).to_bits(), rmse_of(&without_cov).to_bits());
    // fingerprints differ because the spec changed
    assert_ne!(with_cov.report.spec_fingerprint, without_cov.report.spec_fingerprint);
}

#[test]
fn evaluation_ignores_unobserved_ground_truth_cells() {
    use std::collections::BTreeSet;
    // make 30% of the test-window targets absent; dropping those records
    // entirely must leave every metric untouched
    let full = grid();
    let (_, t_hi) = full.time_index_range().unwrap();
    let window_start = t_hi - 720 + 1;
    let absent: BTreeSet<(i64, usize)> = full
        .observed_cells()
        .into_iter()
        .filter(|&(t, s)| t >= window_start && (t + s as i64) % 3 == 0)
        .collect();
    let with_gaps = full.with_targets_removed(&absent);
    let dropped = with_gaps.filter_records(|r| r.target.is_some() || r.t_idx < window_start);

    let (encoder, model, training) = small_sections();
    let spec = ExperimentSpec {
        data: "unused".into(),
        schema: DataSection::default(),
        patterns: vec![MaskPattern::Random],
        rates: vec![0.2],
        folds: Some(vec![0]),
        k_folds: 5,
        horizon_steps: None,
        encoder,
        model,
        training,
        interval_level: 0.95,
        split_seed: 3,
        mask_seed: 9,
        covariates_used: None,
    };
    let a = run_experiment_on(&spec, &with_gaps, 1, None).unwrap();
    let b = run_experiment_on(&spec, &dropped, 1, None).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

#[test]
fn prediction_files_are_written_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let table = grid();
    let (encoder, model, training) = small_sections();
    let spec = ExperimentSpec {
        data: "unused".into(),
        schema: DataSection::default(),
        patterns: vec![MaskPattern::Block],
        rates: vec![0.2],
        folds: Some(vec![1]),
        k_folds: 5,
        horizon_steps: Some(24),
        encoder,
        model,
        training,
        interval_level: 0.95,
        split_seed: 3,
        mask_seed: 9,
        covariates_used: None,
    };
    let output = run_experiment_on(&spec, &table, 1, Some(dir.path())).unwrap();
    assert_eq!(output.prediction_files.len(), 1);
    let body = std::fs::read_to_string(&output.prediction_files[0]).unwrap();
    let mut lines = body.lines();
    assert_eq!(
        lines.next().unwrap(),
        "time_index,station_id,y_true,y_pred,lower,upper"
    );
    let n_rows = lines.count();
    let ours = &output.report.rows[0];
    assert_eq!(n_rows, ours.n);
    // intervals are ordered lower <= upper on every row
    for line in body.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let lo: f64 = f[4].parse().unwrap();
        let hi: f64 = f[5].parse().unwrap();
        assert!(lo <= hi);
    }
}
