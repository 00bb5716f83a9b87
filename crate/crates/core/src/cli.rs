//! Batch command-line front end: `mask`, `train`, `predict`, `eval`,
//! `report`.
//!
//! Every command is deterministic given its arguments and seeds; outputs go
//! under `--out` and inputs are never mutated. Exit codes are stable:
//! 0 success, 2 validation, 3 numerical failure, 4 I/O.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bayes::{predict, train_ensemble, Ensemble, QueryBatch};
use crate::config::RunConfig;
use crate::data::{self, load_csv, write_csv, zscore_apply, SampleMatrix};
use crate::encoder::fixed_blocks;
use crate::error::{Error, Result};
use crate::eval::{plot_data, run_experiment, ExperimentReport, ExperimentSpec};
use crate::masking::{apply_pattern, MaskPattern, MaskPlan};

#[derive(Parser)]
#[command(
    name = "fieldcast",
    about = "Bayesian neural-field forecasting for incomplete sensor data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a missing-data pattern and write the plan plus masked table.
    Mask(MaskArgs),
    /// Train a MAP ensemble and write the model bundle and training curves.
    Train(TrainArgs),
    /// Predict means, variances and intervals for query points.
    Predict(PredictArgs),
    /// Run the full (pattern x rate x fold) evaluation protocol.
    Eval(EvalArgs),
    /// Re-emit aggregate results as json, csv, or tidy plot data.
    Report(ReportArgs),
}

#[derive(Args)]
struct MaskArgs {
    /// Input observation CSV.
    #[arg(long)]
    data: PathBuf,
    /// Pattern: random, node, timestamp, block. Required unless --plan is given.
    #[arg(long)]
    pattern: Option<String>,
    /// Missing rate in [0, 0.8]. Required unless --plan is given.
    #[arg(long)]
    rate: Option<f64>,
    /// RNG seed. Required unless --plan is given.
    #[arg(long)]
    seed: Option<u64>,
    /// Replay a previously written plan instead of sampling a new one.
    #[arg(long, conflicts_with_all = ["pattern", "rate", "seed"])]
    plan: Option<PathBuf>,
    /// Output directory (mask_plan.json, masked.csv).
    #[arg(long)]
    out: PathBuf,
    /// Sampling frequency of the data.
    #[arg(long, default_value = "hourly")]
    frequency: String,
    /// Comma-separated covariate column names.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Training observation CSV.
    #[arg(long)]
    data: PathBuf,
    /// Optional mask plan applied to the training data first.
    #[arg(long)]
    mask_plan: Option<PathBuf>,
    /// Output directory (ensemble.json, training_curve.csv).
    #[arg(long)]
    out: PathBuf,
    /// Particle-training threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained ensemble bundle.
    #[arg(long)]
    model: PathBuf,
    /// Query CSV: timestamp plus station_id or lat/lon, plus the model's
    /// covariate columns.
    #[arg(long)]
    queries: PathBuf,
    /// Central interval coverage level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Output directory (predictions.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment specification JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (aggregate.json, timings.json, per-cell CSVs).
    #[arg(long)]
    out: PathBuf,
    /// Particle-training threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more aggregate.json files.
    #[arg(long, value_delimiter = ',', required = true)]
    runs: Vec<PathBuf>,
    /// Output format: json, csv, or plotdata.
    #[arg(long, default_value = "json")]
    format: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests exit 0 through clap's printer
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Mask(args) => cmd_mask(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_mask(args: MaskArgs) -> Result<()> {
    let schema = data::CsvSchema {
        covariates: args.covariates.clone(),
        frequency: data::Frequency::parse(&args.frequency)?,
    };
    let mut table = load_csv(&args.data, &schema)?.table;
    table.discretize_time(None)?;

    let plan = match &args.plan {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            MaskPlan::from_json(&raw)?
        }
        None => {
            let pattern = args
                .pattern
                .as_deref()
                .ok_or_else(|| Error::Config("--pattern is required (or use --plan)".into()))?;
            let rate = args
                .rate
                .ok_or_else(|| Error::Config("--rate is required (or use --plan)".into()))?;
            let seed = args
                .seed
                .ok_or_else(|| Error::Config("--seed is required (or use --plan)".into()))?;
            apply_pattern(&table, MaskPattern::parse(pattern)?, rate, seed)?
        }
    };

    let masked = plan.apply(&table)?;
    ensure_dir(&args.out)?;
    write_text(&args.out.join("mask_plan.json"), &plan.to_json()?)?;
    write_csv(&masked, args.out.join("masked.csv"))?;
    println!(
        "pattern {} rate {:.4} (requested {:.4}), removed {} of {} cells",
        plan.pattern.name(),
        plan.rate_realized,
        plan.rate_requested,
        plan.removed.len(),
        table.eta()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let schema = config.data.csv_schema()?;
    let mut table = load_csv(&args.data, &schema)?.table;
    table.discretize_time(None)?;

    if let Some(plan_path) = &args.mask_plan {
        let raw = std::fs::read_to_string(plan_path)
            .map_err(|e| Error::io(plan_path.display().to_string(), e))?;
        let plan = MaskPlan::from_json(&raw)?;
        table = plan.apply(&table)?;
    }

    let stats = data::fit_preprocess(&table)?;
    let metric = config.data.metric();
    let sigma_d = config
        .data
        .sigma_d
        .unwrap_or_else(|| data::median_pairwise_distance(table.stations(), metric));
    let graph = data::build_adjacency(table.stations(), sigma_d, metric)?;
    let span = table.time_index_range().map(|(lo, hi)| hi - lo + 1).unwrap_or(0);
    let enc_cfg = config.encoder.resolve(span)?;

    let (ensemble, curves) = train_ensemble(
        &table,
        &graph,
        &stats,
        enc_cfg,
        config.model.stack(),
        config.training.clone(),
        args.jobs,
    )?;

    ensure_dir(&args.out)?;
    ensemble.save(args.out.join("ensemble.json"))?;

    let mut curve_csv = String::from("epoch,particle,loss,lr\n");
    for (m, curve) in curves.iter().enumerate() {
        for point in curve {
            curve_csv.push_str(&format!("{},{},{},{}\n", point.epoch, m, point.loss, point.lr));
        }
    }
    write_text(&args.out.join("training_curve.csv"), &curve_csv)?;
    println!(
        "trained {} particles on {} samples -> {}",
        ensemble.particle_count(),
        table.eta(),
        args.out.join("ensemble.json").display()
    );
    Ok(())
}

/// One parsed query row.
struct QueryRow {
    timestamp: String,
    t_idx: i64,
    /// Known-station index, or coordinates for an off-network query.
    site: QuerySite,
    covariates: Vec<f64>,
}

enum QuerySite {
    Station(usize),
    Coords(f64, f64),
}

fn parse_queries(path: &Path, ensemble: &Ensemble) -> Result<Vec<QueryRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let c_ts = find("timestamp").ok_or_else(|| Error::MissingColumn("timestamp".into()))?;
    let c_station = find("station_id");
    let c_lat = find("lat");
    let c_lon = find("lon");
    let c_covs: Vec<usize> = ensemble
        .covariate_names
        .iter()
        .map(|n| find(n).ok_or_else(|| Error::MissingColumn(n.clone())))
        .collect::<Result<_>>()?;

    let step = ensemble.frequency.seconds() as i64;
    let t0 = ensemble.stats.t0;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let raw_ts = record.get(c_ts).unwrap_or("").trim();
        let timestamp = chrono::DateTime::parse_from_rfc3339(raw_ts)
            .map(|t| t.with_timezone(&chrono::Utc))
            .or_else(|_| {
                chrono::NaiveDateTime::parse_from_str(raw_ts, "%Y-%m-%dT%H:%M:%S")
                    .map(|n| chrono::TimeZone::from_utc_datetime(&chrono::Utc, &n))
            })
            .map_err(|_| Error::Timestamp {
                value: raw_ts.into(),
                line,
            })?;
        let delta = timestamp.timestamp() - t0.timestamp();
        if delta < 0 {
            return Err(Error::Config(format!(
                "query time {raw_ts} is before the model reference time"
            )));
        }
        if delta % step != 0 {
            return Err(Error::Alignment(raw_ts.into()));
        }
        let t_idx = delta / step;

        let station_field = c_station.and_then(|c| record.get(c)).unwrap_or("").trim();
        let site = if !station_field.is_empty() {
            match ensemble.stations.index_of(station_field) {
                Some(idx) => QuerySite::Station(idx),
                None => {
                    // unknown id: fall back to coordinates when provided
                    match parse_coords(&record, c_lat, c_lon) {
                        Some((lat, lon)) => QuerySite::Coords(lat, lon),
                        None => {
                            return Err(Error::Config(format!(
                                "unknown station `{station_field}` at line {line} and no lat/lon given"
                            )))
                        }
                    }
                }
            }
        } else {
            match parse_coords(&record, c_lat, c_lon) {
                Some((lat, lon)) => QuerySite::Coords(lat, lon),
                None => {
                    return Err(Error::Config(format!(
                        "query at line {line} needs station_id or lat/lon"
                    )))
                }
            }
        };

        let mut covariates = Vec::with_capacity(c_covs.len());
        for &c in &c_covs {
            let v: f64 = record
                .get(c)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad covariate value at line {line}")))?;
            covariates.push(v);
        }
        rows.push(QueryRow {
            timestamp: raw_ts.to_string(),
            t_idx,
            site,
            covariates,
        });
    }
    Ok(rows)
}

fn parse_coords(
    record: &csv::StringRecord,
    c_lat: Option<usize>,
    c_lon: Option<usize>,
) -> Option<(f64, f64)> {
    let lat: f64 = record.get(c_lat?)?.trim().parse().ok()?;
    let lon: f64 = record.get(c_lon?)?.trim().parse().ok()?;
    (lat.is_finite() && lon.is_finite()).then_some((lat, lon))
}

/// Build the sample matrix and (possibly extended) context for a query set.
fn assemble_query_batch(
    rows: &[QueryRow],
    ensemble: &Ensemble,
) -> Result<(crate::encoder::EncoderContext, QueryBatch)> {
    let stats = &ensemble.stats;
    // deduplicate off-network coordinates into query nodes
    let mut extra: Vec<(f64, f64)> = Vec::new();
    let mut node_of = Vec::with_capacity(rows.len());
    for row in rows {
        match row.site {
            QuerySite::Station(idx) => node_of.push(idx),
            QuerySite::Coords(lat, lon) => {
                let pos = extra
                    .iter()
                    .position(|&(a, b)| a == lat && b == lon)
                    .unwrap_or_else(|| {
                        extra.push((lat, lon));
                        extra.len() - 1
                    });
                node_of.push(ensemble.stations.len() + pos);
            }
        }
    }

    let base_ctx = ensemble.context();
    let ctx = if extra.is_empty() {
        base_ctx
    } else {
        base_ctx.extend_with_queries(
            &ensemble.stations,
            &extra,
            ensemble.graph.metric,
            ensemble.graph.sigma_d,
        )?
    };

    let d_prepro = 3 + stats.covariates.len();
    if ensemble.covariate_names.len() != stats.covariates.len() {
        return Err(Error::Dimension("bundle covariate metadata mismatch".into()));
    }
    let mut features = Vec::with_capacity(rows.len() * d_prepro);
    let mut t_raw = Vec::with_capacity(rows.len());
    let mut coords01 = Vec::with_capacity(rows.len());
    let mut back_refs = Vec::with_capacity(rows.len());
    for (row, &node) in rows.iter().zip(&node_of) {
        let (lat, lon) = match row.site {
            QuerySite::Station(idx) => {
                let s = ensemble.stations.get(idx);
                (s.lat, s.lon)
            }
            QuerySite::Coords(lat, lon) => (lat, lon),
        };
        features.push(row.t_idx as f64 / stats.t_max as f64);
        features.push(zscore_apply(lat, &stats.lat));
        features.push(zscore_apply(lon, &stats.lon));
        for (v, cs) in row.covariates.iter().zip(&stats.covariates) {
            features.push(zscore_apply(*v, cs));
        }
        t_raw.push(row.t_idx);
        coords01.push(stats.coords01(lat, lon));
        back_refs.push((row.t_idx, node));
    }
    let count = rows.len();
    let samples = SampleMatrix {
        features: crate::autodiff::Tensor::new(count, d_prepro, features)?,
        t_raw,
        labels: vec![0.0; count],
        station_idx: node_of.clone(),
        coords01,
        back_refs,
        d_prepro,
    };
    let fixed = fixed_blocks(&samples, &ensemble.encoder)?;
    Ok((
        ctx,
        QueryBatch {
            fixed,
            stations: node_of,
        },
    ))
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    if !(0.0 < args.level && args.level < 1.0) {
        return Err(Error::Config(format!("level {} outside (0,1)", args.level)));
    }
    let ensemble = Ensemble::load(&args.model)?;
    let rows = parse_queries(&args.queries, &ensemble)?;
    if rows.is_empty() {
        return Err(Error::Config("query file has no rows".into()));
    }
    let (ctx, batch) = assemble_query_batch(&rows, &ensemble)?;
    let mixtures = predict(&ensemble, &ctx, &batch)?;

    ensure_dir(&args.out)?;
    let mut out = String::from("timestamp,site,mean,variance,lower,upper\n");
    for (row, mix) in rows.iter().zip(&mixtures) {
        let site = match row.site {
            QuerySite::Station(idx) => ensemble.stations.get(idx).id.clone(),
            QuerySite::Coords(lat, lon) => format!("{lat}/{lon}"),
        };
        let (lo, hi) = mix.interval(args.level)?;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.timestamp,
            site,
            mix.point_mean(),
            mix.variance(),
            lo,
            hi
        ));
    }
    write_text(&args.out.join("predictions.csv"), &out)?;
    println!("wrote {} predictions", mixtures.len());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&args.spec)?;
    ensure_dir(&args.out)?;
    let output = run_experiment(&spec, args.jobs, Some(&args.out))?;
    let mut aggregate = serde_json::to_string_pretty(&output.report)?;
    aggregate.push('\n');
    write_text(&args.out.join("aggregate.json"), &aggregate)?;
    let mut timings = serde_json::to_string_pretty(&output.timings)?;
    timings.push('\n');
    write_text(&args.out.join("timings.json"), &timings)?;
    println!(
        "evaluated {} cells -> {}",
        output.timings.rows.len(),
        args.out.join("aggregate.json").display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &args.runs {
        let raw =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let report: ExperimentReport = serde_json::from_str(&raw)?;
        reports.push(report);
    }

    let rendered = match args.format.as_str() {
        "json" => {
            let rows: Vec<_> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
            let mut s = serde_json::to_string_pretty(&rows)?;
            s.push('\n');
            s
        }
        "csv" => {
            let mut s = String::from("pattern,rate,fold,model,rmse,mae,r2,smape,aiw,riwm,n\n");
            for report in &reports {
                for row in &report.rows {
                    let r2 = row.r2.map(|v| v.to_string()).unwrap_or_default();
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},{}\n",
                        row.pattern,
                        row.rate,
                        row.fold,
                        row.model,
                        row.rmse,
                        row.mae,
                        r2,
                        row.smape,
                        row.aiw,
                        row.riwm,
                        row.n
                    ));
                }
            }
            s
        }
        "plotdata" => {
            let mut s = String::from("model,pattern,rate,metric,value\n");
            for report in &reports {
                for (model, pattern, rate, metric, value) in plot_data(report) {
                    s.push_str(&format!("{model},{pattern},{rate},{metric},{value}\n"));
                }
            }
            s
        }
        other => {
            return Err(Error::Config(format!(
                "unknown format `{other}` (expected json, csv, plotdata)"
            )))
        }
    };

    match &args.out {
        Some(path) => write_text(path, &rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}
