//! Bayesian probabilistic prediction.
//!
//! A Gaussian likelihood over the observed cells plus independent standard
//! logistic priors on every parameter (including log sigma) defines a MAP
//! objective. Training runs the objective through AdamW with cosine
//! annealing and global gradient clipping, from several random
//! initializations; the resulting particles form an equal-weight Gaussian
//! mixture that yields point forecasts, a variance decomposition, and
//! quantile intervals.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    clip_global_norm, grad_check, logistic_log_pdf, Bound, GradSet, InitKind, OptimConfig,
    OptimState, ParamSet, ParamSpec, Tape, Tensor, Var,
};
use crate::data::{
    Frequency, MonitoringGraph, ObservationTable, PreprocessStats, SampleMatrix, StationSet,
};
use crate::encoder::{self, EncoderConfig, EncoderContext, GateStats, Pooling};
use crate::error::{Error, Result};
use crate::gated::{self, StackConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_4;
const LOG_SIGMA: &str = "noise/log_sigma";

/// Negative log-likelihood of one observation under N(mu, sigma^2).
pub fn nll(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let r = y - mu;
    Ok(r * r / (2.0 * sigma * sigma) + 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln())
}

/// Sum of per-observation negative log-likelihoods; absent cells simply do
/// not appear in the iterator.
pub fn total_nll(pairs: impl IntoIterator<Item = (f64, f64)>, sigma: f64) -> Result<f64> {
    let mut total = 0.0;
    for (y, mu) in pairs {
        total += nll(y, mu, sigma)?;
    }
    Ok(total)
}

/// Sum of standard-logistic log densities over every scalar parameter.
pub fn log_prior(params: &ParamSet) -> f64 {
    params
        .iter()
        .map(|(_, t)| t.data().iter().map(|&x| logistic_log_pdf(x)).sum::<f64>())
        .sum()
}

/// One MAP solution: all network parameters plus log sigma, with the seed
/// that produced it and the final objective value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub params: ParamSet,
    pub seed: u64,
    pub final_objective: f64,
}

impl Particle {
    pub fn log_sigma(&self) -> f64 {
        self.params
            .get(LOG_SIGMA)
            .map(Tensor::scalar_value)
            .unwrap_or(0.0)
    }

    /// Observation-noise scale in normalized label units.
    pub fn sigma(&self) -> f64 {
        self.log_sigma().exp()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub particles: usize,
    pub master_seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
    /// lr floor as a fraction of lr0.
    #[serde(default = "default_lr_min_ratio")]
    pub lr_min_ratio: f64,
}

fn default_batch_size() -> usize {
    512
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_max_grad_norm() -> f64 {
    1.0
}
fn default_lr_min_ratio() -> f64 {
    0.01
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particles must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        Ok(())
    }

    fn optim_config(&self, total_steps: u64) -> OptimConfig {
        OptimConfig {
            lr0: self.lr0,
            lr_min: self.lr0 * self.lr_min_ratio,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            total_steps,
        }
    }
}

/// Everything one training run needs, shared read-only across particles.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub ctx: EncoderContext,
    /// Constant feature blocks of every training sample.
    pub fixed: Tensor,
    /// z-scored labels.
    pub labels: Vec<f64>,
    pub stations: Vec<usize>,
    /// Full observed-cell count; rescales mini-batch likelihoods.
    pub eta: usize,
}

/// Assemble training inputs from a masked, discretized training table.
pub fn prepare_training(
    train: &ObservationTable,
    graph: &MonitoringGraph,
    stats: &PreprocessStats,
    enc_cfg: EncoderConfig,
) -> Result<TrainData> {
    let samples = crate::data::assemble_samples(train, stats)?;
    if samples.is_empty() {
        return Err(Error::Contract("training table has no observed targets".into()));
    }
    let eta = samples.len();
    let ctx = EncoderContext::build(enc_cfg, graph, train, stats, samples.d_prepro)?;
    let fixed = encoder::fixed_blocks(&samples, &ctx.cfg)?;
    Ok(TrainData {
        ctx,
        fixed,
        labels: samples.labels,
        stations: samples.station_idx,
        eta,
    })
}

/// Initialize one particle's parameters from a seed: symmetric uniform
/// scaled by 1/sqrt(fan_in) for weights, zeros for biases and mixture
/// logits, log sigma = 0.
pub fn init_params(enc: &EncoderConfig, stack: &StackConfig, d_prepro: usize, seed: u64) -> Result<ParamSet> {
    let layout = crate::encoder::FeatureLayout::new(d_prepro, enc);
    let mut specs = encoder::param_specs(enc, &layout);
    specs.extend(gated::param_specs(stack, layout.channels()));
    specs.push(ParamSpec::zero(LOG_SIGMA, 1, 1));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for spec in specs {
        let tensor = match spec.init {
            InitKind::Zero => Tensor::zeros(spec.rows, spec.cols),
            InitKind::UniformFanIn => {
                let bound = 1.0 / (spec.rows as f64).sqrt();
                let data = (0..spec.rows * spec.cols)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new(spec.rows, spec.cols, data)?
            }
        };
        params.insert(spec.name, tensor)?;
    }
    Ok(params)
}

/// The MAP loss on the tape for one batch: the batch negative
/// log-likelihood rescaled to full-data scale (eta / batch) minus the log
/// prior over every bound parameter. An empty batch yields the pure prior
/// term.
fn objective_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    data: &TrainData,
    stack: &StackConfig,
    batch: &[usize],
    pooling: &mut Pooling,
) -> Result<Var> {
    let mut prior: Option<Var> = None;
    for (_, &var) in bound.iter() {
        let lp = tape.logistic_log_pdf(var);
        let s = tape.sum(lp);
        prior = Some(match prior {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let prior = prior.ok_or_else(|| Error::Contract("no parameters bound".into()))?;

    if batch.is_empty() {
        return Ok(tape.scale(prior, -1.0));
    }

    let fixed_batch = tape.constant(data.fixed.select_rows(batch));
    let stations: Vec<usize> = batch.iter().map(|&i| data.stations[i]).collect();
    let labels: Vec<f64> = batch.iter().map(|&i| data.labels[i]).collect();
    let b = batch.len() as f64;

    let encoded = encoder::encode(tape, bound, &data.ctx, fixed_batch, &stations, pooling)?;
    let mu = gated::forward_mean(tape, bound, stack, encoded, pooling)?;

    let y = tape.constant(Tensor::column(labels));
    let resid = tape.sub(y, mu)?;
    let sq = tape.square(resid);
    let ssq = tape.sum(sq);

    let log_sigma = bound.var(LOG_SIGMA);
    let neg_two = tape.scale(log_sigma, -2.0);
    let precision = tape.exp(neg_two);
    let half_precision = tape.scale(precision, 0.5);
    let quad = tape.mul(ssq, half_precision)?;

    let sig_term = tape.scale(log_sigma, b);
    let log_term = tape.offset(sig_term, b * 0.5 * LN_2PI);
    let batch_nll = tape.add(quad, log_term)?;

    let rescaled = tape.scale(batch_nll, data.eta as f64 / b);
    tape.sub(rescaled, prior)
}


/// Evaluate the MAP objective and its gradients for a parameter set; the
/// finite-difference oracle drives this in tests.
pub fn map_objective(
    params: &ParamSet,
    data: &TrainData,
    stack: &StackConfig,
    batch: &[usize],
) -> Result<(f64, GradSet)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = objective_on_tape(&mut tape, &bound, data, stack, batch, &mut Pooling::Batch)?;
    let grads = tape.backward(loss)?;
    Ok((
        tape.value(loss).scalar_value(),
        bound.collect_grads(&tape, &grads),
    ))
}

/// Finite-difference check of the full objective at the given batch size.
pub fn objective_grad_check(
    params: &ParamSet,
    data: &TrainData,
    stack: &StackConfig,
    batch: &[usize],
    eps: f64,
) -> Result<f64> {
    grad_check(
        |p| map_objective(p, data, stack, batch),
        params,
        eps,
    )
}

/// One point of a training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

const GRAD_EXPLOSION_LIMIT: f64 = 1e6;
const GRAD_EXPLOSION_PATIENCE: usize = 10;

/// Train one MAP particle from a seed. Mini-batches reshuffle every epoch;
/// each optimizer step applies global-norm clipping and the cosine-annealed
/// learning rate. Zero epochs return the initialized particle unchanged.
pub fn train_particle(
    data: &TrainData,
    stack: &StackConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Particle, Vec<CurvePoint>)> {
    cfg.validate()?;
    stack.validate()?;
    let n = data.labels.len();
    let batch_size = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;

    let mut params = init_params(
        &data.ctx.cfg,
        stack,
        data.ctx.layout.prepro.len(),
        seed,
    )?;
    let mut state = OptimState::new(&params, cfg.optim_config(total_steps.max(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut explosion_streak = 0usize;
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);
        let lr_at_epoch = state.current_lr();
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;

        for batch in indices.chunks(batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let loss =
                objective_on_tape(&mut tape, &bound, data, stack, batch, &mut Pooling::Batch)?;
            let loss_value = tape.value(loss).scalar_value();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite objective {loss_value}"),
                });
            }
            let grads = tape.backward(loss)?;
            let mut grads = bound.collect_grads(&tape, &grads);
            let pre_clip = clip_global_norm(&mut grads, state.config.max_grad_norm);
            if pre_clip > GRAD_EXPLOSION_LIMIT {
                explosion_streak += 1;
                if explosion_streak >= GRAD_EXPLOSION_PATIENCE {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!(
                            "gradient norm above {GRAD_EXPLOSION_LIMIT:.0e} for {GRAD_EXPLOSION_PATIENCE} consecutive steps"
                        ),
                    });
                }
            } else {
                explosion_streak = 0;
            }
            state.step(&mut params, &grads)?;
            epoch_loss += loss_value;
            batches += 1.0;
        }

        last_loss = epoch_loss / batches;
        curve.push(CurvePoint {
            epoch,
            loss: last_loss,
            lr: lr_at_epoch,
        });
    }

    let final_objective = if cfg.epochs == 0 { f64::NAN } else { last_loss };
    Ok((
        Particle {
            params,
            seed,
            final_objective,
        },
        curve,
    ))
}

/// A trained ensemble bundle: particles plus everything required to encode
/// new queries (stations, graph, descriptors, normalization statistics).
/// The JSON form round-trips exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ensemble {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub stack: StackConfig,
    pub train: TrainConfig,
    pub stats: PreprocessStats,
    pub stations: StationSet,
    pub graph: MonitoringGraph,
    pub covariate_names: Vec<String>,
    pub frequency: Frequency,
    pub d_prepro: usize,
    pub descriptors: Tensor,
    pub fallback_stations: Vec<usize>,
    pub global_descriptor: [f64; 3],
    /// Pooled gate statistics per particle when channel stats are frozen.
    pub gate_stats: Option<Vec<GateStats>>,
    pub particles: Vec<Particle>,
}

pub const BUNDLE_VERSION: u32 = 1;

impl Ensemble {
    pub fn particle_count(&self) -> usize {
        self.particles.len()
    }

    /// Rebuild the encoder context stored in the bundle.
    pub fn context(&self) -> EncoderContext {
        EncoderContext::from_parts(
            self.encoder.clone(),
            self.d_prepro,
            self.descriptors.clone(),
            self.graph.adjacency.clone(),
            self.fallback_stations.clone(),
            self.global_descriptor,
            self.stations.len(),
        )
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let bundle: Ensemble = serde_json::from_str(&raw)?;
        if bundle.version != BUNDLE_VERSION {
            return Err(Error::Config(format!(
                "unsupported bundle version {} (expected {BUNDLE_VERSION})",
                bundle.version
            )));
        }
        Ok(bundle)
    }
}

/// Train M independent particles with derived seeds master_seed + m.
/// Particles run in parallel across `jobs` threads (0 = rayon default);
/// results are ordered by particle index, so scheduling cannot change the
/// outcome. Returns the ensemble plus per-particle training curves.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble(
    table: &ObservationTable,
    graph: &MonitoringGraph,
    stats: &PreprocessStats,
    enc_cfg: EncoderConfig,
    stack: StackConfig,
    cfg: TrainConfig,
    jobs: usize,
) -> Result<(Ensemble, Vec<Vec<CurvePoint>>)> {
    cfg.validate()?;
    let data = prepare_training(table, graph, stats, enc_cfg)?;
    let seeds: Vec<u64> = (1..=cfg.particles as u64).map(|m| cfg.master_seed + m).collect();

    let run = || -> Vec<Result<(Particle, Vec<CurvePoint>)>> {
        seeds
            .par_iter()
            .map(|&seed| train_particle(&data, &stack, &cfg, seed))
            .collect()
    };
    let results = if jobs == 0 {
        run()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(run)
    };

    let mut particles = Vec::with_capacity(results.len());
    let mut curves = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (seed, result) in seeds.iter().zip(results) {
        match result {
            Ok((p, c)) => {
                particles.push(p);
                curves.push(c);
            }
            Err(e) => failed.push(format!("seed {seed}: {e}")),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Divergence {
            epoch: 0,
            detail: format!("particles failed: {}", failed.join("; ")),
        });
    }

    // capture per-particle pooled statistics over the training set when the
    // config asks for frozen channel stats at prediction time
    let gate_stats = if data.ctx.cfg.freeze_channel_stats {
        let all: Vec<usize> = (0..data.labels.len()).collect();
        let mut per_particle = Vec::with_capacity(particles.len());
        for p in &particles {
            let mut pooling = Pooling::Capture(GateStats::default());
            let mut tape = Tape::new();
            let bound = p.params.bind(&mut tape);
            objective_on_tape(&mut tape, &bound, &data, &stack, &all, &mut pooling)?;
            let Pooling::Capture(stats) = pooling else { unreachable!() };
            per_particle.push(stats);
        }
        Some(per_particle)
    } else {
        None
    };

    let ensemble = Ensemble {
        version: BUNDLE_VERSION,
        encoder: data.ctx.cfg.clone(),
        stack,
        train: cfg,
        stats: stats.clone(),
        stations: table.stations().clone(),
        graph: graph.clone(),
        covariate_names: table.covariate_names().to_vec(),
        frequency: table.frequency(),
        d_prepro: data.ctx.layout.prepro.len(),
        descriptors: data.ctx.descriptors.clone(),
        fallback_stations: data.ctx.fallback_stations.clone(),
        global_descriptor: data.ctx.global_descriptor,
        gate_stats,
        particles,
    };
    Ok((ensemble, curves))
}

/// One per-query Gaussian mixture component, in target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: f64,
    pub std: f64,
}

/// Equal-weight Gaussian mixture over the ensemble's particles for one
/// query point, de-normalized to target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMixture {
    pub components: Vec<MixtureComponent>,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

impl PredictiveMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Self {
        Self { components }
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Equal-weight mixture mean.
    pub fn point_mean(&self) -> f64 {
        let m = self.components.len() as f64;
        self.components.iter().map(|c| c.mean).sum::<f64>() / m
    }

    /// Total predictive variance: mean component variance (observation
    /// noise) plus the population variance of component means (model
    /// spread).
    pub fn variance(&self) -> f64 {
        let m = self.components.len() as f64;
        let noise = self.components.iter().map(|c| c.std * c.std).sum::<f64>() / m;
        let mean = self.point_mean();
        let spread = self
            .components
            .iter()
            .map(|c| (c.mean - mean) * (c.mean - mean))
            .sum::<f64>()
            / m;
        noise + spread
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let m = self.components.len() as f64;
        self.components
            .iter()
            .map(|c| normal_cdf((x - c.mean) / c.std))
            .sum::<f64>()
            / m
    }

    /// Quantile by bisection on the mixture CDF to absolute tolerance 1e-6,
    /// bracketed at 10 component scales beyond the extreme means.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) || q == 0.0 || q == 1.0 {
            return Err(Error::Domain(format!("quantile level {q} outside (0,1)")));
        }
        let min_mu = self.components.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
        let max_mu = self
            .components
            .iter()
            .map(|c| c.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        let max_sigma = self.components.iter().map(|c| c.std).fold(0.0, f64::max);
        let mut lo = min_mu - 10.0 * max_sigma;
        let mut hi = max_mu + 10.0 * max_sigma;
        while hi - lo > 1e-6 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Central interval at the given coverage level (e.g. 0.95).
    pub fn interval(&self, level: f64) -> Result<(f64, f64)> {
        if !(0.0 < level && level < 1.0) {
            return Err(Error::Domain(format!("interval level {level} outside (0,1)")));
        }
        let tail = (1.0 - level) / 2.0;
        Ok((self.quantile(tail)?, self.quantile(1.0 - tail)?))
    }
}

/// Total predictive variance of a mixture (free-function form).
pub fn predictive_variance(mixture: &PredictiveMixture) -> f64 {
    mixture.variance()
}

/// Mixture quantile (free-function form).
pub fn mixture_quantile(mixture: &PredictiveMixture, q: f64) -> Result<f64> {
    mixture.quantile(q)
}

/// A batch of encodable queries against a (possibly extended) context.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub fixed: Tensor,
    pub stations: Vec<usize>,
}

impl QueryBatch {
    /// Queries drawn from an assembled sample matrix (known stations).
    pub fn from_samples(samples: &SampleMatrix, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            fixed: encoder::fixed_blocks(samples, cfg)?,
            stations: samples.station_idx.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }
}

/// Predict one Gaussian mixture per query. Component means come from each
/// particle's forward pass (de-normalized); component scales are the
/// particle noise levels times the training label scale.
pub fn predict(
    ensemble: &Ensemble,
    ctx: &EncoderContext,
    queries: &QueryBatch,
) -> Result<Vec<PredictiveMixture>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let label_std = ensemble.stats.target.std;
    let mut per_query: Vec<Vec<MixtureComponent>> =
        vec![Vec::with_capacity(ensemble.particles.len()); queries.len()];

    for (m, particle) in ensemble.particles.iter().enumerate() {
        let mut pooling = match &ensemble.gate_stats {
            Some(all) => Pooling::Frozen(all[m].clone()),
            None => Pooling::Batch,
        };
        let mut tape = Tape::new();
        let bound = particle.params.bind(&mut tape);
        let fixed = tape.constant(queries.fixed.clone());
        let encoded = encoder::encode(&mut tape, &bound, ctx, fixed, &queries.stations, &mut pooling)?;
        let mu = gated::forward_mean(&mut tape, &bound, &ensemble.stack, encoded, &mut pooling)?;
        let sigma_raw = particle.sigma() * label_std;
        for (i, comp) in per_query.iter_mut().enumerate() {
            let mu_raw = ensemble.stats.unnormalize_target(tape.value(mu).get(i, 0));
            comp.push(MixtureComponent {
                mean: mu_raw,
                std: sigma_raw,
            });
        }
    }
    Ok(per_query.into_iter().map(PredictiveMixture::new).collect())
}
