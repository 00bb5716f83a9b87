//! Multilevel spatio-temporal feature encoding.
//!
//! Raw samples become a wide channel matrix built from six blocks, in order:
//! preprocessed features, time-space interactions, the space-space
//! interaction, harmonic seasonality, dyadic spatial Fourier channels, and
//! graph-attention site embeddings. A learnable per-channel scaling
//! (exp(zeta)) and a squeeze-style channel gate then reweight the blocks
//! before the gated residual stack consumes them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, ParamSpec, Tape, Tensor, Var};
use crate::data::{MonitoringGraph, ObservationTable, PreprocessStats, SampleMatrix, StationSet};
use crate::error::{Error, Result};

/// One harmonic family: a base period in time-index units and how many
/// integer harmonics of it to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonalPeriod {
    pub period: u32,
    pub harmonics: u32,
}

impl SeasonalPeriod {
    pub fn new(period: u32, harmonics: u32) -> Self {
        Self { period, harmonics }
    }

    fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::Config(format!("seasonal period {} < 2", self.period)));
        }
        if self.harmonics == 0 || self.harmonics > self.period / 2 {
            return Err(Error::Config(format!(
                "harmonic order {} outside 1..={} for period {}",
                self.harmonics,
                self.period / 2,
                self.period
            )));
        }
        Ok(())
    }
}

/// Graph-attention dimensions: single layer, multi-head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub out_dim: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            head_dim: 8,
            out_dim: 8,
        }
    }
}

/// Full encoder configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Base periods; hourly default covers daily and weekly cycles.
    pub periods: Vec<SeasonalPeriod>,
    /// Dyadic frequency count per coordinate axis (2^0 .. 2^(k-1)).
    pub fourier_k: u32,
    pub gat: GatConfig,
    /// Bottleneck divisor for the channel gate's hidden width.
    pub ca_reduction: usize,
    /// Use training-set pooled statistics instead of per-batch pooling at
    /// prediction time.
    pub freeze_channel_stats: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            periods: vec![SeasonalPeriod::new(24, 4), SeasonalPeriod::new(168, 3)],
            fourier_k: 6,
            gat: GatConfig::default(),
            ca_reduction: 8,
            freeze_channel_stats: false,
        }
    }
}

/// Steps in one year of hourly data.
const ANNUAL_PERIOD: u32 = 8760;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() {
            return Err(Error::Config("at least one seasonal period required".into()));
        }
        for p in &self.periods {
            p.validate()?;
        }
        if self.fourier_k == 0 {
            return Err(Error::Config("fourier_k must be >= 1".into()));
        }
        if self.gat.heads == 0 || self.gat.head_dim == 0 || self.gat.out_dim == 0 {
            return Err(Error::Config("graph-attention dims must be positive".into()));
        }
        if self.ca_reduction == 0 {
            return Err(Error::Config("ca_reduction must be positive".into()));
        }
        Ok(())
    }

    /// Add the annual harmonic family when the training span covers a year.
    pub fn with_annual_if_spanned(mut self, span_steps: i64) -> Self {
        let already = self.periods.iter().any(|p| p.period == ANNUAL_PERIOD);
        if !already && span_steps >= ANNUAL_PERIOD as i64 {
            self.periods.push(SeasonalPeriod::new(ANNUAL_PERIOD, 2));
        }
        self
    }

    pub fn seasonal_width(&self) -> usize {
        self.periods.iter().map(|p| 2 * p.harmonics as usize).sum()
    }

    pub fn spatial_width(&self) -> usize {
        4 * self.fourier_k as usize
    }
}

/// Named channel ranges of the concatenated feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub prepro: std::ops::Range<usize>,
    pub ts: std::ops::Range<usize>,
    pub ss: std::ops::Range<usize>,
    pub seasonality: std::ops::Range<usize>,
    pub spatial: std::ops::Range<usize>,
    pub gat: std::ops::Range<usize>,
}

impl FeatureLayout {
    pub fn new(d_prepro: usize, cfg: &EncoderConfig) -> Self {
        let mut at = 0usize;
        let mut next = |w: usize| {
            let r = at..at + w;
            at += w;
            r
        };
        Self {
            prepro: next(d_prepro),
            ts: next(2),
            ss: next(1),
            seasonality: next(cfg.seasonal_width()),
            spatial: next(cfg.spatial_width()),
            gat: next(cfg.gat.out_dim),
        }
    }

    /// Total channel count M.
    pub fn channels(&self) -> usize {
        self.gat.end
    }

    /// Channel count excluding the trailing graph-attention block.
    pub fn fixed_channels(&self) -> usize {
        self.spatial.end
    }
}

/// Time-space interaction channels: (t*lat, t*lon).
pub fn interactions_ts(t_norm: f64, lat: f64, lon: f64) -> [f64; 2] {
    [t_norm * lat, t_norm * lon]
}

/// Space-space interaction channel: lat*lon.
pub fn interactions_ss(lat: f64, lon: f64) -> f64 {
    lat * lon
}

/// Harmonic seasonal channels for one time index: per period and harmonic
/// order h, the pair [cos(2 pi h t / p), sin(2 pi h t / p)].
///
/// The angle is reduced modulo the period in integer arithmetic first, so
/// t and t + p produce bitwise-identical channels.
pub fn seasonal_features(t_raw: i64, periods: &[SeasonalPeriod]) -> Vec<f64> {
    let mut out = Vec::with_capacity(periods.iter().map(|p| 2 * p.harmonics as usize).sum());
    for p in periods {
        let period = p.period as i64;
        let t_mod = t_raw.rem_euclid(period);
        for h in 1..=p.harmonics as i64 {
            let k = (h * t_mod).rem_euclid(period);
            let angle = 2.0 * std::f64::consts::PI * k as f64 / period as f64;
            out.push(angle.cos());
            out.push(angle.sin());
        }
    }
    out
}

/// Dyadic Fourier channels for one normalized unit-interval coordinate:
/// per k in 0..K, the pair `[cos(2 pi 2^k s), sin(2 pi 2^k s)]`.
pub fn spatial_fourier(s01: f64, k_per_axis: u32) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s01) {
        return Err(Error::Domain(format!(
            "normalized coordinate {s01} outside [0,1]; normalization bug upstream"
        )));
    }
    let mut out = Vec::with_capacity(2 * k_per_axis as usize);
    for k in 0..k_per_axis {
        let freq = (1u64 << k) as f64;
        let angle = 2.0 * std::f64::consts::PI * freq * s01;
        out.push(angle.cos());
        out.push(angle.sin());
    }
    Ok(out)
}

/// Robust site descriptor: mean and 25th/75th percentiles of the station's
/// observed training targets. Quantiles use the linear-interpolation rule.
/// Returns None when the station has no observations.
pub fn node_descriptor(values: &[f64]) -> Option<[f64; 3]> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite targets"));
    Some([mean, quantile_linear(&sorted, 0.25), quantile_linear(&sorted, 0.75)])
}

fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Everything the graph-attention block needs, fixed for one training run:
/// node descriptors, the adjacency, and the attention mask. Rows past
/// `train_nodes` are query-only nodes that attend to training stations but
/// are never attended to.
#[derive(Debug, Clone)]
pub struct EncoderContext {
    pub cfg: EncoderConfig,
    pub layout: FeatureLayout,
    pub descriptors: Tensor,
    pub adjacency: Tensor,
    pub mask: Arc<Vec<bool>>,
    /// Nodes with an empty neighborhood; they fall back to their own
    /// projected descriptor.
    pub isolated: Vec<usize>,
    /// Stations that had no observations and use the global descriptor.
    pub fallback_stations: Vec<usize>,
    pub global_descriptor: [f64; 3],
    pub train_nodes: usize,
}

impl EncoderContext {
    /// Rebuild a context from stored parts (model bundles); the attention
    /// mask and isolated-node list are derived from the adjacency.
    pub fn from_parts(
        cfg: EncoderConfig,
        d_prepro: usize,
        descriptors: Tensor,
        adjacency: Tensor,
        fallback_stations: Vec<usize>,
        global_descriptor: [f64; 3],
        train_nodes: usize,
    ) -> Self {
        let layout = FeatureLayout::new(d_prepro, &cfg);
        Self::assemble(
            cfg,
            layout,
            descriptors,
            adjacency,
            fallback_stations,
            global_descriptor,
            train_nodes,
        )
    }

    fn assemble(
        cfg: EncoderConfig,
        layout: FeatureLayout,
        descriptors: Tensor,
        adjacency: Tensor,
        fallback_stations: Vec<usize>,
        global_descriptor: [f64; 3],
        train_nodes: usize,
    ) -> Self {
        let n = adjacency.rows();
        let mut mask = vec![false; n * n];
        let mut isolated = Vec::new();
        for i in 0..n {
            let mut any = false;
            for j in 0..train_nodes {
                if i != j && adjacency.get(i, j) > 0.0 {
                    mask[i * n + j] = true;
                    any = true;
                }
            }
            if !any {
                isolated.push(i);
            }
        }
        Self {
            cfg,
            layout,
            descriptors,
            adjacency,
            mask: Arc::new(mask),
            isolated,
            fallback_stations,
            global_descriptor,
            train_nodes,
        }
    }

    /// Build the training context from the (masked) training table.
    /// Descriptors are computed on z-scored targets.
    pub fn build(
        cfg: EncoderConfig,
        graph: &MonitoringGraph,
        train: &ObservationTable,
        stats: &PreprocessStats,
        d_prepro: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = train.stations().len();
        if graph.station_count() != n {
            return Err(Error::Dimension(format!(
                "graph has {} nodes, table has {n} stations",
                graph.station_count()
            )));
        }

        let mut per_station: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut all = Vec::new();
        for r in train.records() {
            if let Some(y) = r.target {
                let z = stats.normalize_target(y);
                per_station[r.station].push(z);
                all.push(z);
            }
        }
        let global = node_descriptor(&all)
            .ok_or_else(|| Error::Contract("no observed targets for descriptors".into()))?;

        let mut rows = Vec::with_capacity(n);
        let mut fallback = Vec::new();
        for (s, values) in per_station.iter().enumerate() {
            match node_descriptor(values) {
                Some(d) => rows.push(d.to_vec()),
                None => {
                    fallback.push(s);
                    rows.push(global.to_vec());
                }
            }
        }
        let descriptors = Tensor::from_rows(&rows)?;
        let layout = FeatureLayout::new(d_prepro, &cfg);
        Ok(Self::assemble(
            cfg,
            layout,
            descriptors,
            graph.adjacency.clone(),
            fallback,
            global,
            n,
        ))
    }

    /// Extend the context with query-only nodes at arbitrary coordinates.
    /// Query nodes carry the global descriptor and attend to training
    /// stations through the same Gaussian kernel; training-station
    /// embeddings are unchanged by construction.
    pub fn extend_with_queries(
        &self,
        stations: &StationSet,
        query_coords: &[(f64, f64)],
        metric: crate::data::DistanceMetric,
        sigma_d: f64,
    ) -> Result<Self> {
        if query_coords.is_empty() {
            return Ok(self.clone());
        }
        let n = self.train_nodes;
        let total = n + query_coords.len();
        let mut adjacency = Tensor::zeros(total, total);
        for i in 0..n {
            for j in 0..n {
                adjacency.set(i, j, self.adjacency.get(i, j));
            }
        }
        for (q, &(lat, lon)) in query_coords.iter().enumerate() {
            let qs = crate::data::Station {
                id: format!("query{q}"),
                lat,
                lon,
            };
            for j in 0..n {
                let d = metric.distance(&qs, stations.get(j));
                let w = (-(d * d) / (sigma_d * sigma_d)).exp();
                adjacency.set(n + q, j, w);
            }
        }

        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|i| self.descriptors.row_slice(i).to_vec())
            .collect();
        for _ in query_coords {
            rows.push(self.global_descriptor.to_vec());
        }
        let descriptors = Tensor::from_rows(&rows)?;

        Ok(Self::assemble(
            self.cfg.clone(),
            self.layout.clone(),
            descriptors,
            adjacency,
            self.fallback_stations.clone(),
            self.global_descriptor,
            n,
        ))
    }
}

/// Trainable-parameter shapes for the encoder.
pub fn param_specs(cfg: &EncoderConfig, layout: &FeatureLayout) -> Vec<ParamSpec> {
    let m = layout.channels();
    let hidden = gate_hidden_width(m, cfg.ca_reduction);
    let mut specs = vec![ParamSpec::zero("enc/zeta", 1, m)];
    for o in 0..cfg.gat.heads {
        specs.push(ParamSpec::uniform(format!("enc/gat/h{o}/w"), 3, cfg.gat.head_dim));
        specs.push(ParamSpec::uniform(format!("enc/gat/h{o}/a_src"), cfg.gat.head_dim, 1));
        specs.push(ParamSpec::uniform(format!("enc/gat/h{o}/a_dst"), cfg.gat.head_dim, 1));
    }
    specs.push(ParamSpec::uniform(
        "enc/gat/w_out",
        cfg.gat.heads * cfg.gat.head_dim,
        cfg.gat.out_dim,
    ));
    specs.push(ParamSpec::uniform("enc/ca/w1", m, hidden));
    specs.push(ParamSpec::zero("enc/ca/b1", 1, hidden));
    specs.push(ParamSpec::uniform("enc/ca/w2", hidden, m));
    specs.push(ParamSpec::zero("enc/ca/b2", 1, m));
    specs
}

/// Hidden width of a channel gate: reduction bottleneck with a floor.
pub fn gate_hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(4)
}

/// Fixed (parameter-free) feature blocks of a sample batch, in channel
/// order: prepro, ts, ss, seasonality, spatial.
pub fn fixed_blocks(samples: &SampleMatrix, cfg: &EncoderConfig) -> Result<Tensor> {
    let layout = FeatureLayout::new(samples.d_prepro, cfg);
    let width = layout.fixed_channels();
    let b = samples.len();
    let mut data = Vec::with_capacity(b * width);
    for i in 0..b {
        let row = samples.features.row_slice(i);
        let (t_norm, lat, lon) = (row[0], row[1], row[2]);
        data.extend_from_slice(row);
        data.extend_from_slice(&interactions_ts(t_norm, lat, lon));
        data.push(interactions_ss(lat, lon));
        data.extend(seasonal_features(samples.t_raw[i], &cfg.periods));
        let (lat01, lon01) = samples.coords01[i];
        data.extend(spatial_fourier(lat01, cfg.fourier_k)?);
        data.extend(spatial_fourier(lon01, cfg.fourier_k)?);
    }
    Tensor::new(b, width, data)
}

/// Where pooled channel statistics come from at each gate site.
pub enum Pooling {
    /// Pool over the current batch (the training behavior).
    Batch,
    /// Pool over the batch and record the pooled vectors.
    Capture(GateStats),
    /// Reuse recorded training statistics (optional inference behavior).
    Frozen(GateStats),
}

/// Pooled channel means captured at every gate site, in forward order:
/// the encoder gate first, then one entry per stack layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub sites: Vec<Vec<f64>>,
}

impl Pooling {
    /// Resolve the pooled row for the gate site `index` over input `x`.
    pub(crate) fn pooled(&mut self, tape: &mut Tape, index: usize, x: Var) -> Result<Var> {
        match self {
            Pooling::Batch => Ok(tape.mean_rows(x)),
            Pooling::Capture(stats) => {
                let z = tape.mean_rows(x);
                if stats.sites.len() != index {
                    return Err(Error::Contract(format!(
                        "gate sites captured out of order: expected {}, got {index}",
                        stats.sites.len()
                    )));
                }
                stats.sites.push(tape.value(z).data().to_vec());
                Ok(z)
            }
            Pooling::Frozen(stats) => {
                let row = stats.sites.get(index).ok_or_else(|| {
                    Error::Contract(format!("no frozen statistics for gate site {index}"))
                })?;
                Ok(tape.constant(Tensor::row(row.clone())))
            }
        }
    }
}

/// Single-layer multi-head graph attention over the context's nodes.
///
/// Per head: scores from a shared attention kernel pass through LeakyReLU,
/// are damped by the Gaussian adjacency, and normalize via softmax over each
/// node's neighborhood. Head outputs concatenate and project to `out_dim`.
/// Nodes with an empty neighborhood use their own projected descriptor.
pub fn gat_forward(tape: &mut Tape, bound: &Bound, ctx: &EncoderContext) -> Result<Var> {
    let n = ctx.descriptors.rows();
    let h0 = tape.constant(ctx.descriptors.clone());
    let adj = tape.constant(ctx.adjacency.clone());

    let self_selector = if ctx.isolated.is_empty() {
        None
    } else {
        let mut d = Tensor::zeros(n, n);
        for &i in &ctx.isolated {
            d.set(i, i, 1.0);
        }
        Some(tape.constant(d))
    };

    let mut heads = Vec::with_capacity(ctx.cfg.gat.heads);
    for o in 0..ctx.cfg.gat.heads {
        let w = bound.var(&format!("enc/gat/h{o}/w"));
        let a_src = bound.var(&format!("enc/gat/h{o}/a_src"));
        let a_dst = bound.var(&format!("enc/gat/h{o}/a_dst"));
        let p = tape.matmul(h0, w)?;
        let u = tape.matmul(p, a_src)?;
        let v = tape.matmul(p, a_dst)?;
        let raw = tape.outer_sum(u, v)?;
        let scores = tape.act(raw, Activation::LeakyRelu);
        let damped = tape.mul(scores, adj)?;
        let attention = tape.softmax_rows_masked(damped, ctx.mask.clone())?;
        let mixing = match self_selector {
            Some(sel) => tape.add(attention, sel)?,
            None => attention,
        };
        let aggregated = tape.matmul(mixing, p)?;
        heads.push(tape.act(aggregated, Activation::Elu));
    }
    let stacked = tape.concat_cols(&heads)?;
    tape.matmul(stacked, bound.var("enc/gat/w_out"))
}

/// Full encoder forward: returns the reweighted channel matrix (B x M).
///
/// `fixed` is the constant block matrix from [`fixed_blocks`]; `stations`
/// maps each batch row to a context node for the graph-attention gather.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    ctx: &EncoderContext,
    fixed: Var,
    stations: &[usize],
    pooling: &mut Pooling,
) -> Result<Var> {
    let expected = ctx.layout.fixed_channels();
    if tape.value(fixed).cols() != expected {
        return Err(Error::Dimension(format!(
            "fixed block width {} does not match layout {expected}",
            tape.value(fixed).cols()
        )));
    }
    let gat_nodes = gat_forward(tape, bound, ctx)?;
    let gat_rows = tape.gather_rows(gat_nodes, Arc::new(stations.to_vec()))?;
    let full = tape.concat_cols(&[fixed, gat_rows])?;

    let zeta = bound.var("enc/zeta");
    let scale_row = tape.exp(zeta);
    let scaled = tape.mul_row(full, scale_row)?;

    let z = pooling.pooled(tape, 0, scaled)?;
    let h = tape.affine(z, bound.var("enc/ca/w1"), bound.var("enc/ca/b1"))?;
    let h = tape.act(h, Activation::Relu);
    let gate_pre = tape.affine(h, bound.var("enc/ca/w2"), bound.var("enc/ca/b2"))?;
    let gate = tape.act(gate_pre, Activation::Sigmoid);
    tape.mul_row(scaled, gate)
}
