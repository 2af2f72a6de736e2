use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cost::{cost_estimate, CostModel, DownstreamStub};
use super::ReportRow;
use crate::encoders::{Encoder, EncoderConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::synth::LabeledExample;
use crate::train::{evaluate, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub trials: usize,
    /// Videos encoded per trial; one trial's wall-clock covers all of them.
    pub samples_per_trial: usize,
    pub cost: CostModel,
    /// Hidden width of the downstream stand-in.
    pub downstream_width: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            trials: 5,
            samples_per_trial: 8,
            cost: CostModel::default(),
            downstream_width: 256,
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 3 {
            return Err(Error::config(format!("need at least 3 trials, got {}", self.trials)));
        }
        if self.samples_per_trial == 0 || self.downstream_width == 0 {
            return Err(Error::config("samples per trial and downstream width must be positive"));
        }
        self.cost.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub budget: usize,
    /// Medians over trials, per video.
    pub encode_ms: f64,
    pub downstream_ms: f64,
    pub samples_per_sec: f64,
    pub downstream_cost: f64,
    /// Per-video encode and downstream milliseconds of every trial, in order.
    pub trial_encode_ms: Vec<f64>,
    pub trial_downstream_ms: Vec<f64>,
    pub accuracy: Option<f64>,
}

impl BenchRow {
    pub fn first_trial_ms(&self) -> f64 {
        self.trial_encode_ms[0] + self.trial_downstream_ms[0]
    }

    pub fn to_report_row(&self, seed: u64) -> ReportRow {
        ReportRow {
            variant: self.variant.clone(),
            m: self.budget,
            seed,
            split: "bench".into(),
            accuracy: self.accuracy,
            loss: None,
            encode_ms: Some(self.encode_ms),
            downstream_cost: self.downstream_cost,
            samples_per_sec: Some(self.samples_per_sec),
            status: "ok".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub rows: Vec<BenchRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times encode plus the downstream stand-in for every config on the same
/// seeded grids. Rows come back sorted by (variant, M).
pub fn bench_throughput(configs: &[EncoderConfig], opts: &BenchOptions) -> Result<BenchReport> {
    opts.validate()?;
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        rows.push(bench_one(cfg, opts)?);
    }
    rows.sort_by(|a, b| a.variant.cmp(&b.variant).then(a.budget.cmp(&b.budget)));
    Ok(BenchReport {
        options: opts.clone(),
        rows,
    })
}

fn bench_one(cfg: &EncoderConfig, opts: &BenchOptions) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(cfg.clone(), &mut store, &mut rng)?;
    let grids = (0..opts.samples_per_trial)
        .map(|_| TokenGrid::from_fn(cfg.frames, cfg.tokens, cfg.dim, |_| rng.random_range(-1.0..1.0)))
        .collect::<Result<Vec<_>>>()?;
    time_encoder(&encoder, &store, &grids.iter().collect::<Vec<_>>(), opts)
}

/// Times a trained model's encoder on the first grids of `data` (cycled if
/// there are fewer than a trial's worth) and fills in its accuracy on all of
/// `data`.
pub fn bench_model(model: &Model, data: &[LabeledExample], opts: &BenchOptions) -> Result<BenchRow> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::Data("bench_model needs at least one example".into()));
    }
    let grids: Vec<&TokenGrid> = data.iter().cycle().take(opts.samples_per_trial).map(|e| &e.grid).collect();
    let mut row = time_encoder(&model.encoder, &model.store, &grids, opts)?;
    row.accuracy = Some(evaluate(model, data, 100)?.accuracy);
    Ok(row)
}

fn time_encoder(encoder: &Encoder, store: &ParamStore, grids: &[&TokenGrid], opts: &BenchOptions) -> Result<BenchRow> {
    let cfg = encoder.config();
    let stub = DownstreamStub::new(cfg.dim, opts.downstream_width, opts.cost.text_tokens, opts.seed);
    let per_video = grids.len() as f64;
    let mut enc_ms = Vec::with_capacity(opts.trials);
    let mut down_ms = Vec::with_capacity(opts.trials);
    let mut sink = 0.0;
    for _ in 0..opts.trials {
        let mut encode = 0.0;
        let mut downstream = 0.0;
        for grid in grids {
            let t0 = Instant::now();
            let tokens = encoder.encode(store, grid)?;
            let t1 = Instant::now();
            sink += stub.run(tokens.tensor())?;
            encode += (t1 - t0).as_secs_f64();
            downstream += t1.elapsed().as_secs_f64();
        }
        enc_ms.push(1e3 * encode / per_video);
        down_ms.push(1e3 * downstream / per_video);
    }
    std::hint::black_box(sink);
    let totals: Vec<f64> = enc_ms.iter().zip(&down_ms).map(|(a, b)| a + b).collect();
    Ok(BenchRow {
        variant: cfg.label(),
        budget: cfg.budget,
        encode_ms: median(&enc_ms),
        downstream_ms: median(&down_ms),
        samples_per_sec: 1e3 / median(&totals),
        downstream_cost: cost_estimate(&opts.cost, cfg.budget),
        trial_encode_ms: enc_ms,
        trial_downstream_ms: down_ms,
        accuracy: None,
    })
}
