use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cost::{cost_estimate, CostModel};
use super::ReportRow;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::synth::{generate, LabeledExample, SyntheticTaskSpec, TaskKind};
use crate::train::{evaluate, train, EvalReport, Model, TrainConfig};

/// Per-variant changes to the shared training protocol.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
}

/// A declarative sweep: one dataset pair per seed, shared by every
/// (variant, M) cell of that seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub task: TaskKind,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_tokens")]
    pub tokens: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_cue")]
    pub cue_magnitude: f64,
    #[serde(default = "d_noise")]
    pub noise_scale: f64,
    #[serde(default = "d_train")]
    pub train_samples: usize,
    #[serde(default = "d_test")]
    pub test_samples: usize,
    pub variants: Vec<String>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "desk_protocol")]
    pub train: TrainConfig,
    /// Keyed by variant label (`grouped_ttm_nots`) or base tag (`grouped_ttm`);
    /// the label wins.
    #[serde(default = "desk_overrides")]
    pub overrides: BTreeMap<String, TrainOverride>,
    #[serde(default = "d_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub cost: CostModel,
    /// Fill the wall-clock columns; off gives byte-identical reports.
    #[serde(default = "d_true")]
    pub timing: bool,
}

fn d_frames() -> usize {
    8
}
fn d_tokens() -> usize {
    16
}
fn d_dim() -> usize {
    64
}
fn d_cue() -> f64 {
    1.0
}
fn d_noise() -> f64 {
    0.1
}
fn d_train() -> usize {
    2000
}
fn d_test() -> usize {
    500
}
fn d_eval_batch() -> usize {
    100
}
fn d_true() -> bool {
    true
}

/// Fixed-epoch protocol for the poolers at desk scale.
pub fn desk_protocol() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 32,
        learning_rate: 3e-3,
        report_every_epoch: false,
        ..TrainConfig::default()
    }
}

/// The memory encoders train for fewer, much slower epochs and diverge at
/// the pooler learning rate.
pub fn desk_overrides() -> BTreeMap<String, TrainOverride> {
    let ttm = TrainOverride {
        epochs: Some(8),
        learning_rate: Some(1e-3),
        batch_size: None,
    };
    ["vanilla_ttm", "grouped_ttm"]
        .into_iter()
        .map(|t| (t.to_string(), ttm.clone()))
        .collect()
}

impl AblationPlan {
    pub fn desk(task: TaskKind, variants: &[&str], budgets: &[usize], seeds: &[u64]) -> Self {
        Self {
            task,
            frames: d_frames(),
            tokens: d_tokens(),
            dim: d_dim(),
            cue_magnitude: d_cue(),
            noise_scale: d_noise(),
            train_samples: d_train(),
            test_samples: d_test(),
            variants: variants.iter().map(|s| s.to_string()).collect(),
            budgets: budgets.to_vec(),
            seeds: seeds.to_vec(),
            train: desk_protocol(),
            overrides: desk_overrides(),
            eval_batch: d_eval_batch(),
            cost: CostModel::default(),
            timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() || self.budgets.is_empty() {
            return Err(Error::config("ablation needs at least one variant, budget and seed"));
        }
        if self.train_samples == 0 || self.test_samples == 0 || self.eval_batch == 0 {
            return Err(Error::config("train/test sample counts and eval batch must be positive"));
        }
        self.cost.validate()?;
        self.train.validate()?;
        self.dataset(0, 0).validate()
    }

    fn dataset(&self, samples: usize, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task: self.task,
            frames: self.frames,
            tokens: self.tokens,
            dim: self.dim,
            cue_magnitude: self.cue_magnitude,
            noise_scale: self.noise_scale,
            samples,
            seed,
        }
    }

    /// Train and test generators for one sweep seed; disjoint from each
    /// other and from every other seed's.
    pub fn datasets(&self, seed: u64) -> (SyntheticTaskSpec, SyntheticTaskSpec) {
        let base = seed.wrapping_mul(2).wrapping_add(1000);
        (
            self.dataset(self.train_samples, base),
            self.dataset(self.test_samples, base + 1),
        )
    }

    pub fn train_config(&self, label: &str, tag: &str, seed: u64) -> TrainConfig {
        // Only the final training report is used.
        let mut cfg = TrainConfig {
            seed,
            report_every_epoch: false,
            ..self.train.clone()
        };
        if let Some(o) = self.overrides.get(label).or_else(|| self.overrides.get(tag)) {
            cfg.epochs = o.epochs.unwrap_or(cfg.epochs);
            cfg.learning_rate = o.learning_rate.unwrap_or(cfg.learning_rate);
            cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
        }
        cfg
    }

    /// (variant, M, seed) in sweep order.
    pub fn cells(&self) -> Vec<(String, usize, u64)> {
        let mut out = Vec::new();
        for v in &self.variants {
            for &m in &self.budgets {
                for &s in &self.seeds {
                    out.push((v.clone(), m, s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub variant: String,
    pub budget: usize,
    pub seed: u64,
    pub train_seconds: f64,
    pub train_report: Option<EvalReport>,
    pub test_report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub variant: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub mean_accuracy: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub cells: Vec<CellResult>,
    pub rows: Vec<ReportRow>,
    pub tradeoff: Vec<TradeoffPoint>,
}

impl AblationOutcome {
    /// Mean held-out accuracy of successful cells for `variant` (label).
    pub fn mean_accuracy(&self, variant: &str) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.status == "ok")
            .filter_map(|r| r.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Runs every cell of the plan, up to `jobs` at a time. A failing cell is
/// recorded in its row and the sweep carries on.
pub fn run_ablation(plan: &AblationPlan, jobs: usize) -> Result<AblationOutcome> {
    plan.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))?;
    let seeds = plan.seeds.clone();
    let data: Vec<(Vec<LabeledExample>, Vec<LabeledExample>)> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let (tr, te) = plan.datasets(s);
                Ok((generate(&tr)?, generate(&te)?))
            })
            .collect::<Result<_>>()
    })?;
    let cells = plan.cells();
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(v, m, s)| {
                let idx = plan.seeds.iter().position(|x| x == s).expect("seed from plan");
                run_cell(plan, v, *m, *s, &data[idx].0, &data[idx].1)
            })
            .collect()
    });
    let rows = results.iter().map(|c| row_for(plan, c)).collect::<Vec<_>>();
    let tradeoff = tradeoff_points(&rows);
    Ok(AblationOutcome {
        cells: results,
        rows,
        tradeoff,
    })
}

fn run_cell(
    plan: &AblationPlan,
    tag: &str,
    budget: usize,
    seed: u64,
    train_set: &[LabeledExample],
    test_set: &[LabeledExample],
) -> CellResult {
    let mut cell = CellResult {
        variant: tag.to_string(),
        budget,
        seed,
        train_seconds: 0.0,
        train_report: None,
        test_report: None,
        error: None,
    };
    let attempt = (|| -> Result<()> {
        let cfg = EncoderConfig::for_tag(tag, plan.frames, plan.tokens, plan.dim, budget)?;
        cell.variant = cfg.label();
        cell.budget = cfg.budget;
        let tc = plan.train_config(&cfg.label(), cfg.tag(), seed);
        let classes = plan.dataset(0, 0).classes();
        let mut model = Model::new(cfg, classes, seed)?;
        let started = Instant::now();
        let outcome = train(&mut model, train_set, &tc)?;
        cell.train_seconds = started.elapsed().as_secs_f64();
        cell.train_report = outcome.reports.last().cloned();
        let mut test = evaluate(&model, test_set, plan.eval_batch)?;
        test.split = "test".into();
        cell.test_report = Some(test);
        Ok(())
    })();
    if let Err(e) = attempt {
        cell.error = Some(e.to_string());
    }
    cell
}

fn row_for(plan: &AblationPlan, cell: &CellResult) -> ReportRow {
    let test = cell.test_report.as_ref();
    let timed = |f: &dyn Fn(&EvalReport) -> f64| test.filter(|_| plan.timing).map(f);
    ReportRow {
        variant: cell.variant.clone(),
        m: cell.budget,
        seed: cell.seed,
        split: "test".into(),
        accuracy: test.map(|r| r.accuracy),
        loss: test.map(|r| r.mean_loss),
        encode_ms: timed(&|r| 1e3 * r.wall_seconds / r.samples as f64),
        downstream_cost: cost_estimate(&plan.cost, cell.budget),
        samples_per_sec: timed(&|r| r.samples as f64 / r.wall_seconds),
        status: match &cell.error {
            None => "ok".into(),
            Some(e) => format!("error: {e}"),
        },
    }
}

/// Mean accuracy per (variant, M) over the seeds that succeeded, in first
/// appearance order.
pub fn tradeoff_points(rows: &[ReportRow]) -> Vec<TradeoffPoint> {
    let mut out: Vec<(TradeoffPoint, f64)> = Vec::new();
    for r in rows {
        let Some(acc) = r.accuracy.filter(|_| r.status == "ok") else {
            continue;
        };
        match out.iter_mut().find(|(p, _)| p.variant == r.variant && p.m == r.m) {
            Some((p, sum)) => {
                p.seeds += 1;
                *sum += acc;
            }
            None => out.push((
                TradeoffPoint {
                    variant: r.variant.clone(),
                    m: r.m,
                    mean_accuracy: 0.0,
                    seeds: 1,
                },
                acc,
            )),
        }
    }
    out.into_iter()
        .map(|(mut p, sum)| {
            p.mean_accuracy = sum / p.seeds as f64;
            p
        })
        .collect()
}
