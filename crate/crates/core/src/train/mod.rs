//! Classifier head, optimizers and the training / evaluation loops.

mod gradcheck;
mod optim;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{stack_grids, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, LinearParams, ParamStore, Tensor, Var};
use crate::synth::LabeledExample;

pub use gradcheck::{
    check_gradients, gradcheck_configs, gradcheck_encoder, gradcheck_suite, GradCheckOptions, GradCheckReport,
};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};

/// One linear layer `M·D -> K` over the concatenated video tokens, so every
/// token keeps its own weights the way a downstream model would see them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Readout {
    pub linear: LinearParams,
    pub tokens: usize,
    pub classes: usize,
}

impl Readout {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        tokens: usize,
        dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("readout needs at least 2 classes, got {classes}")));
        }
        let linear = LinearParams::new(store, rng, "readout", tokens * dim, classes)?;
        // A small head keeps the initial loss near ln K. A zero head gives
        // the encoder no gradient signal at first, and Adam blows that noise
        // up into full-size random steps, which can collapse the encoder
        // before the head has learned anything.
        store
            .get_mut(linear.weight)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= 0.1);
        Ok(Self {
            linear,
            tokens,
            classes,
        })
    }

    /// `[B, M, D] -> [B, K]` logits.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var> {
        let (b, m, d) = match *g.shape(tokens) {
            [b, m, d] if m == self.tokens && m * d == self.linear.in_dim => (b, m, d),
            ref s => {
                return Err(Error::Dim {
                    op: "readout",
                    lhs: s.to_vec(),
                    rhs: vec![self.tokens, self.linear.in_dim / self.tokens],
                })
            }
        };
        let flat = g.reshape(tokens, &[b, m * d])?;
        self.linear.forward(g, flat)
    }
}

/// Encoder plus readout, sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub readout: Readout,
    pub store: ParamStore,
    pub init_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    encoder: EncoderConfig,
    classes: usize,
    init_seed: u64,
    params: ParamStore,
}

impl Model {
    /// Encoder parameters are drawn first, then the readout, from one
    /// generator seeded with `seed`.
    pub fn new(config: EncoderConfig, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config, &mut store, &mut rng)?;
        let readout = Readout::new(
            &mut store,
            &mut rng,
            encoder.config().budget,
            encoder.config().dim,
            classes,
        )?;
        Ok(Self {
            encoder,
            readout,
            store,
            init_seed: seed,
        })
    }

    pub fn classes(&self) -> usize {
        self.readout.classes
    }

    pub fn logits(&self, g: &mut Graph<'_>, grids: Var) -> Result<Var> {
        let tokens = self.encoder.forward(g, grids)?;
        self.readout.forward(g, tokens)
    }

    /// Logits `[B, K]` without recording gradients.
    pub fn predict_logits(&self, batch: &[&LabeledExample]) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(stack_grids(batch.iter().map(|e| &e.grid))?);
        let logits = self.logits(&mut g, x)?;
        Ok(g.value(logits).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            encoder: self.encoder.config().clone(),
            classes: self.classes(),
            init_seed: self.init_seed,
            params: self.store.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut model = Model::new(file.encoder, file.classes, file.init_seed)?;
        if model.store.len() != file.params.len() {
            return Err(Error::Data(format!(
                "{}: expected {} parameter tensors, found {}",
                path.display(),
                model.store.len(),
                file.params.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let saved = file.params.get(id);
            let fresh = model.store.get(id);
            if file.params.name(id) != model.store.name(id)
                || saved.shape() != fresh.shape()
                || saved.data().len() != fresh.numel()
            {
                return Err(Error::Data(format!(
                    "{}: parameter `{}` does not match the encoder layout",
                    path.display(),
                    model.store.name(id)
                )));
            }
        }
        model.store = file.params;
        Ok(model)
    }
}

/// Mean negative log-softmax of the true class over a `[B, K]` logit batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Missing fields in a serialized config take their `Default` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Seeds batch shuffling.
    pub seed: u64,
    /// Global L2 norm limit on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Evaluate the training set after every epoch rather than only the last.
    pub report_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            clip_norm: Some(1.0),
            report_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!("learning rate {} is not usable", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub budget: usize,
    pub split: String,
    pub epoch: Option<usize>,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_count: Vec<usize>,
    pub wall_seconds: f64,
    pub params_fingerprint: u64,
    pub config: EncoderConfig,
}

impl EvalReport {
    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Data(format!("bad report line: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub reports: Vec<EvalReport>,
    /// Loss of every minibatch, computed before that batch's update.
    pub batch_losses: Vec<f64>,
}

fn check_labels(model: &Model, data: &[LabeledExample]) -> Result<()> {
    if let Some(bad) = data.iter().find(|e| e.label >= model.classes()) {
        return Err(Error::Data(format!(
            "label {} out of range for {} classes",
            bad.label,
            model.classes()
        )));
    }
    Ok(())
}

/// Minibatch training. Shuffling is driven by `cfg.seed`, so (initial
/// parameters, data, config) determine the result bit for bit.
pub fn train(model: &mut Model, data: &[LabeledExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_labels(model, data)?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), cfg.learning_rate, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::new();
    let mut batch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledExample> = idx.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let mut grads = {
                let mut g = Graph::with_params(&model.store);
                let x = g.constant(stack_grids(batch.iter().map(|e| &e.grid))?);
                let logits = model.logits(&mut g, x)?;
                if !g.value(logits).is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        loss: f64::NAN,
                    });
                }
                let loss = g.cross_entropy(logits, &labels)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        loss: value,
                    });
                }
                batch_losses.push(value);
                g.backward(loss)?;
                g.param_grads()?
            };
            if let Some(limit) = cfg.clip_norm {
                clip_grad_norm(&mut grads, limit);
            }
            optimizer.step(&mut model.store, &grads)?;
        }
        if cfg.report_every_epoch || epoch + 1 == cfg.epochs {
            let mut report = evaluate(model, data, cfg.batch_size)?;
            report.split = "train".into();
            report.epoch = Some(epoch + 1);
            report.wall_seconds += started.elapsed().as_secs_f64();
            reports.push(report);
        }
    }
    Ok(TrainOutcome { reports, batch_losses })
}

/// Accuracy and mean loss of `model` on `data`. Takes the model by shared
/// reference, so parameters cannot change.
pub fn evaluate(model: &Model, data: &[LabeledExample], batch_size: usize) -> Result<EvalReport> {
    let started = Instant::now();
    check_labels(model, data)?;
    let k = model.classes();
    let mut correct = vec![0usize; k];
    let mut count = vec![0usize; k];
    let mut loss_sum = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&LabeledExample> = chunk.iter().collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let logits = model.predict_logits(&batch)?;
        loss_sum += cross_entropy(&logits, &labels)? * chunk.len() as f64;
        for (row, &y) in logits.data().chunks(k).zip(&labels) {
            count[y] += 1;
            if argmax(row) == y {
                correct[y] += 1;
            }
        }
    }
    let samples = data.len();
    let total_correct: usize = correct.iter().sum();
    let config = model.encoder.config().clone();
    Ok(EvalReport {
        variant: config.label(),
        budget: config.budget,
        split: "eval".into(),
        epoch: None,
        samples,
        accuracy: if samples == 0 { 0.0 } else { total_correct as f64 / samples as f64 },
        mean_loss: if samples == 0 { 0.0 } else { loss_sum / samples as f64 },
        per_class_accuracy: correct
            .iter()
            .zip(&count)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        per_class_count: count,
        wall_seconds: started.elapsed().as_secs_f64(),
        params_fingerprint: model.store.fingerprint(),
        config,
    })
}
