//! Central finite-difference checks of the tape's analytic gradients.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are judged by absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Tensor and flat index where `max_rel_err` occurred.
    pub worst_param: String,
    pub worst_index: usize,
    pub seconds: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn ensure(&self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::GradCheck {
                variant: self.variant.clone(),
                param: self.worst_param.clone(),
                index: self.worst_index,
                rel_err: self.max_rel_err,
            })
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares d`loss`/d(every parameter and every input entry) against central
/// differences. `loss` receives the input as a differentiable leaf and must
/// return a scalar.
pub fn check_gradients<F>(
    variant: &str,
    store: &mut ParamStore,
    input: &Tensor,
    loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let started = Instant::now();
    let (param_grads, input_grad) = {
        let mut g = Graph::with_params(store);
        let x = g.leaf(input.clone());
        let l = loss(&mut g, x)?;
        g.backward(l)?;
        (g.param_grads()?, g.grad(x).expect("input leaf"))
    };
    let eval = |store: &ParamStore, input: &Tensor| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let x = g.leaf(input.clone());
        let l = loss(&mut g, x)?;
        Ok(g.value(l).data()[0])
    };
    let h = opts.step;
    let mut report = GradCheckReport {
        variant: variant.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        seconds: 0.0,
        tolerance: opts.tolerance,
    };
    let mut record = |name: &str, index: usize, analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric, opts.floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = err;
            report.worst_param = name.to_string();
            report.worst_index = index;
        }
    };
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store, input)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store, input)?;
            store.get_mut(id).data_mut()[i] = orig;
            record(&name, i, param_grads[id.index()].data()[i], (plus - minus) / (2.0 * h));
        }
    }
    let mut probe = input.clone();
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(store, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(store, &probe)?;
        probe.data_mut()[i] = orig;
        record("input", i, input_grad.data()[i], (plus - minus) / (2.0 * h));
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Checks one encoder on a random `[1, T, N, D]` grid with the probe loss
/// `sum(output * R)` for a fixed random `R`. Parameters that start at zero
/// are redrawn first.
pub fn gradcheck_encoder(config: &EncoderConfig, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(config.clone(), &mut store, &mut rng)?;
    // Zero-initialized tensors (biases, identity-start residual branches)
    // would zero the gradients upstream of them, so they get random values.
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.data().iter().all(|&v| v == 0.0) {
            p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let (t, n, d, m) = (config.frames, config.tokens, config.dim, config.budget);
    let input = Tensor::from_fn([1, t, n, d], |_| rng.random_range(-1.0..1.0));
    let weights = Tensor::from_fn([1, m, d], |_| rng.random_range(-1.0..1.0));
    check_gradients(
        &config.label(),
        &mut store,
        &input,
        |g, x| {
            let out = encoder.forward(g, x)?;
            let r = g.constant(weights.clone());
            let prod = g.mul(out, r)?;
            Ok(g.sum_all(prod))
        },
        opts,
    )
}

/// The `--all` set: every variant, with and without the frame-index
/// encoding where it is optional, at T=3, N=4, D=8.
pub fn gradcheck_configs() -> Result<Vec<EncoderConfig>> {
    let (t, n, d) = (3, 4, 8);
    [
        ("mean_pool", 4),
        ("sum_pool", 4),
        ("fixed_window_pool", 6),
        ("per_frame_pool", 6),
        ("transformer_last_m", 4),
        ("tokenlearner_pool", 4),
        ("tokenlearner_pool_nots", 4),
        ("perceiver_pool", 4),
        ("perceiver_pool_nots", 4),
        ("vanilla_ttm", 4),
        ("vanilla_ttm_ts", 4),
        ("grouped_ttm", 4),
        ("grouped_ttm_nots", 4),
    ]
    .into_iter()
    .map(|(tag, m)| EncoderConfig::for_tag(tag, t, n, d, m))
    .collect()
}

pub fn gradcheck_suite(configs: &[EncoderConfig], seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    configs.iter().map(|c| gradcheck_encoder(c, seed, opts)).collect()
}
