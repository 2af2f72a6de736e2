use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Key for the dataset-independent cue vectors, so that every seed of a task
/// shares one definition of "cue A", "cue B" and the per-index codes.
const CUE_KEY: u64 = 0x5eed_c0de_7a5c_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Did cue A appear in an earlier frame than cue B?
    TemporalOrder,
    /// Which spatial index carries the cue in every frame?
    SpatialLocate,
    /// Which index carried a cue in the first frame, given that every other
    /// index gets an identical-strength cue in some later frame?
    GroupRecall,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TemporalOrder => "temporal_order",
            TaskKind::SpatialLocate => "spatial_locate",
            TaskKind::GroupRecall => "group_recall",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal_order" => Ok(TaskKind::TemporalOrder),
            "spatial_locate" => Ok(TaskKind::SpatialLocate),
            "group_recall" => Ok(TaskKind::GroupRecall),
            other => Err(Error::Usage(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Euclidean norm of every planted cue.
    pub cue_magnitude: f64,
    /// Standard deviation of the i.i.d. Gaussian background.
    pub noise_scale: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Desk-scale defaults: 8 frames of 16 tokens, 64 channels.
    pub fn desk(task: TaskKind, samples: usize, seed: u64) -> Self {
        Self {
            task,
            frames: 8,
            tokens: 16,
            dim: 64,
            cue_magnitude: 1.0,
            noise_scale: 0.1,
            samples,
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        match self.task {
            TaskKind::TemporalOrder => 2,
            TaskKind::SpatialLocate | TaskKind::GroupRecall => self.tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.task.name())));
        if self.frames == 0 || self.tokens == 0 || self.dim == 0 {
            return bad("frames, tokens and dim must be positive".into());
        }
        if !(self.cue_magnitude.is_finite() && self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad("cue magnitude and noise scale must be finite, noise non-negative".into());
        }
        match self.task {
            TaskKind::TemporalOrder if self.frames < 2 => bad(format!("needs T >= 2, got {}", self.frames)),
            TaskKind::SpatialLocate if self.tokens < 2 => bad(format!("needs N >= 2, got {}", self.tokens)),
            TaskKind::GroupRecall if self.frames < 3 => bad(format!("needs T >= 3, got {}", self.frames)),
            TaskKind::GroupRecall if self.tokens < 2 => bad(format!("needs N >= 2, got {}", self.tokens)),
            _ => Ok(()),
        }
    }

    /// Generator for sample `index`, independent of generation order.
    fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    fn noise_grid(&self, rng: &mut ChaCha8Rng) -> Result<TokenGrid> {
        let sigma = self.noise_scale;
        TokenGrid::from_fn(self.frames, self.tokens, self.dim, |_| {
            sigma * rng.sample::<f64, _>(StandardNormal)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub grid: TokenGrid,
    pub label: usize,
}

/// Fixed cue directions shared by every dataset with the same channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct CueBook {
    pub order_a: Vec<f64>,
    pub order_b: Vec<f64>,
    /// One unit code per spatial index; orthonormal when `tokens <= dim`.
    pub index_codes: Vec<Vec<f64>>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

impl CueBook {
    pub fn new(tokens: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CUE_KEY);
        rng.set_stream(dim as u64);
        let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut order_a = gaussian(&mut rng);
        normalize(&mut order_a);
        // B is made orthogonal to A so the two cues are not confusable.
        let mut order_b = gaussian(&mut rng);
        if dim > 1 {
            let dot: f64 = order_a.iter().zip(&order_b).map(|(a, b)| a * b).sum();
            order_b.iter_mut().zip(&order_a).for_each(|(b, a)| *b -= dot * a);
        }
        normalize(&mut order_b);
        let mut index_codes: Vec<Vec<f64>> = Vec::with_capacity(tokens);
        for j in 0..tokens {
            let mut v = gaussian(&mut rng);
            if j < dim {
                for prev in &index_codes {
                    let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
                }
            }
            normalize(&mut v);
            index_codes.push(v);
        }
        Self {
            order_a,
            order_b,
            index_codes,
        }
    }
}

fn plant(grid: &mut TokenGrid, t: usize, j: usize, cue: &[f64], magnitude: f64) {
    for (v, c) in grid.token_mut(t, j).iter_mut().zip(cue) {
        *v += magnitude * c;
    }
}

/// One temporal-order example plus the frames `(t_a, t_b)` holding cues A and B.
///
/// Both cues share one random spatial index. Exchanging frames `t_a` and
/// `t_b` of the grid yields the opposite-label example with the same frame
/// multiset.
pub fn temporal_order_example(spec: &SyntheticTaskSpec, cues: &CueBook, index: usize) -> Result<(LabeledExample, [usize; 2])> {
    let mut rng = spec.sample_rng(index);
    let mut grid = spec.noise_grid(&mut rng)?;
    let j = rng.random_range(0..spec.tokens);
    let early = rng.random_range(0..spec.frames - 1);
    let late = rng.random_range(early + 1..spec.frames);
    let label = index % 2;
    let (t_a, t_b) = if label == 1 { (early, late) } else { (late, early) };
    plant(&mut grid, t_a, j, &cues.order_a, spec.cue_magnitude);
    plant(&mut grid, t_b, j, &cues.order_b, spec.cue_magnitude);
    Ok((LabeledExample { grid, label }, [t_a, t_b]))
}

/// Label 1 iff cue A precedes cue B.
pub fn gen_temporal_order(spec: &SyntheticTaskSpec) -> Result<Vec<LabeledExample>> {
    if spec.task != TaskKind::TemporalOrder {
        return Err(Error::config("gen_temporal_order called with another task"));
    }
    spec.validate()?;
    let cues = CueBook::new(spec.tokens, spec.dim);
    (0..spec.samples)
        .map(|i| temporal_order_example(spec, &cues, i).map(|(ex, _)| ex))
        .collect()
}

/// Label j: index j carries its code in every frame.
pub fn gen_spatial_locate(spec: &SyntheticTaskSpec) -> Result<Vec<LabeledExample>> {
    if spec.task != TaskKind::SpatialLocate {
        return Err(Error::config("gen_spatial_locate called with another task"));
    }
    spec.validate()?;
    let cues = CueBook::new(spec.tokens, spec.dim);
    (0..spec.samples)
        .map(|i| {
            let mut rng = spec.sample_rng(i);
            let mut grid = spec.noise_grid(&mut rng)?;
            let j = i % spec.tokens;
            for t in 0..spec.frames {
                plant(&mut grid, t, j, &cues.index_codes[j], spec.cue_magnitude);
            }
            Ok(LabeledExample { grid, label: j })
        })
        .collect()
}

/// Expected norm of a distractor token, relative to the cue magnitude.
pub const DISTRACTOR_GAIN: f64 = 3.0;

/// Index j gets its code in frame 0. From frame 1 on, every other index
/// carries heavy Gaussian distractors of expected norm
/// `DISTRACTOR_GAIN * cue_magnitude`; index j only has background noise.
pub fn group_recall_example(spec: &SyntheticTaskSpec, cues: &CueBook, index: usize, with_cue: bool) -> Result<LabeledExample> {
    let mut rng = spec.sample_rng(index);
    let mut grid = spec.noise_grid(&mut rng)?;
    let j = index % spec.tokens;
    if with_cue {
        plant(&mut grid, 0, j, &cues.index_codes[j], spec.cue_magnitude);
    }
    let sigma = DISTRACTOR_GAIN * spec.cue_magnitude / (spec.dim as f64).sqrt();
    for t in 1..spec.frames {
        for k in (0..spec.tokens).filter(|&k| k != j) {
            for v in grid.token_mut(t, k) {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(LabeledExample { grid, label: j })
}

pub fn gen_group_recall(spec: &SyntheticTaskSpec) -> Result<Vec<LabeledExample>> {
    if spec.task != TaskKind::GroupRecall {
        return Err(Error::config("gen_group_recall called with another task"));
    }
    spec.validate()?;
    let cues = CueBook::new(spec.tokens, spec.dim);
    (0..spec.samples)
        .map(|i| group_recall_example(spec, &cues, i, true))
        .collect()
}

/// Dispatches on `spec.task`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Vec<LabeledExample>> {
    match spec.task {
        TaskKind::TemporalOrder => gen_temporal_order(spec),
        TaskKind::SpatialLocate => gen_spatial_locate(spec),
        TaskKind::GroupRecall => gen_group_recall(spec),
    }
}

/// Grid of all zeros with the given label; useful for chance-level checks.
pub fn blank_example(frames: usize, tokens: usize, dim: usize, label: usize) -> Result<LabeledExample> {
    Ok(LabeledExample {
        grid: TokenGrid::new(Tensor::zeros([frames, tokens, dim]))?,
        label,
    })
}
