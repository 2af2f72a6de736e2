//! Temporal encoders mapping N·T per-frame tokens to M video tokens.

mod attention;
mod config;
mod pooling;

pub use attention::{per_frame_pool, perceiver_pool, tokenlearner_pool, PerceiverQueries, TokenLearner};
pub use config::{EncoderConfig, TtmSettings, Variant, VARIANT_TAGS};
pub use pooling::{fixed_window_pool, pool_temporal, PoolMode};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, TimestampEncoding, TransformerStack, Var};
use crate::ttm::{self, TtmParams};

/// Per-frame visual tokens of one video, stored `[T, N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    tokens: Tensor,
}

impl TokenGrid {
    pub fn new(tokens: Tensor) -> Result<Self> {
        match tokens.shape() {
            [t, n, d] if *t > 0 && *n > 0 && *d > 0 => {}
            s => {
                return Err(Error::Data(format!(
                    "token grid must be [T, N, D] with positive extents, got {s:?}"
                )))
            }
        }
        if !tokens.is_finite() {
            return Err(Error::Numeric("token grid"));
        }
        Ok(Self { tokens })
    }

    pub fn from_fn(frames: usize, tokens: usize, dim: usize, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(Tensor::from_fn([frames, tokens, dim], f))
    }

    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tensor(self) -> Tensor {
        self.tokens
    }

    fn frame_len(&self) -> usize {
        self.tokens_per_frame() * self.dim()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.frame_len();
        &self.tokens.data()[t * w..(t + 1) * w]
    }

    pub fn token(&self, t: usize, j: usize) -> &[f64] {
        let d = self.dim();
        &self.frame(t)[j * d..(j + 1) * d]
    }

    pub fn token_mut(&mut self, t: usize, j: usize) -> &mut [f64] {
        let (d, w) = (self.dim(), self.frame_len());
        let start = t * w + j * d;
        &mut self.tokens.data_mut()[start..start + d]
    }

    /// Frame `t` as an `[N, D]` tensor.
    pub fn frame_tensor(&self, t: usize) -> Tensor {
        Tensor::new([self.tokens_per_frame(), self.dim()], self.frame(t).to_vec()).expect("frame shape")
    }

    /// Reorders frames: output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let t = self.frames();
        let mut seen = vec![false; t];
        if order.len() != t || order.iter().any(|&i| i >= t || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Data(format!("{order:?} is not a permutation of {t} frames")));
        }
        let mut data = Vec::with_capacity(self.tokens.numel());
        for &i in order {
            data.extend_from_slice(self.frame(i));
        }
        Self::new(Tensor::new(self.tokens.shape().to_vec(), data)?)
    }

    pub fn swap_frames(&self, a: usize, b: usize) -> Result<Self> {
        let mut order: Vec<usize> = (0..self.frames()).collect();
        order.swap(a, b);
        self.permute_frames(&order)
    }

    /// `[1, T, N, D]` copy for batched encoders.
    pub fn batch_of_one(&self) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.tokens.shape());
        self.tokens.clone().reshape(shape)
    }
}

/// Stacks equally-shaped grids into a `[B, T, N, D]` batch.
pub fn stack_grids<'a>(grids: impl IntoIterator<Item = &'a TokenGrid>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut count = 0;
    for grid in grids {
        match &shape {
            None => shape = Some(grid.tensor().shape().to_vec()),
            Some(s) if s.as_slice() != grid.tensor().shape() => {
                return Err(Error::Dim {
                    op: "stack_grids",
                    lhs: s.clone(),
                    rhs: grid.tensor().shape().to_vec(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(grid.tensor().data());
        count += 1;
    }
    let mut full = vec![count];
    full.extend(shape.ok_or_else(|| Error::Data("cannot stack zero grids".into()))?);
    Tensor::new(full, data)
}

/// The M×D output of an encoder for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTokens {
    tokens: Tensor,
}

impl VideoTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::Data(format!("video tokens must be [M, D], got {:?}", tokens.shape())));
        }
        Ok(Self { tokens })
    }

    pub fn budget(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

/// Soft-selection weights `[..., M, P]` of an attentional pooler; rows run
/// over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() < 2 {
            return Err(Error::Data(format!("attention map must be [..., M, P], got {:?}", weights.shape())));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.weights
            .rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn row_argmax(&self) -> Vec<usize> {
        self.weights
            .rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// `[B, T, N, D] -> [B, M, D]` by a causal transformer over the frame-major
/// flattened sequence, keeping the last M positions.
pub fn transformer_last_m(
    g: &mut Graph<'_>,
    stack: &TransformerStack,
    positions: &TimestampEncoding,
    grid: Var,
    budget: usize,
) -> Result<Var> {
    let [b, t, n, d] = pooling::dims(g, grid)?;
    let len = t * n;
    if budget > len {
        return Err(Error::config(format!(
            "transformer_last_m: budget {budget} exceeds sequence length {len}"
        )));
    }
    let seq = g.reshape(grid, &[b, len, d])?;
    let pe = positions.broadcast(b, len, 1)?.reshape([b, len, d])?;
    let pe = g.constant(pe);
    let seq = g.add(seq, pe)?;
    let out = stack.forward(g, seq, true)?;
    g.slice(out, 1, len - budget, budget)
}

#[derive(Clone, Debug, PartialEq)]
enum Module {
    Temporal(PoolMode),
    FixedWindow(usize),
    PerFrame(TokenLearner),
    TransformerLastM {
        stack: TransformerStack,
        positions: TimestampEncoding,
    },
    TokenLearner {
        tl: TokenLearner,
        stamp: Option<TimestampEncoding>,
    },
    Perceiver {
        queries: PerceiverQueries,
        stamp: Option<TimestampEncoding>,
    },
    Ttm(TtmParams),
}

/// An encoder built from an [`EncoderConfig`], with its parameters living in
/// a caller-owned [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    module: Module,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (t, n, d, m) = (config.frames, config.tokens, config.dim, config.budget);
        let stamp = |on: bool| on.then(|| TimestampEncoding::new(t, d));
        let module = match &config.variant {
            Variant::MeanPool => Module::Temporal(PoolMode::Mean),
            Variant::SumPool => Module::Temporal(PoolMode::Sum),
            Variant::FixedWindowPool { spatial_out } => Module::FixedWindow(*spatial_out),
            Variant::PerFramePool { per_frame } => {
                Module::PerFrame(TokenLearner::new(store, rng, "per_frame", d, *per_frame)?)
            }
            Variant::TransformerLastM {
                layers,
                heads,
                ffn_hidden,
            } => Module::TransformerLastM {
                stack: TransformerStack::new(store, rng, "temporal_tf", *layers, d, *heads, *ffn_hidden)?,
                positions: TimestampEncoding::new(t * n, d),
            },
            Variant::TokenlearnerPool { timestamp } => Module::TokenLearner {
                tl: TokenLearner::new(store, rng, "tokenlearner", d, m)?,
                stamp: stamp(*timestamp),
            },
            Variant::PerceiverPool { timestamp } => Module::Perceiver {
                queries: PerceiverQueries::new(store, rng, "perceiver", d, m)?,
                stamp: stamp(*timestamp),
            },
            Variant::VanillaTtm(_) | Variant::GroupedTtm(_) => Module::Ttm(TtmParams::new(&config, store, rng)?),
        };
        Ok(Self { config, module })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn ttm(&self) -> Option<&TtmParams> {
        match &self.module {
            Module::Ttm(p) => Some(p),
            _ => None,
        }
    }

    pub fn token_learner(&self) -> Option<&TokenLearner> {
        match &self.module {
            Module::TokenLearner { tl, .. } | Module::PerFrame(tl) => Some(tl),
            _ => None,
        }
    }

    pub fn perceiver(&self) -> Option<&PerceiverQueries> {
        match &self.module {
            Module::Perceiver { queries, .. } => Some(queries),
            _ => None,
        }
    }

    pub fn transformer(&self) -> Option<&TransformerStack> {
        match &self.module {
            Module::TransformerLastM { stack, .. } => Some(stack),
            Module::Ttm(p) => Some(&p.processor),
            _ => None,
        }
    }

    fn check_grid(&self, g: &Graph<'_>, grid: Var) -> Result<[usize; 4]> {
        let dims = pooling::dims(g, grid)?;
        self.check_shape(&dims)?;
        Ok(dims)
    }

    fn check_shape(&self, dims: &[usize]) -> Result<()> {
        let c = &self.config;
        if dims.len() != 4 || dims[1..] != [c.frames, c.tokens, c.dim] {
            return Err(Error::Config(format!(
                "{} expects grids of [T={}, N={}, D={}], got {:?}",
                c.label(),
                c.frames,
                c.tokens,
                c.dim,
                dims.get(1..).unwrap_or(dims)
            )));
        }
        Ok(())
    }

    fn stamped(g: &mut Graph<'_>, stamp: &Option<TimestampEncoding>, grid: Var) -> Result<Var> {
        let Some(enc) = stamp else {
            return Ok(grid);
        };
        let [b, t, n, _] = pooling::dims(g, grid)?;
        let table = g.constant(enc.broadcast(b, t, n)?);
        g.add(grid, table)
    }

    fn flatten(g: &mut Graph<'_>, grid: Var) -> Result<Var> {
        let [b, t, n, d] = pooling::dims(g, grid)?;
        g.reshape(grid, &[b, t * n, d])
    }

    /// Records the encoder on `g`: `[B, T, N, D] -> [B, M, D]`.
    pub fn forward(&self, g: &mut Graph<'_>, grid: Var) -> Result<Var> {
        self.check_grid(g, grid)?;
        let out = match &self.module {
            Module::Temporal(mode) => pool_temporal(g, grid, *mode)?,
            Module::FixedWindow(s) => fixed_window_pool(g, grid, *s)?,
            Module::PerFrame(tl) => per_frame_pool(g, tl, grid)?.0,
            Module::TransformerLastM { stack, positions } => {
                transformer_last_m(g, stack, positions, grid, self.config.budget)?
            }
            Module::TokenLearner { tl, stamp } => {
                let x = Self::stamped(g, stamp, grid)?;
                let x = Self::flatten(g, x)?;
                tokenlearner_pool(g, tl, x)?.0
            }
            Module::Perceiver { queries, stamp } => {
                let x = Self::stamped(g, stamp, grid)?;
                let x = Self::flatten(g, x)?;
                let q = g.param(queries.queries)?;
                perceiver_pool(g, q, x)?.0
            }
            Module::Ttm(p) if p.grouped => ttm::grouped_ttm_encode(g, p, grid)?,
            Module::Ttm(p) => ttm::vanilla_ttm_encode(g, p, grid)?,
        };
        debug_assert_eq!(g.shape(out)[1..], [self.config.budget, self.config.dim]);
        Ok(out)
    }

    /// Encodes a batch without recording gradients.
    pub fn encode_batch(&self, store: &ParamStore, grids: &[&TokenGrid]) -> Result<Vec<VideoTokens>> {
        let x = stack_grids(grids.iter().copied())?;
        let out = match &self.module {
            Module::Ttm(p) => {
                self.check_shape(x.shape())?;
                ttm::ttm_encode_stepwise(p, store, &x)?
            }
            _ => {
                let mut g = Graph::with_params(store);
                let x = g.constant(x);
                let out = self.forward(&mut g, x)?;
                g.value(out).clone()
            }
        };
        let (m, d) = (self.config.budget, self.config.dim);
        out.data()
            .chunks(m * d)
            .map(|c| VideoTokens::new(Tensor::new([m, d], c.to_vec())?))
            .collect()
    }

    pub fn encode(&self, store: &ParamStore, grid: &TokenGrid) -> Result<VideoTokens> {
        Ok(self.encode_batch(store, &[grid])?.remove(0))
    }
}

/// Builds a fresh encoder for `config` and encodes `grid` with it.
pub fn encode(config: &EncoderConfig, grid: &TokenGrid, rng: &mut impl Rng) -> Result<VideoTokens> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config.clone(), &mut store, rng)?;
    enc.encode(&store, grid)
}
