//! Token-memory sequential encoders.
//!
//! Both encoders keep a set of memory tokens and, per frame, read a few
//! tokens from `[memory ∥ inputs]` with a token learner, process them with a
//! transformer stack, and rewrite the whole memory by soft selection from
//! `[memory ∥ processed ∥ inputs]`. After the last frame another token
//! learner pools the memory into the output budget.
//!
//! The vanilla encoder runs one undivided memory over all tokens of a frame.
//! The grouped encoder keeps a separate memory of G slots for each spatial
//! token index j, updated only from token j of each frame, with parameters
//! shared across groups. All groups of a step (and of a batch) go through the
//! shared modules in one batched call.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, TokenGrid, TokenLearner, Variant};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, TimestampEncoding, TransformerStack, Var};

/// Learned modules of a token-memory encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtmParams {
    pub read: TokenLearner,
    pub processor: TransformerStack,
    pub write: TokenLearner,
    pub pool: TokenLearner,
    /// All-zero when the encoder runs without frame-index encoding.
    pub timestamp: TimestampEncoding,
    pub grouped: bool,
    /// Slots per group (G); the vanilla memory has `tokens * G` slots.
    pub memory_per_group: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl TtmParams {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let (settings, grouped) = match &config.variant {
            Variant::VanillaTtm(s) => (s, false),
            Variant::GroupedTtm(s) => (s, true),
            other => {
                return Err(Error::config(format!(
                    "{} is not a token-memory encoder",
                    other.tag()
                )))
            }
        };
        config.validate()?;
        let d = config.dim;
        let g = settings.memory_per_group;
        // Slots rewritten per write: one group's worth, or the whole memory.
        let write_slots = if grouped { g } else { g * config.tokens };
        let read = TokenLearner::new(store, rng, "ttm.read", d, settings.read)?;
        let processor = TransformerStack::new(
            store,
            rng,
            "ttm.proc",
            settings.layers,
            d,
            settings.heads,
            settings.ffn_hidden,
        )?;
        // The processor starts as the identity. Its pre-norm branches emit
        // tokens of norm ~sqrt(D) at a random init, and each write would copy
        // them into memory, where they swamp the unit-scale frame tokens.
        processor.zero_output_projections(store);
        let write = TokenLearner::new(store, rng, "ttm.write", d, write_slots)?;
        let pool = TokenLearner::new(store, rng, "ttm.pool", d, config.budget)?;
        let timestamp = if settings.timestamp {
            TimestampEncoding::new(config.frames, d)
        } else {
            TimestampEncoding::zeros(config.frames, d)
        };
        Ok(Self {
            read,
            processor,
            write,
            pool,
            timestamp,
            grouped,
            memory_per_group: g,
            tokens: config.tokens,
            dim: d,
        })
    }

    pub fn read_size(&self) -> usize {
        self.read.outputs
    }

    /// Total memory slots per video: N·G for both encoders.
    pub fn memory_slots(&self) -> usize {
        self.tokens * self.memory_per_group
    }

    /// Zeroes read and write scorers so both select uniformly.
    pub fn zero_selectors(&self, store: &mut ParamStore) {
        self.read.zero(store);
        self.write.zero(store);
    }

    /// Zeroes the processor's output projections so it is the identity.
    pub fn zero_processor(&self, store: &mut ParamStore) {
        self.processor.zero_output_projections(store);
    }
}

/// Soft-selects r tokens from `[memory ∥ inputs]`.
///
/// `memory` is `[B, K, D]`, `inputs` is `[B, P, D]`; returns `[B, r, D]` and
/// the `[B, r, K+P]` selection weights.
pub fn ttm_read(g: &mut Graph<'_>, params: &TtmParams, memory: Var, inputs: Var) -> Result<(Var, Var)> {
    let candidates = g.concat(&[memory, inputs], 1)?;
    params.read.forward(g, candidates)
}

/// Non-causal transformer stack over the read tokens.
pub fn ttm_process(g: &mut Graph<'_>, params: &TtmParams, read: Var) -> Result<Var> {
    params.processor.forward(g, read, false)
}

/// Rewrites K memory slots by soft selection from
/// `[memory ∥ processed ∥ inputs]`. Returns `[B, K, D]` and the weights.
pub fn ttm_write(
    g: &mut Graph<'_>,
    params: &TtmParams,
    memory: Var,
    processed: Var,
    inputs: Var,
) -> Result<(Var, Var)> {
    let k = g.shape(memory)[1];
    if k != params.write.outputs {
        return Err(Error::Dim {
            op: "ttm_write memory",
            lhs: g.shape(memory).to_vec(),
            rhs: vec![params.write.outputs],
        });
    }
    let candidates = g.concat(&[memory, processed, inputs], 1)?;
    params.write.forward(g, candidates)
}

fn ttm_update(g: &mut Graph<'_>, params: &TtmParams, memory: Var, inputs: Var) -> Result<Var> {
    let (read, _) = ttm_read(g, params, memory, inputs)?;
    let processed = ttm_process(g, params, read)?;
    Ok(ttm_write(g, params, memory, processed, inputs)?.0)
}

fn grid_dims(g: &Graph<'_>, grid: Var, params: &TtmParams) -> Result<[usize; 4]> {
    match *g.shape(grid) {
        [b, t, n, d] if n == params.tokens && d == params.dim && t <= params.timestamp.max_frames() => {
            Ok([b, t, n, d])
        }
        ref s => Err(Error::Dim {
            op: "ttm grid",
            lhs: s.to_vec(),
            rhs: vec![params.timestamp.max_frames(), params.tokens, params.dim],
        }),
    }
}

/// Adds the frame-index rows to every frame of a `[B, T, N, D]` grid.
fn stamp_grid(g: &mut Graph<'_>, params: &TtmParams, grid: Var) -> Result<Var> {
    let [b, t, n, _] = *g.shape(grid) else {
        unreachable!("checked by grid_dims")
    };
    let table = params.timestamp.broadcast(b, t, n)?;
    let table = g.constant(table);
    g.add(grid, table)
}

fn frame(g: &mut Graph<'_>, grid: Var, t: usize) -> Result<Var> {
    let [b, _, n, d] = *g.shape(grid) else {
        unreachable!("checked by grid_dims")
    };
    let f = g.slice(grid, 1, t, 1)?;
    g.reshape(f, &[b, n, d])
}

/// Final memory of the undivided encoder, `[B, N·G, D]`.
pub fn vanilla_ttm_memory(g: &mut Graph<'_>, params: &TtmParams, grid: Var) -> Result<Var> {
    let [b, t, _, d] = grid_dims(g, grid, params)?;
    let stamped = stamp_grid(g, params, grid)?;
    let mut memory = g.constant(Tensor::zeros([b, params.memory_slots(), d]));
    for step in 0..t {
        let inputs = frame(g, stamped, step)?;
        memory = ttm_update(g, params, memory, inputs)?;
    }
    Ok(memory)
}

/// Undivided-memory encoder: `[B, T, N, D] -> [B, M, D]`.
pub fn vanilla_ttm_encode(g: &mut Graph<'_>, params: &TtmParams, grid: Var) -> Result<Var> {
    let memory = vanilla_ttm_memory(g, params, grid)?;
    Ok(params.pool.forward(g, memory)?.0)
}

/// One grouped step. `memory` is `[B, N, G, D]`, `frame_tokens` is the
/// `[B, N, D]` frame `t` before its frame-index encoding is added.
pub fn grouped_ttm_step(
    g: &mut Graph<'_>,
    params: &TtmParams,
    memory: Var,
    frame_tokens: Var,
    t: usize,
) -> Result<Var> {
    let (b, n, slots, d) = match *g.shape(memory) {
        [b, n, s, d] => (b, n, s, d),
        ref s => {
            return Err(Error::Dim {
                op: "grouped memory",
                lhs: s.to_vec(),
                rhs: vec![params.tokens, params.memory_per_group, params.dim],
            })
        }
    };
    if g.shape(frame_tokens) != [b, n, d] || slots != params.memory_per_group {
        return Err(Error::Config(format!(
            "frame tokens {:?} do not match grouped memory {:?}",
            g.shape(frame_tokens),
            g.shape(memory)
        )));
    }
    let row = params.timestamp.row(t)?;
    let stamp = Tensor::from_fn([b, n, d], |i| row[i % d]);
    let stamp = g.constant(stamp);
    let inputs = g.add(frame_tokens, stamp)?;
    step_groups(g, params, memory, inputs)
}

/// Grouped update on already-stamped inputs, batching all B·N groups.
fn step_groups(g: &mut Graph<'_>, params: &TtmParams, memory: Var, inputs: Var) -> Result<Var> {
    let [b, n, slots, d] = *g.shape(memory) else {
        unreachable!()
    };
    let mem = g.reshape(memory, &[b * n, slots, d])?;
    let inp = g.reshape(inputs, &[b * n, 1, d])?;
    let next = ttm_update(g, params, mem, inp)?;
    g.reshape(next, &[b, n, slots, d])
}

/// Final grouped memory `[B, N, G, D]` after folding over all frames.
pub fn grouped_ttm_memory(g: &mut Graph<'_>, params: &TtmParams, grid: Var) -> Result<Var> {
    let [b, t, n, d] = grid_dims(g, grid, params)?;
    let stamped = stamp_grid(g, params, grid)?;
    let mut memory = g.constant(Tensor::zeros([b, n, params.memory_per_group, d]));
    for step in 0..t {
        let inputs = frame(g, stamped, step)?;
        memory = step_groups(g, params, memory, inputs)?;
    }
    Ok(memory)
}

/// Grouped encoder: `[B, T, N, D] -> [B, M, D]`.
pub fn grouped_ttm_encode(g: &mut Graph<'_>, params: &TtmParams, grid: Var) -> Result<Var> {
    let memory = grouped_ttm_memory(g, params, grid)?;
    let [b, n, slots, d] = *g.shape(memory) else {
        unreachable!()
    };
    let flat = g.reshape(memory, &[b, n * slots, d])?;
    Ok(params.pool.forward(g, flat)?.0)
}

/// Final memory of either encoder without keeping a tape across frames.
///
/// Each step runs on its own short-lived graph and only the memory tensor is
/// carried over, so peak memory is one step's activations rather than T
/// steps'. Values match the single-tape fold bit for bit.
pub fn ttm_memory_stepwise(params: &TtmParams, store: &ParamStore, grid: &Tensor) -> Result<Tensor> {
    let (stamped, [b, t, n, d]) = {
        let mut g = Graph::with_params(store);
        let x = g.constant(grid.clone());
        let dims = grid_dims(&g, x, params)?;
        let s = stamp_grid(&mut g, params, x)?;
        (g.value(s).clone(), dims)
    };
    let mut memory = if params.grouped {
        Tensor::zeros([b, n, params.memory_per_group, d])
    } else {
        Tensor::zeros([b, params.memory_slots(), d])
    };
    for step in 0..t {
        let mut g = Graph::with_params(store);
        let x = g.constant(stamped.clone());
        let inputs = frame(&mut g, x, step)?;
        let mem = g.constant(memory);
        let next = if params.grouped {
            step_groups(&mut g, params, mem, inputs)?
        } else {
            ttm_update(&mut g, params, mem, inputs)?
        };
        memory = g.value(next).clone();
    }
    Ok(memory)
}

/// Inference-only encode `[B, T, N, D] -> [B, M, D]` on per-step tapes.
pub fn ttm_encode_stepwise(params: &TtmParams, store: &ParamStore, grid: &Tensor) -> Result<Tensor> {
    let memory = ttm_memory_stepwise(params, store, grid)?;
    let mut g = Graph::with_params(store);
    let mem = g.constant(memory);
    let flat = match *g.shape(mem) {
        [b, n, s, d] => g.reshape(mem, &[b, n * s, d])?,
        _ => mem,
    };
    let out = params.pool.forward(&mut g, flat)?.0;
    Ok(g.value(out).clone())
}

/// Per-video grouped memory: N groups of G slots of D channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedMemory {
    slots: Tensor,
}

impl GroupedMemory {
    pub fn zeros(groups: usize, slots: usize, dim: usize) -> Self {
        Self {
            slots: Tensor::zeros([groups, slots, dim]),
        }
    }

    pub fn from_tensor(slots: Tensor) -> Result<Self> {
        if slots.rank() != 3 || !slots.is_finite() {
            return Err(Error::Data(format!(
                "grouped memory must be a finite [N, G, D] tensor, got {:?}",
                slots.shape()
            )));
        }
        Ok(Self { slots })
    }

    pub fn groups(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn slots_per_group(&self) -> usize {
        self.slots.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.slots.shape()[2]
    }

    pub fn total_slots(&self) -> usize {
        self.groups() * self.slots_per_group()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.slots
    }

    /// Flattened `G * D` values of group `j`.
    pub fn group(&self, j: usize) -> &[f64] {
        let w = self.slots_per_group() * self.dim();
        &self.slots.data()[j * w..(j + 1) * w]
    }

    /// Advances by one frame without recording gradients.
    pub fn step(&self, params: &TtmParams, store: &ParamStore, frame_tokens: &Tensor, t: usize) -> Result<Self> {
        if frame_tokens.shape() != [self.groups(), self.dim()] {
            return Err(Error::Config(format!(
                "frame has shape {:?}, memory has {} groups of dim {}",
                frame_tokens.shape(),
                self.groups(),
                self.dim()
            )));
        }
        let mut g = Graph::with_params(store);
        let [n, s, d] = [self.groups(), self.slots_per_group(), self.dim()];
        let mem = g.constant(self.slots.clone().reshape([1, n, s, d])?);
        let f = g.constant(frame_tokens.clone().reshape([1, n, d])?);
        let next = grouped_ttm_step(&mut g, params, mem, f, t)?;
        Self::from_tensor(g.value(next).clone().reshape([n, s, d])?)
    }

    /// Runs the full recurrence over a grid from zero memory.
    pub fn run(params: &TtmParams, store: &ParamStore, grid: &TokenGrid) -> Result<Self> {
        if !params.grouped {
            return Err(Error::config("grouped memory needs a grouped encoder"));
        }
        let mem = ttm_memory_stepwise(params, store, &grid.batch_of_one()?)?;
        let [_, n, s, d] = *mem.shape() else {
            unreachable!()
        };
        Self::from_tensor(mem.reshape([n, s, d])?)
    }
}
