use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Fixed sinusoidal encoding of a frame index, one row per frame.
///
/// Row `t` holds `sin(t / 10000^(2i/dim))` in even channels and the matching
/// cosine in odd channels, all scaled by `sqrt(2/dim)` so rows have unit
/// norm (for even `dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestampEncoding {
    max_frames: usize,
    dim: usize,
    table: Tensor,
}

impl TimestampEncoding {
    pub fn new(max_frames: usize, dim: usize) -> Self {
        // Every sin/cos pair contributes 1 to the squared norm; rescale so
        // each row has unit norm, the same scale as a unit-norm token.
        let pe_scale = 1.0 / (dim as f64 / 2.0).sqrt();
        let table = Tensor::from_fn([max_frames, dim], |flat| {
            let (t, c) = (flat / dim, flat % dim);
            let pair = (c / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            pe_scale * if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        });
        Self {
            max_frames,
            dim,
            table,
        }
    }

    /// All-zero table; applying it is the identity.
    pub fn zeros(max_frames: usize, dim: usize) -> Self {
        Self {
            max_frames,
            dim,
            table: Tensor::zeros([max_frames, dim]),
        }
    }

    pub fn max_frames(&self) -> usize {
        self.max_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn row(&self, t: usize) -> Result<&[f64]> {
        if t >= self.max_frames {
            return Err(Error::Index {
                what: "frame index",
                index: t,
                limit: self.max_frames,
            });
        }
        Ok(&self.table.data()[t * self.dim..(t + 1) * self.dim])
    }

    /// Adds row `t` to every token of an `[N, dim]` frame.
    pub fn apply(&self, tokens: &Tensor, t: usize) -> Result<Tensor> {
        let row = self.row(t)?;
        if tokens.rank() != 2 || tokens.last_dim() != self.dim {
            return Err(Error::Dim {
                op: "timestamp_apply",
                lhs: tokens.shape().to_vec(),
                rhs: vec![self.max_frames, self.dim],
            });
        }
        let mut out = tokens.clone();
        for tok in out.data_mut().chunks_mut(self.dim) {
            for (v, p) in tok.iter_mut().zip(row) {
                *v += p;
            }
        }
        Ok(out)
    }

    /// Constant `[batch, frames, tokens, dim]` tensor holding row `t` at
    /// every token of frame `t`.
    pub fn broadcast(&self, batch: usize, frames: usize, tokens: usize) -> Result<Tensor> {
        if frames > self.max_frames {
            return Err(Error::Index {
                what: "frame count",
                index: frames,
                limit: self.max_frames,
            });
        }
        let d = self.dim;
        Ok(Tensor::from_fn([batch, frames, tokens, d], |flat| {
            let t = (flat / (tokens * d)) % frames;
            self.table.data()[t * d + flat % d]
        }))
    }
}
