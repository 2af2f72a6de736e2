//! Attentional pooling: output tokens are softmax-weighted combinations of
//! the input tokens, `X = softmax(scores(V)) · V`.
//!
//! The TokenLearner form scores every input token with a small MLP (one
//! score per output slot). The Perceiver form scores by dot product with
//! learned latent queries, scaled by `1/sqrt(D)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Graph, MlpParams, ParamId, ParamStore, Var};

/// Per-token MLP scorer `D -> 2M -> M` followed by a softmax over tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLearner {
    pub scorer: MlpParams,
    pub outputs: usize,
}

impl TokenLearner {
    /// Hidden width is twice the number of selected tokens.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        outputs: usize,
    ) -> Result<Self> {
        let scorer = MlpParams::new(store, rng, name, dim, 2 * outputs, outputs)?;
        Self::from_scorer(scorer, outputs)
    }

    pub fn from_scorer(scorer: MlpParams, outputs: usize) -> Result<Self> {
        if scorer.out_dim() != outputs {
            return Err(Error::config(format!(
                "token learner scorer emits {} scores but {outputs} tokens were requested",
                scorer.out_dim()
            )));
        }
        Ok(Self { scorer, outputs })
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.scorer.zero(store);
    }

    /// `tokens` is `[B, P, D]`; returns (`[B, M, D]` outputs, `[B, M, P]` weights).
    pub fn forward(&self, g: &mut Graph<'_>, tokens: Var) -> Result<(Var, Var)> {
        let scores = self.scorer.forward(g, tokens)?;
        let logits = g.transpose_last2(scores)?;
        pool_with_logits(g, logits, tokens)
    }
}

fn pool_with_logits(g: &mut Graph<'_>, logits: Var, tokens: Var) -> Result<(Var, Var)> {
    let weights = g.softmax(logits, false)?;
    let out = g.bmm(weights, tokens)?;
    Ok((out, weights))
}

/// Soft-selects `tl.outputs` tokens from all `[B, P, D]` input tokens.
pub fn tokenlearner_pool(g: &mut Graph<'_>, tl: &TokenLearner, tokens: Var) -> Result<(Var, Var)> {
    tl.forward(g, tokens)
}

/// Learned latent queries `[M, D]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceiverQueries {
    pub queries: ParamId,
    pub outputs: usize,
    pub dim: usize,
}

impl PerceiverQueries {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        outputs: usize,
    ) -> Result<Self> {
        if outputs == 0 || dim == 0 {
            return Err(Error::config("perceiver queries need M, D > 0"));
        }
        let queries = store.add(
            format!("{name}.queries"),
            xavier_uniform(rng, [outputs, dim], dim, outputs),
        );
        Ok(Self {
            queries,
            outputs,
            dim,
        })
    }
}

/// Cross-attention pooling: weights `softmax(Q · Vᵀ / sqrt(D))` over the P
/// input tokens, output `weights · V`.
pub fn perceiver_pool(g: &mut Graph<'_>, queries: Var, tokens: Var) -> Result<(Var, Var)> {
    let (b, p, d) = match *g.shape(tokens) {
        [b, p, d] => (b, p, d),
        ref s => {
            return Err(Error::Dim {
                op: "perceiver_pool tokens",
                lhs: s.to_vec(),
                rhs: vec![0; 3],
            })
        }
    };
    let m = match *g.shape(queries) {
        [m, qd] if qd == d => m,
        ref s => {
            return Err(Error::Config(format!(
                "perceiver queries {s:?} do not match token channels {d}"
            )))
        }
    };
    let flat = g.reshape(tokens, &[b * p, d])?;
    let qt = g.transpose_last2(queries)?;
    let logits = g.matmul(flat, qt)?;
    let logits = g.reshape(logits, &[b, p, m])?;
    let logits = g.transpose_last2(logits)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    pool_with_logits(g, logits, tokens)
}

/// `[B, T, N, D] -> [B, k * T, D]`: the same token learner applied to each
/// frame on its own, outputs concatenated in frame order. Weights are
/// `[B * T, k, N]`.
pub fn per_frame_pool(g: &mut Graph<'_>, tl: &TokenLearner, grid: Var) -> Result<(Var, Var)> {
    let [b, t, n, d] = super::pooling::dims(g, grid)?;
    let frames = g.reshape(grid, &[b * t, n, d])?;
    let (out, weights) = tl.forward(g, frames)?;
    let out = g.reshape(out, &[b, t * tl.outputs, d])?;
    Ok((out, weights))
}
