//! Parameterized layers built on the tape.
//!
//! Every layer stores [`ParamId`] handles into a shared [`ParamStore`] and
//! records its forward pass on a [`Graph`] attached to that store. Weights
//! are stored `[in, out]` so a layer computes `x · W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{xavier_uniform, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config(format!(
                "{name}: linear layer needs non-zero widths, got {in_dim}->{out_dim}"
            )));
        }
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, [in_dim, out_dim], in_dim, out_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Applies the layer to the last axis of `x`, any leading shape.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::Dim {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = g.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = g.matmul(flat, w)?;
        let y = g.add_bias(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim;
        g.reshape(y, &out_shape)
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: LinearParams::new(store, rng, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: LinearParams::new(store, rng, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.fc1.zero(store);
        self.fc2.zero(store);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config(format!(
                "{name}: layer norm needs at least 2 channels, got {dim}"
            )));
        }
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head self-attention over `[B, L, d]` sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{name}: channel dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: LinearParams::new(store, rng, &format!("{name}.q"), dim, dim)?,
            key: LinearParams::new(store, rng, &format!("{name}.k"), dim, dim)?,
            value: LinearParams::new(store, rng, &format!("{name}.v"), dim, dim)?,
            output: LinearParams::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, causal: bool) -> Result<Var> {
        let dim = self.query.in_dim;
        let head_dim = dim / self.heads;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let kt = g.transpose_last2(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let weights = g.softmax(scores, causal)?;
        let ctx = g.bmm(weights, v)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        self.output.forward(g, ctx)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `h + FFN(LN(h))`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerBlockParams {
    pub norm1: LayerNormParams,
    pub attention: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: MlpParams,
}

impl TransformerBlockParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(store, &format!("{name}.ln1"), dim)?,
            attention: AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNormParams::new(store, &format!("{name}.ln2"), dim)?,
            ffn: MlpParams::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden, dim)?,
        })
    }

    /// `x` is `[B, L, d]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, causal: bool) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attention.forward(g, h, causal)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }

    /// Zeroes the attention output projection and the second FFN layer, which
    /// turns the block into the identity map.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attention.output.zero(store);
        self.ffn.fc2.zero(store);
    }
}

/// Stack of transformer blocks sharing one configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlockParams>,
}

impl TransformerStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config(format!("{name}: need at least one layer")));
        }
        let blocks = (0..layers)
            .map(|i| {
                TransformerBlockParams::new(store, rng, &format!("{name}.{i}"), dim, heads, ffn_hidden)
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var, causal: bool) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, x, causal)?;
        }
        Ok(x)
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for block in &self.blocks {
            block.zero_output_projections(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn head_count_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = TransformerBlockParams::new(&mut store, &mut rng, "b", 6, 4, 8).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zeroed_projections_give_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = TransformerBlockParams::new(&mut store, &mut rng, "b", 8, 2, 16).unwrap();
        block.zero_output_projections(&mut store);
        let x = random_input(&mut rng, &[2, 5, 8]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, xv, false).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn causal_block_ignores_future_positions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = TransformerBlockParams::new(&mut store, &mut rng, "b", 8, 2, 16).unwrap();
        let x = random_input(&mut rng, &[1, 6, 8]);
        let run = |input: &Tensor| {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(input.clone());
            let y = block.forward(&mut g, xv, true).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        for j in 0..6 {
            let mut perturbed = x.clone();
            for c in 0..8 {
                perturbed.data_mut()[j * 8 + c] += 0.37;
            }
            let out = run(&perturbed);
            for i in 0..6 {
                let row = |t: &Tensor| t.data()[i * 8..(i + 1) * 8].to_vec();
                if i < j {
                    assert_eq!(row(&out), row(&base), "position {i} saw future {j}");
                } else if i == j {
                    assert_ne!(row(&out), row(&base));
                }
            }
        }
    }

    #[test]
    fn single_position_causal_matches_full() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = TransformerBlockParams::new(&mut store, &mut rng, "b", 4, 2, 8).unwrap();
        let x = random_input(&mut rng, &[3, 1, 4]);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let a = block.forward(&mut g, xv, true).unwrap();
        let b = block.forward(&mut g, xv, false).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = LinearParams::new(&mut store, &mut rng, "l", 3, 2).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros([2, 4]));
        assert!(matches!(lin.forward(&mut g, x), Err(Error::Dim { .. })));
    }
}
