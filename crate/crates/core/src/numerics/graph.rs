//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a reference to its parents. [`Graph::backward`] walks the tape from
//! the loss towards the leaves, so nodes are visited in reverse topological
//! order by construction.

use super::gemm::{gemm, Layout};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_dims, softmax_in_place, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu {
        x: Var,
        slope: Vec<f64>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        beta: Var,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    TransposeLast2(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape plus gradient accumulators.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    param_vars: Vec<Option<Var>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl<'s> Graph<'s> {
    /// Tape without parameter access; use [`Graph::with_params`] for models.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
            leaf_grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            param_vars: vec![None; store.len()],
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records parameter `id` as a differentiable leaf, once per tape.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Usage("graph has no parameter store".into()))?;
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let v = self.leaf(store.get(id).clone());
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    // ---- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k, n) = match (self.shape(a), self.shape(b)) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            (sa, sb) => {
                return Err(Error::Dim {
                    op: "bmm",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &bd[i * k * n..(i + 1) * k * n],
                Layout::Normal,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a `[n]` vector to every row of an `[..., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Dim {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        let xv = self.value(x);
        let (data, slope): (Vec<f64>, Vec<f64>) = if rg {
            xv.data().iter().map(|&v| gelu_parts(v)).unzip()
        } else {
            (xv.data().iter().map(|&v| gelu_parts(v).0).collect(), Vec::new())
        };
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu { x, slope }, rg)
    }

    /// Softmax over the last axis. With `causal`, the input must end in a
    /// square `[L, L]` block and entry (i, j) is masked out for j > i.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Numeric("softmax input"));
        }
        let shape = xv.shape().to_vec();
        let n = xv.last_dim();
        if shape.is_empty() || n == 0 {
            return Err(Error::Dim {
                op: "softmax",
                lhs: shape,
                rhs: vec![1],
            });
        }
        let rows_per_block = if causal {
            match shape.as_slice() {
                [.., l, c] if l == c => *l,
                _ => {
                    return Err(Error::Dim {
                        op: "causal softmax",
                        lhs: shape,
                        rhs: vec![n, n],
                    })
                }
            }
        } else {
            0
        };
        let mut data = xv.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let valid = if causal { r % rows_per_block + 1 } else { n };
            softmax_in_place(row, valid);
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dim {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "sum axis",
                index: axis,
                limit: shape.len(),
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let base = (o * len + a) * inner;
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or(Error::Index {
            what: "mean axis",
            index: axis,
            limit: self.shape(x).len(),
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::Dim {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (a, b) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        transpose_blocks(src, &mut out, batch, a, b);
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::TransposeLast2(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                what: "concat axis",
                index: axis,
                limit: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dim {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Index {
                what: "slice end",
                index: start + len,
                limit: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// `[B, L, H*dh] -> [B*H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (b, l, d) = match self.shape(x) {
            [b, l, d] if heads > 0 && d % heads == 0 => (*b, *l, *d),
            s => {
                return Err(Error::Dim {
                    op: "split_heads",
                    lhs: s.to_vec(),
                    rhs: vec![heads],
                })
            }
        };
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        permute_heads(src, &mut out, b, l, heads, dh, false);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([b * heads, l, dh], out)?,
            Op::SplitHeads { x, heads },
            rg,
        ))
    }

    /// `[B*H, L, dh] -> [B, L, H*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (bh, l, dh) = match self.shape(x) {
            [bh, l, dh] if heads > 0 && bh % heads == 0 => (*bh, *l, *dh),
            s => {
                return Err(Error::Dim {
                    op: "merge_heads",
                    lhs: s.to_vec(),
                    rhs: vec![heads],
                })
            }
        };
        let b = bh / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        permute_heads(src, &mut out, b, l, heads, dh, true);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([b, l, heads * dh], out)?,
            Op::MergeHeads { x, heads },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = match self.shape(logits) {
            [b, k] if *b == labels.len() && *k > 0 => (*b, *k),
            s => {
                return Err(Error::Dim {
                    op: "cross_entropy",
                    lhs: s.to_vec(),
                    rhs: vec![labels.len()],
                })
            }
        };
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits);
        if !lv.is_finite() {
            return Err(Error::Numeric("cross-entropy logits"));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass -------------------------------------------------

    /// Accumulates d`loss`/d`leaf` for every differentiable leaf.
    ///
    /// A second call without [`Graph::zero_grad`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        self.leaf_grads = vec![None; self.nodes.len()];
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.leaf_grads[idx] = Some(gout);
            } else {
                propagate(&self.nodes, idx, &gout, &mut grads);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clears accumulated gradients so [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
        self.backward_done = false;
    }

    /// Gradient of a differentiable leaf; zero if it does not reach the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !self.backward_done || !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &self.leaf_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradients for every parameter of the attached store, in store order.
    pub fn param_grads(&self) -> Result<Vec<Tensor>> {
        let store = self
            .store
            .ok_or_else(|| Error::Usage("graph has no parameter store".into()))?;
        if !self.backward_done {
            return Err(Error::Usage("param_grads before backward".into()));
        }
        Ok(store
            .ids()
            .map(|id| match self.param_vars[id.index()] {
                Some(v) => self.grad(v).expect("param leaf"),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect())
    }
}

fn transpose_blocks(src: &[f64], dst: &mut [f64], batch: usize, a: usize, b: usize) {
    for blk in 0..batch {
        let off = blk * a * b;
        for i in 0..a {
            for j in 0..b {
                dst[off + j * a + i] = src[off + i * b + j];
            }
        }
    }
}

/// Moves between `[B, L, H, dh]` (merged) and `[B, H, L, dh]` (split) layout.
fn permute_heads(
    src: &[f64],
    dst: &mut [f64],
    b: usize,
    l: usize,
    h: usize,
    dh: usize,
    merge: bool,
) {
    for bi in 0..b {
        for li in 0..l {
            for hi in 0..h {
                let merged = ((bi * l + li) * h + hi) * dh;
                let split = ((bi * h + hi) * l + li) * dh;
                let (from, to) = if merge {
                    (split, merged)
                } else {
                    (merged, split)
                };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(g);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = matmul_dims(val(*a).shape(), val(*b).shape()).expect("checked");
            accumulate(nodes, grads, *a, |g| {
                gemm(
                    m,
                    n,
                    k,
                    gout,
                    Layout::Normal,
                    val(*b).data(),
                    Layout::Transposed,
                    g,
                    true,
                )
            });
            accumulate(nodes, grads, *b, |g| {
                gemm(
                    k,
                    m,
                    n,
                    val(*a).data(),
                    Layout::Transposed,
                    gout,
                    Layout::Normal,
                    g,
                    true,
                )
            });
        }
        Op::Bmm(a, b) => {
            let (bs, m, k) = match val(*a).shape() {
                [bs, m, k] => (*bs, *m, *k),
                _ => unreachable!(),
            };
            let n = val(*b).shape()[2];
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |g| {
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &gout[i * m * n..(i + 1) * m * n],
                        Layout::Normal,
                        &bd[i * k * n..(i + 1) * k * n],
                        Layout::Transposed,
                        &mut g[i * m * k..(i + 1) * m * k],
                        true,
                    );
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        Layout::Transposed,
                        &gout[i * m * n..(i + 1) * m * n],
                        Layout::Normal,
                        &mut g[i * k * n..(i + 1) * k * n],
                        true,
                    );
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |g| add_into(g, gout));
            accumulate(nodes, grads, *b, |g| add_into(g, gout));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |g| add_into(g, gout));
            accumulate(nodes, grads, *b, |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d -= s;
                }
            });
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, |g| {
                for ((d, s), y) in g.iter_mut().zip(gout).zip(val(*b).data()) {
                    *d += s * y;
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for ((d, s), x) in g.iter_mut().zip(gout).zip(val(*a).data()) {
                    *d += s * x;
                }
            });
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, grads, *x, |g| add_into(g, gout));
            let n = val(*bias).numel();
            accumulate(nodes, grads, *bias, |g| {
                for row in gout.chunks(n) {
                    add_into(g, row);
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(nodes, grads, *x, |g| {
                for (d, v) in g.iter_mut().zip(gout) {
                    *d += s * v;
                }
            });
        }
        Op::Gelu { x, slope } => {
            accumulate(nodes, grads, *x, |g| {
                for ((d, s), k) in g.iter_mut().zip(gout).zip(slope) {
                    *d += s * k;
                }
            });
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let n = node.value.last_dim();
            accumulate(nodes, grads, *x, |g| {
                for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] += yr[j] * (dr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = node.value.last_dim();
            let gm = val(*gamma).data();
            accumulate(nodes, grads, *gamma, |g| {
                for (dr, hr) in gout.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        g[j] += dr[j] * hr[j];
                    }
                }
            });
            accumulate(nodes, grads, *beta, |g| {
                for dr in gout.chunks(d) {
                    add_into(g, dr);
                }
            });
            accumulate(nodes, grads, *x, |g| {
                let inv_d = 1.0 / d as f64;
                for (r, ((gr, dr), hr)) in g
                    .chunks_mut(d)
                    .zip(gout.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = dr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for j in 0..d {
                        let dh = dr[j] * gm[j];
                        gr[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
        }
        Op::SumAll(x) => {
            let s = gout[0];
            accumulate(nodes, grads, *x, |g| {
                for d in g.iter_mut() {
                    *d += s;
                }
            });
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = axis_extents(val(*x).shape(), *axis);
            accumulate(nodes, grads, *x, |g| {
                for o in 0..outer {
                    let src = &gout[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        add_into(&mut g[base..base + inner], src);
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |g| add_into(g, gout));
        }
        Op::TransposeLast2(x) => {
            let s = val(*x).shape();
            let r = s.len();
            let (a, b) = (s[r - 2], s[r - 1]);
            let batch = s[..r - 2].iter().product::<usize>();
            accumulate(nodes, grads, *x, |g| {
                let mut t = vec![0.0; gout.len()];
                transpose_blocks(gout, &mut t, batch, b, a);
                add_into(g, &t);
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = axis_extents(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                accumulate(nodes, grads, p, |g| {
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        let to = o * len * inner;
                        add_into(&mut g[to..to + len * inner], &gout[from..from + len * inner]);
                    }
                });
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = axis_extents(val(*x).shape(), *axis);
            let len = node.value.shape()[*axis];
            accumulate(nodes, grads, *x, |g| {
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    add_into(&mut g[to..to + len * inner], &gout[from..from + len * inner]);
                }
            });
        }
        Op::SplitHeads { x, heads } => {
            let s = val(*x).shape();
            let (b, l, d) = (s[0], s[1], s[2]);
            accumulate(nodes, grads, *x, |g| {
                let mut t = vec![0.0; gout.len()];
                permute_heads(gout, &mut t, b, l, *heads, d / heads, true);
                add_into(g, &t);
            });
        }
        Op::MergeHeads { x, heads } => {
            let s = val(*x).shape();
            let (bh, l, dh) = (s[0], s[1], s[2]);
            accumulate(nodes, grads, *x, |g| {
                let mut t = vec![0.0; gout.len()];
                permute_heads(gout, &mut t, bh / heads, l, *heads, dh, false);
                add_into(g, &t);
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = val(*logits).last_dim();
            let scale = gout[0] / labels.len() as f64;
            accumulate(nodes, grads, *logits, |g| {
                for (i, (gr, pr)) in g.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                    for j in 0..k {
                        let target = if j == labels[i] { 1.0 } else { 0.0 };
                        gr[j] += scale * (pr[j] - target);
                    }
                }
            });
        }
    }
}
