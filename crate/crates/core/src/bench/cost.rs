use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Prefill cost of a downstream language model over M video tokens plus L
/// text tokens: `c_att·(M+L)² + c_ff·(M+L)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub text_tokens: usize,
    pub c_att: f64,
    pub c_ff: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            text_tokens: 64,
            c_att: 1.0,
            c_ff: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let ok = |c: f64| c.is_finite() && c >= 0.0;
        if !ok(self.c_att) || !ok(self.c_ff) || self.c_att + self.c_ff == 0.0 {
            return Err(Error::config(format!(
                "cost constants must be non-negative and not both zero (c_att={}, c_ff={})",
                self.c_att, self.c_ff
            )));
        }
        Ok(())
    }
}

pub fn cost_estimate(model: &CostModel, m: usize) -> f64 {
    let total = (m + model.text_tokens) as f64;
    model.c_att * total * total + model.c_ff * total
}

/// Stand-in for the downstream model's prefill: one self-attention over
/// `[projected video tokens ∥ text tokens]` followed by a dense layer, so its
/// run time grows like `cost_estimate`.
#[derive(Clone, Debug)]
pub struct DownstreamStub {
    proj: Tensor,
    text: Tensor,
    dense: Tensor,
}

impl DownstreamStub {
    pub fn new(dim: usize, width: usize, text_tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (width as f64).sqrt();
        let mut fill = |shape: [usize; 2]| Tensor::from_fn(shape, |_| rng.random_range(-s..s));
        Self {
            proj: fill([dim, width]),
            text: fill([text_tokens, width]),
            dense: fill([width, width]),
        }
    }

    /// Runs the stub on `[M, D]` video tokens and returns a checksum so the
    /// work cannot be optimized away.
    pub fn run(&self, video: &Tensor) -> Result<f64> {
        let m = video.shape()[0];
        let v = video.matmul(&self.proj)?;
        let mut seq = v.into_data();
        seq.extend_from_slice(self.text.data());
        let w = self.proj.shape()[1];
        let x = Tensor::new(vec![m + self.text.shape()[0], w], seq)?;
        let xt = transpose(&x);
        let att = x.matmul(&xt)?.softmax_last_axis()?;
        let mixed = att.matmul(&x)?;
        let out = mixed.matmul(&self.dense)?;
        Ok(out.data().iter().sum())
    }
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn([c, r], |i| x.data()[(i % r) * c + i / r])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        let m = CostModel {
            text_tokens: 100,
            c_att: 1.0,
            c_ff: 0.0,
        };
        assert_eq!(cost_estimate(&m, 16), 13456.0);
        assert_eq!(cost_estimate(&m, 128), 51984.0);
        let pure = CostModel { text_tokens: 0, ..m };
        assert_eq!(cost_estimate(&pure, 32) / cost_estimate(&pure, 128), 1.0 / 16.0);
        assert_eq!(cost_estimate(&m, 0), 10000.0);
    }

    #[test]
    fn second_difference_is_twice_c_att() {
        let m = CostModel {
            text_tokens: 37,
            c_att: 3.0,
            c_ff: 5.0,
        };
        for k in 1..300 {
            let d2 = cost_estimate(&m, k + 1) - 2.0 * cost_estimate(&m, k) + cost_estimate(&m, k - 1);
            assert_eq!(d2, 6.0);
        }
    }

    #[test]
    fn validation() {
        assert!(CostModel::default().validate().is_ok());
        let zero = CostModel {
            c_att: 0.0,
            ..CostModel::default()
        };
        assert!(zero.validate().is_err());
        let neg = CostModel {
            c_ff: -1.0,
            ..CostModel::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let x = Tensor::from_fn([3, 5], |i| i as f64);
        let t = transpose(&x);
        assert_eq!(t.shape(), [5, 3]);
        assert_eq!(t.get(&[4, 2]), x.get(&[2, 4]));
        assert_eq!(transpose(&t), x);
    }
}
