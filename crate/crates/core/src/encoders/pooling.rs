//! Parameter-free temporal and space-time pooling baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Sum,
    Mean,
}

fn grid_dims(g: &Graph<'_>, grid: Var) -> Result<[usize; 4]> {
    match *g.shape(grid) {
        [b, t, n, d] => Ok([b, t, n, d]),
        ref s => Err(Error::Dim {
            op: "token grid batch",
            lhs: s.to_vec(),
            rhs: vec![0; 4],
        }),
    }
}

/// `[B, T, N, D] -> [B, N, D]`: token j of the output is the sum (or mean)
/// over frames of token j.
pub fn pool_temporal(g: &mut Graph<'_>, grid: Var, mode: PoolMode) -> Result<Var> {
    let [_, t, _, _] = grid_dims(g, grid)?;
    let summed = g.sum_axis(grid, 1)?;
    Ok(match mode {
        PoolMode::Sum => summed,
        PoolMode::Mean => g.scale(summed, 1.0 / t as f64),
    })
}

/// `[B, T, N, D] -> [B, spatial_out * T, D]`: each frame's tokens averaged in
/// `spatial_out` contiguous windows, frames kept as separate blocks.
///
/// The T blocks are emitted in lexicographic order of their values rather
/// than in frame order, so reordering the frames cannot change the output.
pub fn fixed_window_pool(g: &mut Graph<'_>, grid: Var, spatial_out: usize) -> Result<Var> {
    let [b, t, n, d] = grid_dims(g, grid)?;
    if spatial_out == 0 || n % spatial_out != 0 {
        return Err(Error::config(format!(
            "fixed_window_pool: {n} tokens not divisible into {spatial_out} windows"
        )));
    }
    let window = n / spatial_out;
    let windows = g.reshape(grid, &[b, t, spatial_out, window, d])?;
    let summed = g.sum_axis(windows, 3)?;
    let mean = g.scale(summed, 1.0 / window as f64);
    let blocks = g.reshape(mean, &[b, t, spatial_out * d])?;
    let block_len = spatial_out * d;
    let values = g.value(blocks).data().to_vec();
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        let block = |f: usize| &values[(i * t + f) * block_len..(i * t + f + 1) * block_len];
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&x, &y| {
            block(x)
                .iter()
                .zip(block(y))
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let item = g.slice(blocks, 0, i, 1)?;
        let parts = order
            .into_iter()
            .map(|f| g.slice(item, 1, f, 1))
            .collect::<Result<Vec<_>>>()?;
        items.push(g.concat(&parts, 1)?);
    }
    let sorted = g.concat(&items, 0)?;
    g.reshape(sorted, &[b, t * spatial_out, d])
}

pub(crate) fn dims(g: &Graph<'_>, grid: Var) -> Result<[usize; 4]> {
    grid_dims(g, grid)
}
