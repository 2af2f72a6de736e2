use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtok_core::numerics::{
    Graph, LayerNormParams, ParamStore, Tensor, TimestampEncoding, TransformerBlockParams, LAYER_NORM_EPS,
};
use vidtok_core::train::{check_gradients, GradCheckOptions};
use vidtok_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_hand_case() {
    let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(eye.matmul(&m).unwrap(), m);
    let a = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    // Small, and large enough for the blocked kernel.
    for (m, k, n) in [(5, 7, 3), (40, 50, 30), (1, 64, 9)] {
        let a = uniform(&mut r, &[m, k]);
        let b = uniform(&mut r, &[k, n]);
        let got = a.matmul(&b).unwrap();
        assert!(max_diff(got.data(), &triple_loop(&a, &b)) < 1e-12, "{m}x{k}x{n}");
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let taped = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(taped), &got);
    }
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let err = Tensor::zeros([2, 3]).matmul(&Tensor::zeros([4, 5])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn bmm_matches_per_batch_products() {
    let mut r = rng(2);
    let a = uniform(&mut r, &[3, 4, 5]);
    let b = uniform(&mut r, &[3, 5, 2]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.bmm(va, vb).unwrap();
    for i in 0..3 {
        let ai = Tensor::new([4, 5], a.data()[i * 20..(i + 1) * 20].to_vec()).unwrap();
        let bi = Tensor::new([5, 2], b.data()[i * 10..(i + 1) * 10].to_vec()).unwrap();
        let want = triple_loop(&ai, &bi);
        assert!(max_diff(&g.value(out).data()[i * 8..(i + 1) * 8], &want) < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let s = Tensor::new([2], vec![0.0, 0.0]).unwrap().softmax_last_axis().unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = Tensor::new([2], vec![1000.0, 1000.0]).unwrap().softmax_last_axis().unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let bad = Tensor::new([2], vec![f64::NAN, 0.0]).unwrap().softmax_last_axis();
    assert!(matches!(bad, Err(Error::Numeric(_))));
}

#[test]
fn softmax_matches_exp_over_sum() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[9]);
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    let want: Vec<f64> = x.data().iter().map(|v| v.exp() / z).collect();
    assert!(max_diff(x.softmax_last_axis().unwrap().data(), &want) < 1e-12);
}

#[test]
fn causal_softmax_masks_future() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[2, 4, 4]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let s = g.softmax(v, true).unwrap();
    let y = g.value(s).data();
    for (row_idx, row) in y.chunks(4).enumerate() {
        let i = row_idx % 4;
        assert!(row[i + 1..].iter().all(|&w| w == 0.0));
        let xs = &x.data()[row_idx * 4..row_idx * 4 + i + 1];
        let z: f64 = xs.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = xs.iter().map(|v| v.exp() / z).collect();
        assert!(max_diff(&row[..=i], &want) < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = v.len();
        let s = Tensor::new([n], v).unwrap().softmax_last_axis().unwrap();
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(s.data().iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn layer_norm_rows_are_standardized(v in prop::collection::vec(-10.0f64..10.0, 2..32)) {
        let d = v.len();
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assume!(var > 1e-3);
        let out = layer_norm_unit(&Tensor::new([1, d], v).unwrap());
        let m = out.iter().sum::<f64>() / d as f64;
        prop_assert!(m.abs() < 1e-9);
    }
}

fn layer_norm_unit(x: &Tensor) -> Vec<f64> {
    let d = x.last_dim();
    let mut store = ParamStore::new();
    let ln = LayerNormParams::new(&mut store, "ln", d).unwrap();
    let mut g = Graph::with_params(&store);
    let v = g.constant(x.clone());
    let y = ln.forward(&mut g, v).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    let c = Tensor::new([1, 3], vec![2.5, 2.5, 2.5]).unwrap();
    assert!(layer_norm_unit(&c).iter().all(|&v| v == 0.0));
    let pm = layer_norm_unit(&Tensor::new([1, 2], vec![1.0, -1.0]).unwrap());
    let scale = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((pm[0] - scale).abs() < 1e-15 && (pm[1] + scale).abs() < 1e-15);
    assert!((pm[0] - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_matches_formula_with_affine() {
    let mut r = rng(5);
    let d = 11;
    let x = uniform(&mut r, &[3, d]);
    let mut store = ParamStore::new();
    let ln = LayerNormParams::new(&mut store, "ln", d).unwrap();
    *store.get_mut(ln.gamma) = uniform(&mut r, &[d]);
    *store.get_mut(ln.beta) = uniform(&mut r, &[d]);
    let mut g = Graph::with_params(&store);
    let v = g.constant(x.clone());
    let y = ln.forward(&mut g, v).unwrap();
    for (row, out) in x.data().chunks(d).zip(g.value(y).data().chunks(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for i in 0..d {
            let want = (row[i] - mean) / (var + LAYER_NORM_EPS).sqrt() * store.get(ln.gamma).data()[i]
                + store.get(ln.beta).data()[i];
            assert!((out[i] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn disconnected_parameter_has_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::new([2], vec![1.0, 2.0]).unwrap());
    store.add("unused", Tensor::new([2], vec![5.0, 6.0]).unwrap());
    let mut g = Graph::with_params(&store);
    let p = g.param(used).unwrap();
    let loss = g.sum_all(p);
    g.backward(loss).unwrap();
    let grads = g.param_grads().unwrap();
    assert_eq!(grads[0].data(), &[1.0, 1.0]);
    assert_eq!(grads[1].data(), &[0.0, 0.0]);
}

#[test]
fn backward_usage_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(Error::Usage(_))));
    g.zero_grad();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn replayed_tapes_give_identical_gradients() {
    let run = || {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let block = TransformerBlockParams::new(&mut store, &mut r, "blk", 8, 2, 16).unwrap();
        let x = uniform(&mut r, &[2, 5, 8]);
        let mut g = Graph::with_params(&store);
        let v = g.leaf(x);
        let y = block.forward(&mut g, v, true).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let mut all = g.param_grads().unwrap();
        all.push(g.grad(v).unwrap());
        all
    };
    assert_eq!(run(), run());
}

#[test]
fn transformer_block_probes() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let block = TransformerBlockParams::new(&mut store, &mut r, "blk", 8, 2, 16).unwrap();
    let x = uniform(&mut r, &[1, 6, 8]);
    let forward = |store: &ParamStore, x: &Tensor, causal: bool| {
        let mut g = Graph::with_params(store);
        let v = g.constant(x.clone());
        let y = block.forward(&mut g, v, causal).unwrap();
        g.value(y).clone()
    };

    // Causality: perturbing position 4 leaves positions 0..4 untouched.
    let base = forward(&store, &x, true);
    let mut bumped = x.clone();
    bumped.data_mut()[4 * 8 + 2] += 0.5;
    let moved = forward(&store, &bumped, true);
    assert_eq!(base.data()[..4 * 8], moved.data()[..4 * 8]);
    assert_ne!(base.data()[4 * 8..5 * 8], moved.data()[4 * 8..5 * 8]);

    // A single position sees only itself either way.
    let one = Tensor::new([1, 1, 8], x.data()[..8].to_vec()).unwrap();
    assert_eq!(forward(&store, &one, true), forward(&store, &one, false));

    block.zero_output_projections(&mut store);
    assert_eq!(forward(&store, &x, false), x);
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let w = store.add("w", uniform(&mut r, &[4, 3]));
    let gamma = store.add("gamma", uniform(&mut r, &[3]));
    let beta = store.add("beta", uniform(&mut r, &[3]));
    let bias = store.add("bias", uniform(&mut r, &[3]));
    let probe = uniform(&mut r, &[2, 5, 3]);
    let input = uniform(&mut r, &[2, 5, 4]);
    let report = check_gradients(
        "primitives",
        &mut store,
        &input,
        |g, x| {
            let flat = g.reshape(x, &[10, 4])?;
            let wv = g.param(w)?;
            let h = g.matmul(flat, wv)?;
            let b = g.param(bias)?;
            let h = g.add_bias(h, b)?;
            let h = g.gelu(h);
            let h = g.reshape(h, &[2, 5, 3])?;
            let (ga, be) = (g.param(gamma)?, g.param(beta)?);
            let h = g.layer_norm(h, ga, be)?;
            let ht = g.transpose_last2(h)?;
            let scores = g.bmm(h, ht)?;
            let att = g.softmax(scores, true)?;
            let mixed = g.bmm(att, h)?;
            let head = g.slice(mixed, 1, 1, 3)?;
            let tail = g.slice(h, 1, 0, 2)?;
            let joined = g.concat(&[head, tail], 1)?;
            let s = g.sum_axis(joined, 0)?;
            let m = g.mean_axis(joined, 0)?;
            let d = g.sub(s, m)?;
            let d = g.scale(d, 0.7);
            let r = g.constant(probe.clone());
            let r = g.slice(r, 0, 0, 1)?;
            let r = g.reshape(r, &[5, 3])?;
            let prod = g.mul(d, r)?;
            Ok(g.sum_all(prod))
        },
        opts(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn head_split_and_cross_entropy_gradients() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let w = store.add("w", uniform(&mut r, &[4, 5]));
    let input = uniform(&mut r, &[2, 3, 4]);
    let report = check_gradients(
        "heads+ce",
        &mut store,
        &input,
        |g, x| {
            let split = g.split_heads(x, 2)?;
            let t = g.transpose_last2(split)?;
            let back = g.transpose_last2(t)?;
            let sq = g.mul(back, split)?;
            let merged = g.merge_heads(sq, 2)?;
            let pooled = g.mean_axis(merged, 1)?;
            let wv = g.param(w)?;
            let logits = g.matmul(pooled, wv)?;
            g.cross_entropy(logits, &[1, 4])
        },
        opts(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform_logits = g.constant(Tensor::zeros([3, 4]));
    let loss = g.cross_entropy(uniform_logits, &[0, 1, 3]).unwrap();
    assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    let mut last = f64::INFINITY;
    for margin in [1.0, 10.0, 100.0, 1000.0] {
        let l = g.constant(Tensor::new([1, 2], vec![margin, 0.0]).unwrap());
        let v = g.cross_entropy(l, &[0]).unwrap();
        let v = g.value(v).data()[0];
        assert!(v <= last && v >= 0.0 && v.is_finite());
        last = v;
    }
    assert!(last < 1e-300);
    let l = g.constant(Tensor::zeros([1, 2]));
    assert!(matches!(g.cross_entropy(l, &[2]), Err(Error::Data(_))));
}

#[test]
fn timestamp_rows() {
    let enc = TimestampEncoding::new(8, 6);
    let tokens = Tensor::from_fn([3, 6], |i| (i as f64 * 0.37).cos());
    let at0 = enc.apply(&tokens, 0).unwrap();
    let at3 = enc.apply(&tokens, 3).unwrap();
    assert_ne!(at0, at3);
    // On a zero input the difference is the row itself, exactly.
    let zero = Tensor::zeros([3, 6]);
    let out = enc.apply(&zero, 5).unwrap();
    for tok in out.data().chunks(6) {
        assert_eq!(tok, enc.row(5).unwrap());
    }
    for (o, (i, c)) in at3.data().iter().zip(tokens.data().iter().zip(0..)) {
        assert_eq!(*o, i + enc.row(3).unwrap()[c % 6]);
    }
    let id = TimestampEncoding::zeros(8, 6).apply(&tokens, 7).unwrap();
    assert_eq!(id, tokens);
    assert!(matches!(enc.apply(&tokens, 8), Err(Error::Index { .. })));
    assert_eq!(TimestampEncoding::new(8, 6), enc);
}
