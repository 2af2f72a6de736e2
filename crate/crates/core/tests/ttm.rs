use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtok_core::encoders::{stack_grids, Encoder, EncoderConfig, TokenGrid, TtmSettings, Variant};
use vidtok_core::numerics::{Graph, ParamStore, Tensor};
use vidtok_core::synth::{group_recall_example, CueBook, SyntheticTaskSpec, TaskKind};
use vidtok_core::train::{gradcheck_encoder, GradCheckOptions};
use vidtok_core::ttm::{grouped_ttm_step, ttm_read, ttm_write, GroupedMemory, TtmParams};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid(r: &mut ChaCha8Rng, t: usize, n: usize, d: usize) -> TokenGrid {
    TokenGrid::from_fn(t, n, d, |_| r.random_range(-1.0..1.0)).unwrap()
}

fn build(tag: &str, t: usize, n: usize, d: usize, m: usize, seed: u64) -> (ParamStore, Encoder) {
    let cfg = EncoderConfig::for_tag(tag, t, n, d, m).unwrap();
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, &mut rng(seed)).unwrap();
    (store, enc)
}

#[test]
fn perturbing_one_token_touches_only_its_group() {
    let (t, n, d) = (4, 6, 8);
    let (store, enc) = build("grouped_ttm", t, n, d, 4, 1);
    let p = enc.ttm().unwrap();
    let mut r = rng(2);
    for _ in 0..20 {
        let grid = random_grid(&mut r, t, n, d);
        let j = r.random_range(0..n);
        let mut bumped = grid.clone();
        for f in 0..t {
            if r.random_bool(0.5) || f == 0 {
                for v in bumped.token_mut(f, j) {
                    *v += r.random_range(-0.5..0.5);
                }
            }
        }
        let a = GroupedMemory::run(p, &store, &grid).unwrap();
        let b = GroupedMemory::run(p, &store, &bumped).unwrap();
        for k in 0..n {
            if k == j {
                assert_ne!(a.group(k), b.group(k));
            } else {
                assert_eq!(a.group(k), b.group(k), "group {k} moved after touching {j}");
            }
        }
    }
}

#[test]
fn removing_the_recall_cue_changes_only_the_cued_group() {
    let spec = SyntheticTaskSpec::desk(TaskKind::GroupRecall, 8, 5);
    let cues = CueBook::new(spec.tokens, spec.dim);
    let (store, enc) = build("grouped_ttm", spec.frames, spec.tokens, spec.dim, 8, 3);
    let p = enc.ttm().unwrap();
    for i in 0..4 {
        let cued = group_recall_example(&spec, &cues, i, true).unwrap();
        let bare = group_recall_example(&spec, &cues, i, false).unwrap();
        let a = GroupedMemory::run(p, &store, &cued.grid).unwrap();
        let b = GroupedMemory::run(p, &store, &bare.grid).unwrap();
        for k in 0..spec.tokens {
            if k == cued.label {
                assert_ne!(a.group(k), b.group(k));
            } else {
                assert_eq!(a.group(k), b.group(k));
            }
        }
    }
}

#[test]
fn batched_step_matches_per_group_loop() {
    let (n, g_slots, d) = (5, 2, 8);
    let (store, enc) = build("grouped_ttm", 3, n, d, 4, 4);
    let p = enc.ttm().unwrap();
    let mut r = rng(5);
    let mem = Tensor::from_fn([2, n, g_slots, d], |_| r.random_range(-1.0..1.0));
    let frame = Tensor::from_fn([2, n, d], |_| r.random_range(-1.0..1.0));
    let mut g = Graph::with_params(&store);
    let (mv, fv) = (g.constant(mem.clone()), g.constant(frame.clone()));
    let out = grouped_ttm_step(&mut g, p, mv, fv, 1).unwrap();
    let batched = g.value(out).clone();
    let w = g_slots * d;
    for b in 0..2 {
        for j in 0..n {
            let m1 = Tensor::new(vec![1, 1, g_slots, d], mem.data()[(b * n + j) * w..][..w].to_vec()).unwrap();
            let f1 = Tensor::new(vec![1, 1, d], frame.data()[(b * n + j) * d..][..d].to_vec()).unwrap();
            let mut g = Graph::with_params(&store);
            let (mv, fv) = (g.constant(m1), g.constant(f1));
            let one = grouped_ttm_step(&mut g, p, mv, fv, 1).unwrap();
            for (x, y) in g.value(one).data().iter().zip(&batched.data()[(b * n + j) * w..][..w]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn frame_index_encoding_distinguishes_repeat_positions() {
    let (t, n, d) = (4, 3, 8);
    let (store, enc) = build("grouped_ttm", t, n, d, 4, 6);
    let mut r = rng(7);
    let f: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let early = [&f, &f, &x, &x];
    let late = [&x, &x, &f, &f];
    let grid = |frames: [&Vec<f64>; 4]| {
        TokenGrid::new(Tensor::new(vec![t, n, d], frames.iter().flat_map(|v| v.iter().copied()).collect()).unwrap())
            .unwrap()
    };
    let a = enc.encode(&store, &grid(early)).unwrap();
    let b = enc.encode(&store, &grid(late)).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) > 1e-9);
}

#[test]
fn frame_swap_changes_memory_encoders() {
    for tag in ["grouped_ttm", "vanilla_ttm", "grouped_ttm_nots"] {
        let (store, enc) = build(tag, 4, 3, 8, 4, 8);
        let grid = random_grid(&mut rng(9), 4, 3, 8);
        let a = enc.encode(&store, &grid).unwrap();
        let b = enc.encode(&store, &grid.swap_frames(0, 2).unwrap()).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) > 1e-9, "{tag} ignored frame order");
    }
}

#[test]
fn one_token_grouped_matches_vanilla_without_timestamps() {
    let mk = |tag: &str| {
        let (store, enc) = build(tag, 4, 1, 8, 2, 10);
        (store, enc)
    };
    let (vs, ve) = mk("vanilla_ttm");
    let (gs, ge) = mk("grouped_ttm_nots");
    assert_eq!(ve.ttm().unwrap().memory_slots(), ge.ttm().unwrap().memory_slots());
    let mut r = rng(11);
    for _ in 0..5 {
        let grid = random_grid(&mut r, 4, 1, 8);
        let a = ve.encode(&vs, &grid).unwrap();
        let b = ge.encode(&gs, &grid).unwrap();
        assert_eq!(a.tensor(), b.tensor());
    }
}

#[test]
fn single_frame_vanilla_reads_only_that_frame() {
    let (store, enc) = build("vanilla_ttm", 1, 3, 8, 4, 12);
    let grid = random_grid(&mut rng(13), 1, 3, 8);
    let a = enc.encode(&store, &grid).unwrap();
    let b = enc.encode(&store, &grid.clone()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.budget(), 4);
}

#[test]
fn full_scale_memory_has_512_slots() {
    for tag in ["grouped_ttm", "vanilla_ttm"] {
        let cfg = EncoderConfig::full_scale(tag, 32).unwrap();
        let mut store = ParamStore::new();
        let p = TtmParams::new(&cfg, &mut store, &mut rng(0)).unwrap();
        assert_eq!(p.memory_slots(), 512);
    }
    assert_eq!(GroupedMemory::zeros(128, 4, 1152).total_slots(), 512);
}

#[test]
fn grouped_gradcheck_small_read() {
    let mut cfg = EncoderConfig::for_tag("grouped_ttm", 3, 4, 8, 4).unwrap();
    cfg.variant = Variant::GroupedTtm(TtmSettings {
        read: 2,
        ..TtmSettings::desk(8, true)
    });
    let report = gradcheck_encoder(&cfg, 14, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn read_and_write_stay_in_candidate_hull() {
    let (store, enc) = build("vanilla_ttm", 3, 4, 8, 4, 15);
    let p = enc.ttm().unwrap();
    let mut r = rng(16);
    let k = p.memory_slots();
    for _ in 0..10 {
        let mem = Tensor::from_fn([1, k, 8], |_| r.random_range(-2.0..2.0));
        let inp = Tensor::from_fn([1, 4, 8], |_| r.random_range(-2.0..2.0));
        let mut g = Graph::with_params(&store);
        let (m, i) = (g.constant(mem.clone()), g.constant(inp.clone()));
        let (read, rw) = ttm_read(&mut g, p, m, i).unwrap();
        let (out, ww) = ttm_write(&mut g, p, m, read, i).unwrap();
        for w in [rw, ww] {
            for row in g.value(w).rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
        for c in 0..8 {
            let col = |t: &Tensor| t.rows().map(|row| row[c]).collect::<Vec<_>>();
            let mut cands = col(&mem);
            cands.extend(col(&inp));
            let lo = cands.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = cands.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in col(g.value(read)).into_iter().chain(col(g.value(out))) {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn memory_shape_is_fixed_across_steps() {
    let (store, enc) = build("grouped_ttm", 5, 3, 8, 4, 17);
    let p = enc.ttm().unwrap();
    let grid = random_grid(&mut rng(18), 5, 3, 8);
    let mut mem = GroupedMemory::zeros(3, 2, 8);
    for t in 0..5 {
        mem = mem.step(p, &store, &grid.frame_tensor(t), t).unwrap();
        assert_eq!(mem.tensor().shape(), [3, 2, 8]);
    }
    assert_eq!(mem, GroupedMemory::run(p, &store, &grid).unwrap());
}

#[test]
fn stepwise_inference_matches_single_tape() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for tag in ["grouped_ttm", "vanilla_ttm", "grouped_ttm_nots", "vanilla_ttm_ts"] {
        let cfg = EncoderConfig::for_tag(tag, 4, 5, 8, 3).unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut r).unwrap();
        let grids: Vec<TokenGrid> = (0..3).map(|_| random_grid(&mut r, 4, 5, 8)).collect();
        let refs: Vec<&TokenGrid> = grids.iter().collect();
        let mut g = Graph::with_params(&store);
        let x = g.constant(stack_grids(refs.iter().copied()).unwrap());
        let taped = enc.forward(&mut g, x).unwrap();
        let taped = g.value(taped).clone();
        let stepwise = enc.encode_batch(&store, &refs).unwrap();
        for (i, v) in stepwise.iter().enumerate() {
            assert_eq!(v.tensor().data(), &taped.data()[i * 24..(i + 1) * 24], "{tag}");
        }
    }
}
