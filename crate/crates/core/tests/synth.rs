use proptest::prelude::*;
use vidtok_core::encoders::{pool_temporal, PoolMode, TokenGrid};
use vidtok_core::numerics::{Graph, Tensor};
use vidtok_core::synth::*;
use vidtok_core::Error;

fn small_grid(t: usize, n: usize, d: usize) -> TokenGrid {
    TokenGrid::from_fn(t, n, d, |i| (i as f64).sin() * 1e3 + 0.5).unwrap()
}

fn field_of(e: Error) -> &'static str {
    match e {
        Error::Format { field, .. } => field,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn roundtrip_with_and_without_label() {
    let grid = small_grid(2, 3, 4);
    for label in [None, Some(5)] {
        let bytes = encode_grid(&grid, label).unwrap();
        let header = decode_header(&bytes).unwrap();
        assert_eq!(bytes.len(), header.header_len() + header.payload_len());
        let (back, l) = decode_grid(&bytes).unwrap();
        assert_eq!(back, grid);
        assert_eq!(l, label);
        assert_eq!(encode_grid(&back, l).unwrap(), bytes);
    }
}

#[test]
fn desk_grid_payload_is_65536_bytes() {
    let grid = TokenGrid::new(Tensor::zeros([8, 16, 64])).unwrap();
    let bytes = encode_grid(&grid, Some(1)).unwrap();
    let h = decode_header(&bytes).unwrap();
    assert_eq!(h.payload_len(), 65536);
    assert_eq!(bytes.len(), h.header_len() + 65536);
    assert_eq!(&bytes[..4], MAGIC);
}

#[test]
fn payload_is_little_endian_frame_major() {
    let grid = small_grid(2, 2, 2);
    let bytes = encode_grid(&grid, None).unwrap();
    let h = decode_header(&bytes).unwrap();
    let payload = &bytes[h.header_len()..];
    for (i, v) in grid.tensor().data().iter().enumerate() {
        assert_eq!(&payload[i * 8..i * 8 + 8], &v.to_le_bytes());
    }
}

#[test]
fn corrupt_files_name_the_field() {
    let grid = small_grid(2, 3, 4);
    let good = encode_grid(&grid, Some(1)).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(field_of(decode_grid(&bad).unwrap_err()), "magic");

    let mut bad = good.clone();
    bad[4] = 9;
    assert_eq!(field_of(decode_grid(&bad).unwrap_err()), "version");

    let mut bad = good.clone();
    bad[20] = 7;
    assert_eq!(field_of(decode_grid(&bad).unwrap_err()), "dtype");

    let mut bad = good.clone();
    bad[21] = 3;
    assert_eq!(field_of(decode_grid(&bad).unwrap_err()), "labelled");

    assert_eq!(field_of(decode_grid(&good[..good.len() - 1]).unwrap_err()), "payload");
    let mut long = good.clone();
    long.push(0);
    assert_eq!(field_of(decode_grid(&long).unwrap_err()), "payload");
    assert_eq!(field_of(decode_grid(&good[..10]).unwrap_err()), "frames");
}

#[test]
fn files_and_datasets_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = small_grid(3, 2, 5);
    let path = dir.path().join("one.tgrd");
    save_grid(&path, &grid, Some(2)).unwrap();
    assert_eq!(load_grid(&path).unwrap(), (grid, Some(2)));
    assert!(matches!(load_grid(dir.path().join("none.tgrd")), Err(Error::Io { .. })));

    let spec = SyntheticTaskSpec {
        frames: 3,
        tokens: 4,
        dim: 8,
        ..SyntheticTaskSpec::desk(TaskKind::SpatialLocate, 12, 4)
    };
    let data = generate(&spec).unwrap();
    let ds = dir.path().join("ds");
    let manifest = save_dataset(&ds, &spec, &data).unwrap();
    assert_eq!(manifest.files.len(), 12);
    let (m2, back) = load_dataset(&ds).unwrap();
    assert_eq!(m2, manifest);
    assert_eq!(back, data);
}

#[test]
fn swapped_cue_frames_have_equal_mean_pool() {
    let spec = SyntheticTaskSpec::desk(TaskKind::TemporalOrder, 20, 9);
    let cues = CueBook::new(spec.tokens, spec.dim);
    for i in 0..20 {
        let (ex, [ta, tb]) = temporal_order_example(&spec, &cues, i).unwrap();
        let swapped = ex.grid.swap_frames(ta, tb).unwrap();
        let pool = |grid: &TokenGrid| {
            let mut g = Graph::new();
            let x = g.constant(grid.batch_of_one().unwrap());
            let y = pool_temporal(&mut g, x, PoolMode::Mean).unwrap();
            g.value(y).clone()
        };
        assert!(pool(&ex.grid).max_abs_diff(&pool(&swapped)) <= 1e-12);
    }
}

#[test]
fn temporal_order_label_matches_cue_order() {
    let spec = SyntheticTaskSpec::desk(TaskKind::TemporalOrder, 40, 2);
    let cues = CueBook::new(spec.tokens, spec.dim);
    for i in 0..40 {
        let (ex, [ta, tb]) = temporal_order_example(&spec, &cues, i).unwrap();
        assert_ne!(ta, tb);
        assert_eq!(ex.label == 1, ta < tb);
    }
}

#[test]
fn generation_is_pure_in_spec_and_seed() {
    for task in [TaskKind::TemporalOrder, TaskKind::SpatialLocate, TaskKind::GroupRecall] {
        let spec = SyntheticTaskSpec::desk(task, 33, 11);
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        let other = generate(&SyntheticTaskSpec { seed: 12, ..spec.clone() }).unwrap();
        assert_ne!(a, other);
        let k = spec.classes();
        let mut counts = vec![0usize; k];
        a.iter().for_each(|e| counts[e.label] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{task:?} {counts:?}");
    }
}

#[test]
fn blank_grids_are_zero() {
    let ex = blank_example(2, 3, 4, 1).unwrap();
    assert!(ex.grid.tensor().data().iter().all(|&v| v == 0.0));
    assert_eq!(ex.label, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_grid_roundtrips(t in 1usize..4, n in 1usize..5, d in 1usize..6, label in proptest::option::of(0usize..100), seed in any::<u64>()) {
        let grid = TokenGrid::from_fn(t, n, d, |i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).unwrap();
        let bytes = encode_grid(&grid, label).unwrap();
        let (back, l) = decode_grid(&bytes).unwrap();
        prop_assert_eq!(back.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        grid.tensor().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(l, label);
    }
}
