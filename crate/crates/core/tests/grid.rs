use proptest::prelude::*;
use texsynth::grid::*;
use texsynth::{Grid, LabelMap, Rng};

/// Frequency response of a symmetric tap vector at `f` cycles per sample.
fn response(taps: &[f64], f: f64) -> f64 {
    let r = (taps.len() / 2) as isize;
    taps.iter()
        .enumerate()
        .map(|(i, t)| t * (2.0 * std::f64::consts::PI * f * (i as isize - r) as f64).cos())
        .sum()
}

fn f32_grid(h: usize, w: usize, c: usize, seed: u64) -> Grid {
    let mut rng = Rng::new(seed);
    Grid::from_fn(h, w, c, |_, _, _| (rng.normal() * 3.0) as f32 as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_raw_round_trips_bit_for_bit(h in 1usize..24, w in 1usize..24, c in 1usize..5, seed: u64) {
        let g = f32_grid(h, w, c, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txf1");
        write_grid(&path, &g, GridFormat::TensorRaw).unwrap();
        let back = read_grid(&path, GridFormat::TensorRaw).unwrap();
        prop_assert_eq!(back.shape(), g.shape());
        for (a, b) in back.data().iter().zip(g.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn png8_round_trips_within_one_level(h in 1usize..20, w in 1usize..20, c in prop::sample::select(vec![1usize, 3, 4]), seed: u64) {
        let mut rng = Rng::new(seed);
        let g = Grid::from_fn(h, w, c, |_, _, _| rng.uniform());
        let back = decode_png8(&encode_png8(&g).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), g.shape());
        prop_assert!(back.max_abs_diff(&g).unwrap() <= 1.0 / 255.0);
    }

    #[test]
    fn label_png_preserves_labels(h in 1usize..30, w in 1usize..30, k in 1u8..8, seed: u64) {
        let mut rng = Rng::new(seed);
        let labels: Vec<u8> = (0..h * w).map(|_| rng.below(k as usize + 1) as u8).collect();
        let l = LabelMap::new(h, w, k, labels).unwrap();
        let back = decode_label_png(&encode_label_png(&l).unwrap()).unwrap();
        prop_assert_eq!(back.labels(), l.labels());
    }

    #[test]
    fn lowpass_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, cutoff in 0.05f64..0.5, seed: u64) {
        let mut rng = Rng::new(seed);
        let x = Grid::standard_normal(20, 17, 2, &mut rng);
        let y = Grid::standard_normal(20, 17, 2, &mut rng);
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = lanczos_lowpass(&combo, cutoff).unwrap();
        let (lx, ly) = (lanczos_lowpass(&x, cutoff).unwrap(), lanczos_lowpass(&y, cutoff).unwrap());
        let rhs = lx.zip_map(&ly, |p, q| a * p + b * q).unwrap();
        let scale = rhs.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9 * scale);
    }

    #[test]
    fn kernel_taps_sum_to_one(cutoff in 0.01f64..=0.5) {
        let taps = lanczos_kernel(cutoff).unwrap();
        prop_assert!((taps.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(taps.len() % 2, 1);
    }

    #[test]
    fn rng_streams_are_pure(seed: u64) {
        let a = Grid::standard_normal(8, 8, 2, &mut Rng::new(seed));
        let b = Grid::standard_normal(8, 8, 2, &mut Rng::new(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn same_size_resample_is_identity(h in 1usize..20, w in 1usize..20, seed: u64) {
        let g = Grid::standard_normal(h, w, 2, &mut Rng::new(seed));
        for mode in [ResampleMode::Nearest, ResampleMode::BoxDown, ResampleMode::Lanczos] {
            prop_assert_eq!(&resample(&g, h, w, mode).unwrap(), &g);
        }
    }
}

#[test]
fn nyquist_checkerboard_is_suppressed() {
    let g = Grid::from_fn(
        64,
        64,
        1,
        |y, x, _| if (y + x) % 2 == 0 { 1.0 } else { -1.0 },
    );
    let taps = lanczos_kernel(0.1).unwrap();
    // Separable, so the 2-D gain at (0.5, 0.5) is the 1-D gain squared.
    let predicted = response(&taps, 0.5).powi(2);
    assert!(predicted.abs() < 0.05);
    let out = lanczos_lowpass(&g, 0.1).unwrap();
    let interior = (10..54).flat_map(|y| (10..54).map(move |x| (y, x)));
    for (y, x) in interior {
        assert!(out.get(y, x, 0).abs() < 0.05);
        assert!((out.get(y, x, 0).abs() - predicted.abs()).abs() < 1e-9);
    }
}

#[test]
fn white_noise_variance_matches_kernel_energy() {
    let taps = lanczos_kernel(0.1).unwrap();
    let energy_1d: f64 = taps.iter().map(|t| t * t).sum();
    let expected = energy_1d * energy_1d;
    let mut measured = 0.0;
    for seed in 0..100 {
        let g = Grid::standard_normal(64, 64, 1, &mut Rng::new(seed));
        let out = lanczos_lowpass(&g, 0.1).unwrap();
        let interior = out.crop(16, 16, 32, 32).unwrap();
        let v: f64 = interior.data().iter().map(|v| v * v).sum::<f64>() / interior.len() as f64;
        measured += v / 100.0;
    }
    assert!(
        (measured / expected - 1.0).abs() <= 0.1,
        "{measured} vs {expected}"
    );
}

#[test]
fn constant_grids_survive_filtering_and_resampling() {
    let g = Grid::filled(30, 30, 3, 5.0);
    for v in lanczos_lowpass(&g, 0.2).unwrap().data() {
        assert!((v - 5.0).abs() < 1e-12);
    }
    let seven = Grid::filled(32, 32, 1, 7.0);
    assert_eq!(
        resample(&seven, 64, 64, ResampleMode::Nearest).unwrap(),
        Grid::filled(64, 64, 1, 7.0)
    );
    let two = Grid::from_vec(2, 2, 1, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
    assert_eq!(
        resample(&two, 1, 1, ResampleMode::BoxDown).unwrap().data(),
        &[2.0]
    );
}

#[test]
fn label_maps_refuse_interpolation() {
    let l = LabelMap::uniform(8, 8, 3, 2).unwrap();
    assert!(l.resample(16, 16, ResampleMode::Lanczos).is_err());
    assert!(l.resample(16, 16, ResampleMode::BoxDown).is_err());
    assert_eq!(
        l.resample(16, 16, ResampleMode::Nearest).unwrap(),
        LabelMap::uniform(16, 16, 3, 2).unwrap()
    );
}

#[test]
fn truncated_and_corrupt_containers_are_malformed() {
    let bytes = encode_txf1(&Grid::zeros(4, 4, 2));
    for cut in [0, 3, 12, bytes.len() - 1] {
        assert!(
            matches!(decode_txf1(&bytes[..cut]), Err(GridError::Malformed(_))),
            "cut {cut}"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_txf1(&bad), Err(GridError::Malformed(_))));
    // Dimensions whose product overflows.
    let mut huge = TXF1_MAGIC.to_vec();
    for _ in 0..3 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(decode_txf1(&huge), Err(GridError::Malformed(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txf1");
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        read_grid(&path, GridFormat::TensorRaw),
        Err(GridError::Malformed(_))
    ));
    assert!(decode_png8(b"\x89PNG\r\n\x1a\n").is_err());
}

#[test]
fn png8_rejects_unsupported_channel_counts() {
    assert!(encode_png8(&Grid::zeros(4, 4, 2)).is_err());
    assert!(encode_png8(&Grid::zeros(4, 4, 5)).is_err());
}

#[test]
fn non_finite_input_is_rejected_by_the_filter() {
    let mut g = Grid::zeros(4, 4, 1);
    g.set(1, 1, 0, f64::NAN);
    assert!(lanczos_lowpass(&g, 0.1).is_err());
    assert!(lanczos_kernel(0.0).is_err());
    assert!(lanczos_kernel(0.6).is_err());
}
