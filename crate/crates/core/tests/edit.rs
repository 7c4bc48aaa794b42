use proptest::prelude::*;
use texsynth::diffusion::{
    sample_euler, Counting, ExemplarConfig, ExemplarPatch, GaussianAnalytic, GaussianMixture,
    SigmaSchedule,
};
use texsynth::edit::*;
use texsynth::{BinaryMask, Grid, LabelMap, Rng};

fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| {
        (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
    })
}

fn condition_from(mask: &BinaryMask, label: u8) -> LabelMap {
    LabelMap::new(
        mask.height(),
        mask.width(),
        label,
        mask.bits()
            .iter()
            .map(|&b| if b { label } else { 0 })
            .collect(),
    )
    .unwrap()
}

fn mixture() -> GaussianMixture {
    GaussianMixture::new(vec![vec![0.0], vec![2.0]], 0.3)
}

fn mode_a(h: usize, w: usize, seed: u64) -> Grid {
    Grid::standard_normal(h, w, 1, &mut Rng::new(seed)).map(|v| 0.3 * v)
}

fn round_trip_mae(d: &dyn texsynth::diffusion::Denoiser, x: &Grid, steps: usize, fp: usize) -> f64 {
    let t = invert(d, x, steps, fp).unwrap();
    sample_euler(d, &t.z_n, None, &t.schedule, 1.0)
        .unwrap()
        .mean_abs_diff(x)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mix_factor_is_monotone_with_exact_ends(n in 1usize..500, alpha in 0.01f64..5.0) {
        prop_assert_eq!(mix_factor(0, n, alpha), 0.0);
        prop_assert_eq!(mix_factor(n, n, alpha), 1.0);
        for i in 1..=n {
            prop_assert!(mix_factor(i, n, alpha) > mix_factor(i - 1, n, alpha));
        }
    }

    #[test]
    fn mix_follows_its_formula(seed: u64, i in 0usize..=20, alpha in 0.05f64..3.0) {
        let mut rng = Rng::new(seed);
        let a = Grid::standard_normal(3, 4, 2, &mut rng);
        let b = Grid::standard_normal(3, 4, 2, &mut rng);
        let m = mix(&a, &b, i, 20, alpha).unwrap();
        let f = (i as f64 / 20.0).powf(alpha);
        for ((mv, av), bv) in m.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!((mv - (av + (bv - av) * f)).abs() <= 1e-12);
        }
    }
}

#[test]
fn half_way_factor_value() {
    assert!((mix_factor(5, 10, DEFAULT_ALPHA) - 0.8123).abs() < 1e-4);
}

#[test]
fn background_replays_while_the_disc_moves_to_the_new_mode() {
    let d = mixture();
    let x = mode_a(24, 24, 9);
    let t = invert(&d, &x, 40, 4).unwrap();
    let mask = disc(24, 24, 11.5, 11.5, 6.0);
    let out = regenerate_with_edit(
        &d,
        &t,
        &EditRequest::new(condition_from(&mask, 1), mask.clone()),
    )
    .unwrap();
    let original = t.reconstruct().unwrap();
    let (mut inside, mut n) = (0.0, 0);
    for y in 0..24 {
        for xx in 0..24 {
            if mask.get(y, xx) {
                inside += out.get(y, xx, 0);
                n += 1;
            } else {
                assert!((out.get(y, xx, 0) - original.get(y, xx, 0)).abs() <= 1e-6);
            }
        }
    }
    let before: f64 = (0..24 * 24)
        .filter(|&p| mask.bits()[p])
        .map(|p| x.data()[p])
        .sum::<f64>()
        / n as f64;
    assert!(
        inside / n as f64 > before + 1.0,
        "{} vs {before}",
        inside / n as f64
    );
}

#[test]
fn empty_brush_is_free_and_exact() {
    let d = Counting::new(mixture());
    let x = mode_a(20, 20, 2);
    let t = invert(&d, &x, 10, 2).unwrap();
    d.reset();
    let req = EditRequest::new(
        LabelMap::uniform(20, 20, 1, 1).unwrap(),
        BinaryMask::empty(20, 20),
    );
    let out = localized_edit(&d, &x, &t, &req).unwrap();
    assert_eq!(d.calls(), 0);
    assert!(out.patch.is_none());
    assert_eq!(out.image, x);
}

#[test]
fn edit_cost_is_bounded_by_the_patch_not_the_image() {
    let side = 2048;
    let steps = 2;
    let schedule = SigmaSchedule::new(steps).unwrap();
    let z = Grid::zeros(side, side, 1);
    let t = Trajectory::new(
        schedule,
        vec![z.clone(); steps],
        z.clone(),
        Provenance::Generation,
    )
    .unwrap();
    let mask = disc(side, side, 1000.0, 900.0, 30.0);
    let d = Counting::new(mixture());
    let out = localized_edit(
        &d,
        &z,
        &t,
        &EditRequest::new(condition_from(&mask, 1), mask),
    )
    .unwrap();
    let p = out.patch.unwrap();
    assert_eq!((p.height, p.width), (MIN_EDIT_PATCH, MIN_EDIT_PATCH));
    assert_eq!(d.max_area(), MIN_EDIT_PATCH * MIN_EDIT_PATCH);
    assert_eq!(d.pixels(), d.calls() * MIN_EDIT_PATCH * MIN_EDIT_PATCH);
}

#[test]
fn disjoint_edits_commute() {
    let d = mixture();
    let x = mode_a(40, 40, 6);
    let t = invert(&d, &x, 12, 2).unwrap();
    let ma = disc(40, 40, 8.0, 8.0, 4.0);
    let mb = disc(40, 40, 30.0, 28.0, 5.0);
    let ra = EditRequest::new(condition_from(&ma, 1), ma);
    let rb = EditRequest::new(condition_from(&mb, 1), mb);
    let ab = localized_edit(&d, &localized_edit(&d, &x, &t, &ra).unwrap().image, &t, &rb)
        .unwrap()
        .image;
    let ba = localized_edit(&d, &localized_edit(&d, &x, &t, &rb).unwrap().image, &t, &ra)
        .unwrap()
        .image;
    assert_eq!(ab, ba);
}

#[test]
fn localized_edit_never_touches_pixels_outside_the_mask() {
    let d = mixture();
    let x = mode_a(30, 50, 12);
    let t = invert(&d, &x, 10, 2).unwrap();
    let m = disc(30, 50, 15.0, 40.0, 6.0);
    let out = localized_edit(
        &d,
        &x,
        &t,
        &EditRequest::new(condition_from(&m, 1), m.clone()),
    )
    .unwrap()
    .image;
    for (p, bit) in m.bits().iter().enumerate() {
        if !bit {
            assert_eq!(out.data()[p].to_bits(), x.data()[p].to_bits());
        }
    }
}

#[test]
fn round_trip_error_shrinks_with_steps() {
    let d = GaussianAnalytic::new(vec![0.2], 1.0);
    let x = Grid::standard_normal(16, 16, 1, &mut Rng::new(21)).map(|v| 0.2 + v);
    let errs: Vec<f64> = [10, 20, 40, 80]
        .iter()
        .map(|&n| round_trip_mae(&d, &x, n, DEFAULT_FP_ITERS))
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0], "{errs:?}");
    }
    assert!(errs[2] <= 1e-3, "{errs:?}");
    assert!(errs[0] > errs[2]);
}

#[test]
fn more_fixed_point_passes_help_a_nonlinear_denoiser() {
    // The unconditional mixture posterior mean is nonlinear in z.
    let d = GaussianMixture::new(vec![vec![0.0], vec![1.0]], 0.3);
    for seed in 0..3 {
        let x = Grid::standard_normal(12, 12, 1, &mut Rng::new(seed)).map(|v| 0.5 + 0.5 * v);
        for steps in [10, 20, 40] {
            let (e1, e4) = (
                round_trip_mae(&d, &x, steps, 1),
                round_trip_mae(&d, &x, steps, 4),
            );
            assert!(e4 <= e1, "seed {seed}, {steps} steps: {e4} vs {e1}");
        }
    }
}

#[test]
fn exemplar_inversion_replays_to_its_input() {
    let img = Grid::from_fn(16, 16, 1, |y, x, _| {
        0.5 + 0.3 * ((x as f64 * 0.9).sin() * (y as f64 * 0.6).cos())
    });
    let d = ExemplarPatch::new(
        &[(img.clone(), LabelMap::uniform(16, 16, 0, 0).unwrap())],
        ExemplarConfig::default(),
    )
    .unwrap();
    let x = img.crop(2, 2, 12, 12).unwrap();
    for fp in [1, 4] {
        let t = invert(&d, &x, 20, fp).unwrap();
        assert!(t.reconstruct().unwrap().max_abs_diff(&x).unwrap() < 1e-9);
    }
}

#[test]
fn transfer_matches_a_localized_edit_for_in_distribution_targets() {
    let d = mixture();
    let x = mode_a(16, 16, 31);
    let m = disc(16, 16, 8.0, 8.0, 4.0);
    let req = EditRequest::new(condition_from(&m, 1), m.clone());
    let (moved, traj) = transfer_feature(&d, &x, &req, TRANSFER_STEPS).unwrap();
    assert_eq!(traj.steps(), TRANSFER_STEPS);
    let local = localized_edit(&d, &x, &traj, &req).unwrap().image;
    assert!(moved.max_abs_diff(&local).unwrap() <= 1e-4);
}

#[test]
fn transfer_with_an_empty_mask_returns_the_target() {
    let d = mixture();
    let x = mode_a(12, 12, 4);
    let req = EditRequest::new(
        LabelMap::uniform(12, 12, 1, 0).unwrap(),
        BinaryMask::empty(12, 12),
    );
    let (out, _) = transfer_feature(&d, &x, &req, 60).unwrap();
    assert!(out.mean_abs_diff(&x).unwrap() <= 1e-3);
}

#[test]
fn transferred_feature_takes_the_conditioned_mode() {
    let d = mixture();
    let x = mode_a(20, 20, 17);
    let m = disc(20, 20, 10.0, 10.0, 5.0);
    let (out, _) = transfer_feature(
        &d,
        &x,
        &EditRequest::new(condition_from(&m, 1), m.clone()),
        80,
    )
    .unwrap();
    let mean = |inside: bool| {
        let v: Vec<f64> = (0..400)
            .filter(|&p| m.bits()[p] == inside)
            .map(|p| out.data()[p])
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((mean(true) - 2.0).abs() < 0.35, "inside {}", mean(true));
    assert!(mean(false).abs() < 0.1, "outside {}", mean(false));
}

#[test]
fn trajectories_survive_the_store() {
    let d = GaussianAnalytic::new(vec![0.0, 0.5], 0.7);
    let x = Grid::standard_normal(6, 7, 2, &mut Rng::new(5));
    let t = invert(&d, &x, 5, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = TrajectoryStore::open(dir.path()).unwrap();
    assert!(!store.contains("img-1"));
    assert!(matches!(
        store.load("img-1"),
        Err(EditError::NoTrajectory(_))
    ));
    store.save("img-1", &t).unwrap();
    assert!(store.contains("img-1"));
    let back = store.load("img-1").unwrap();
    let f32ed = |g: &Grid| g.map(|v| v as f32 as f64);
    assert_eq!(back.schedule, t.schedule);
    assert_eq!(back.provenance, Provenance::Inversion);
    assert_eq!(back.z_n, f32ed(&t.z_n));
    for (a, b) in back.eps_history.iter().zip(&t.eps_history) {
        assert_eq!(a, &f32ed(b));
    }
    for k in 0..5 {
        assert!(dir
            .path()
            .join("img-1")
            .join(format!("eps_{k}.txf1"))
            .is_file());
    }
    assert!(dir.path().join("img-1/z_N.txf1").is_file());
    // Overwrites replace atomically and leave no staging directories behind.
    store.save("img-1", &t).unwrap();
    let leftovers = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with('.')
        })
        .count();
    assert_eq!(leftovers, 0);
    assert!(store.save("../evil", &t).is_err());
    store.remove("img-1").unwrap();
    assert!(!store.contains("img-1"));
}

#[test]
fn malformed_requests_are_rejected() {
    let d = mixture();
    let t = invert(&d, &mode_a(8, 8, 1), 4, 1).unwrap();
    let mut req = EditRequest::new(
        LabelMap::uniform(8, 8, 1, 1).unwrap(),
        BinaryMask::full(8, 9),
    );
    assert!(regenerate_with_edit(&d, &t, &req).is_err());
    req.edit_mask = BinaryMask::full(8, 8);
    req.alpha = 0.0;
    assert!(regenerate_with_edit(&d, &t, &req).is_err());
    req.alpha = DEFAULT_ALPHA;
    req.steps = Some(INTERACTIVE_STEPS);
    assert!(matches!(
        regenerate_with_edit(&d, &t, &req),
        Err(EditError::StepMismatch { .. })
    ));
}
