use proptest::prelude::*;
use texsynth::cluster::*;
use texsynth::fixture::descriptor_fixture;
use texsynth::{BinaryMask, Grid, LabelMap, Rng};

fn random_mask(h: usize, w: usize, density: f64, seed: u64) -> BinaryMask {
    // Blocky masks so that some components survive the erosion.
    let mut rng = Rng::new(seed);
    let cells: Vec<bool> = (0..(h / 3 + 1) * (w / 3 + 1))
        .map(|_| rng.uniform() < density)
        .collect();
    BinaryMask::from_fn(h, w, |y, x| cells[(y / 3) * (w / 3 + 1) + x / 3])
}

fn clustered_descriptors(seed: u64, groups: &[usize], dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for &n in groups {
        let centre: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for _ in 0..n {
            out.push(centre.iter().map(|c| c + 0.1 * rng.normal()).collect());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn size_filter_is_idempotent(h in 4usize..40, w in 4usize..40, density in 0.1f64..0.9, seed: u64) {
        let m = random_mask(h, w, density, seed);
        let once = size_filter(&m, MIN_REGION_PIXELS);
        prop_assert_eq!(size_filter(&once, MIN_REGION_PIXELS), once);
    }

    #[test]
    fn regions_are_large_disjoint_and_inside_the_cleaned_mask(h in 4usize..40, w in 4usize..40, density in 0.1f64..0.9, seed: u64) {
        let m = random_mask(h, w, density, seed);
        let cleaned = cleanup(&m);
        let comps = connected_components(&m, 3);
        let mut seen = vec![false; h * w];
        for c in &comps {
            prop_assert_eq!(c.image_id, 3);
            prop_assert!(c.len() >= MIN_REGION_PIXELS);
            for &p in &c.pixels {
                prop_assert!(cleaned.bits()[p]);
                prop_assert!(!seen[p]);
                seen[p] = true;
            }
        }
        prop_assert_eq!(seen.iter().filter(|&&s| s).count(), cleaned.count());
    }

    #[test]
    fn descriptors_have_unit_norm(seed: u64, c in 1usize..6) {
        let mut rng = Rng::new(seed);
        let features = Grid::from_fn(10, 10, c, |_, _, _| rng.normal());
        let scores = Grid::from_fn(10, 10, 1, |_, _, _| rng.uniform() * 5.0);
        let mask = BinaryMask::from_fn(10, 10, |y, x| (1..9).contains(&y) && (2..8).contains(&x));
        for comp in connected_components(&mask, 0) {
            let r = region_descriptor(&comp, &features, &scores).unwrap();
            let n: f64 = r.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mined_pairs_respect_their_invariants(seed: u64, a in 2usize..30, b in 1usize..8, c in 1usize..8, k in 1usize..4) {
        let d = clustered_descriptors(seed, &[a, b, c], 6);
        let m = d.len();
        let set = mine_pairs(&d, &PairMiningConfig::new(k), &mut Rng::new(seed ^ 1)).unwrap();
        // Positives: unordered, unique, no self pairs.
        let mut pos = set.positives.clone();
        pos.sort();
        pos.dedup();
        prop_assert_eq!(pos.len(), set.positives.len());
        for &(x, y) in &set.positives {
            prop_assert!(x < y && y < m);
        }
        // Negatives: no repeats, no self pairs, never a positive, never among the anchor's closest half.
        let mut neg = set.negatives.clone();
        neg.sort();
        neg.dedup();
        prop_assert_eq!(neg.len(), set.negatives.len());
        let dist = |x: usize, y: usize| {
            let dot: f64 = d[x].iter().zip(&d[y]).map(|(p, q)| p * q).sum();
            let nx = d[x].iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = d[y].iter().map(|v| v * v).sum::<f64>().sqrt();
            1.0 - dot / (nx * ny)
        };
        let discard = ((m - 1) as f64 * DEFAULT_DISCARD_FRACTION).floor() as usize;
        for &(x, y) in &set.negatives {
            prop_assert!(x != y);
            prop_assert!(!set.positives.contains(&(x.min(y), x.max(y))));
            let dy = dist(x, y);
            let rank = (0..m).filter(|&z| z != x && (dist(x, z), z) < (dy, y)).count();
            prop_assert!(rank >= discard, "negative {y} of {x} has rank {rank}");
        }
        // Round robin: per anchor, no precluster falls more than one draw behind unless it ran dry.
        let kp = set.precluster.iter().max().map_or(1, |v| v + 1);
        for (anchor, negs) in set.negatives_by_anchor().iter().enumerate() {
            let mut counts = vec![0usize; kp];
            for &n in negs {
                counts[set.precluster[n]] += 1;
            }
            let available: Vec<usize> = (0..kp)
                .map(|cl| {
                    (0..m)
                        .filter(|&z| z != anchor && set.precluster[z] == cl)
                        .filter(|&z| !set.positives.contains(&(anchor.min(z), anchor.max(z))))
                        .filter(|&z| {
                            let dz = dist(anchor, z);
                            let closer = (0..m).filter(|&q| q != anchor && (dist(anchor, q), q) < (dz, z)).count();
                            closer >= discard
                        })
                        .count()
                })
                .collect();
            let top = *counts.iter().max().unwrap();
            for cl in 0..kp {
                prop_assert!(counts[cl] == available[cl] || counts[cl] + 1 >= top, "anchor {anchor}: {counts:?} of {available:?}");
            }
            prop_assert!(negs.len() <= set.negatives_per_anchor);
        }
    }

    #[test]
    fn info_nce_ignores_the_order_of_negatives(pos in -1.0f64..1.0, negs in prop::collection::vec(-1.0f64..1.0, 1..20), tau in 0.05f64..2.0, seed: u64) {
        let mut shuffled = negs.clone();
        Rng::new(seed).shuffle(&mut shuffled);
        prop_assert_eq!(info_nce(pos, &negs, tau).to_bits(), info_nce(pos, &shuffled, tau).to_bits());
    }

    #[test]
    fn labels_stay_inside_the_masks(seed: u64, k in 1usize..4) {
        let mut rng = Rng::new(seed);
        let shape = EmbedderShape { in_channels: 4, hidden: 6, out_channels: 3 };
        let embedder = Embedder::random(shape, &mut rng);
        let features: Vec<Grid> = (0..2).map(|_| Grid::from_fn(12, 12, 4, |_, _, _| rng.normal())).collect();
        let masks: Vec<BinaryMask> = (0..2).map(|i| random_mask(12, 12, 0.5, seed.wrapping_add(i))).collect();
        let total: usize = masks.iter().map(BinaryMask::count).sum();
        prop_assume!(total >= k);
        let labels = label_pixels(&embedder, &features, &masks, k, &mut rng).unwrap();
        for (l, m) in labels.iter().zip(&masks) {
            for (lab, bit) in l.labels().iter().zip(m.bits()) {
                prop_assert_eq!(*lab != 0, *bit);
                prop_assert!((*lab as usize) <= k);
            }
        }
    }

    #[test]
    fn metrics_ignore_label_permutations(seed: u64, perm_seed: u64) {
        let mut rng = Rng::new(seed);
        let truth: Vec<u8> = (0..200).map(|_| rng.below(4) as u8).collect();
        let pred: Vec<u8> = truth.iter().map(|&t| if rng.uniform() < 0.3 { rng.below(4) as u8 } else { t }).collect();
        let mut perm: Vec<u8> = (1..4).collect();
        Rng::new(perm_seed).shuffle(&mut perm);
        let permuted: Vec<u8> = pred.iter().map(|&p| if p == 0 { 0 } else { perm[p as usize - 1] }).collect();
        let lm = |v: Vec<u8>| LabelMap::new(10, 20, 3, v).unwrap();
        let t = [lm(truth)];
        let a = evaluate_labels(&[lm(pred)], &t).unwrap();
        let b = evaluate_labels(&[lm(permuted)], &t).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
    }
}

#[test]
fn closed_form_loss() {
    assert!((info_nce(1.0, &[0.0], 1.0) - 0.3133).abs() < 1e-4);
    assert_eq!(info_nce(0.3, &[], 0.07), 0.0);
}

#[test]
fn gradients_match_central_differences_on_a_ten_parameter_probe() {
    let mut rng = Rng::new(77);
    let probe = LinearProbe::random(2, 5, &mut rng);
    assert_eq!(probe.weights.len(), 10);
    let inputs: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..5).map(|_| rng.normal()).collect())
        .collect();
    let d = clustered_descriptors(3, &[3, 3], 5);
    let pairs = mine_pairs(
        &d,
        &PairMiningConfig {
            positives: 2,
            ..PairMiningConfig::new(2)
        },
        &mut Rng::new(5),
    )
    .unwrap();
    let err = gradient_check(&probe, &inputs, &pairs, 0.5, 1e-5);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn stratification_balances_the_fixture_preclusters() {
    let f = descriptor_fixture(0);
    let set = mine_pairs(&f.descriptors, &PairMiningConfig::new(3), &mut Rng::new(1)).unwrap();
    // The largest precluster holds the normal descriptors.
    let mut sizes = [0usize; 3];
    for &c in &set.precluster {
        sizes[c] += 1;
    }
    let normal = (0..3).max_by_key(|&c| sizes[c]).unwrap();
    assert_eq!(sizes[normal], 90);
    let uniform = mine_pairs(
        &f.descriptors,
        &PairMiningConfig {
            sampling: NegativeSampling::Uniform,
            ..PairMiningConfig::new(3)
        },
        &mut Rng::new(1),
    )
    .unwrap();
    assert!(uniform.negative_share(normal) > 0.8);
    assert!(set.negative_share(normal) <= 0.4);
}

#[test]
fn identical_labels_score_perfectly() {
    let l = LabelMap::new(2, 3, 2, vec![0, 1, 2, 2, 1, 0]).unwrap();
    let m = evaluate_labels(std::slice::from_ref(&l), std::slice::from_ref(&l)).unwrap();
    assert_eq!((m.accuracy, m.mean_iou, m.macro_f1), (1.0, 1.0, 1.0));
}
