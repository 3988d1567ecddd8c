use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rankcount_core::data::*;
use rankcount_core::density::*;
use rankcount_core::geom::Rect;
use rankcount_core::Graph;

fn points_strategy(w: u32, h: u32) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64).prop_map(|(x, y)| [x, y]), 0..80)
}

fn scene(i: u64, side: u32) -> LabeledScene {
    let p = SceneParams {
        width: side,
        height: side,
        count: CountDistribution::Uniform { min: 5, max: 120 },
        ..SceneParams::default()
    };
    let s = generate_scene(&format!("s{i}"), &p, i).unwrap();
    LabeledScene::new(s.image, s.annotation).unwrap()
}

#[test]
fn count_is_mean_density_times_cells() {
    let ann = PointAnnotation::new("a", 224, 224, vec![[30.0, 40.0], [112.0, 112.0], [200.5, 10.25]]).unwrap();
    let d = render_density(&ann, 15.0, (14, 14)).unwrap();
    let mut g = Graph::<f32>::new();
    let x = g.constant(d.to_tensor().reshape(vec![1, 1, 14, 14]).unwrap()).unwrap();
    let pooled = g.avg_pool_global(x).unwrap();
    let mean = g.value(pooled).data()[0] as f64;
    assert!((mean * 196.0 - count_from_density(&d)).abs() < 1e-5);
}

#[test]
fn interior_point_sums_to_one() {
    let ann = PointAnnotation::new("a", 400, 400, vec![[200.0, 200.0]]).unwrap();
    for out in [(400, 400), (25, 25), (7, 7)] {
        let d = render_density(&ann, 15.0, out).unwrap();
        assert!((count_from_density(&d) - 1.0).abs() < 1e-3, "{out:?}");
    }
}

#[test]
fn sampled_sides_stay_within_bounds() {
    let sampler = PatchSampler::new(48, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for short in [56u32, 57, 100, 447, 448, 449, 2000] {
        for _ in 0..500 {
            let s = sampler.draw_side(short, &mut rng).unwrap();
            assert!((MIN_PATCH_SIDE..=MAX_PATCH_SIDE).contains(&s) && s <= short, "side {s} for short edge {short}");
        }
    }
    assert!(sampler.draw_side(55, &mut rng).is_err());
}

#[test]
fn labeled_patch_mass_equals_exact_count() {
    let sampler = PatchSampler::new(48, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..20 {
        let sc = scene(i, 160);
        for _ in 0..10 {
            let p = sample_labeled_patch(&sc, &sampler, &mut rng).unwrap();
            assert_eq!(p.count, sc.annotation.count_in(&p.rect));
            assert_eq!((p.gt.height, p.gt.width), (6, 6));
            let mass = count_from_density(&p.gt);
            assert!((mass - p.count as f64).abs() <= 1e-3 * (p.count as f64).max(1.0), "mass {mass} vs {}", p.count);
        }
    }
}

#[test]
fn batch_assembly_is_a_pure_function_of_the_rng() {
    let labeled: Vec<LabeledScene> = (0..30).map(|i| scene(i, 128)).collect();
    let unlabeled = RankingSet::new((0..6).map(|i| (format!("u{i}"), scene(100 + i, 192).image)).collect());
    let sources = Sources { labeled: Some(&labeled), ranking: Some(&unlabeled) };
    let mut cfg = BatchConfig::new(48, 8).unwrap();
    cfg.sampler.max_side = 128;
    for kind in [BatchKind::Counting, BatchKind::Ranking, BatchKind::Mixed] {
        let a = assemble_batch(kind, sources, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = assemble_batch(kind, sources, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b, "{kind:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_is_non_negative_and_bounded_by_count(points in points_strategy(120, 90), h in 1usize..20, w in 1usize..20) {
        let ann = PointAnnotation::new("p", 120, 90, points.clone()).unwrap();
        let d = render_density(&ann, 15.0, (h, w)).unwrap();
        prop_assert!(d.grid.iter().all(|&v| v >= 0.0));
        prop_assert!(count_from_density(&d) <= points.len() as f64 + 1e-3);
    }

    #[test]
    fn renormalized_density_keeps_every_point(points in points_strategy(120, 90)) {
        let ann = PointAnnotation::new("p", 120, 90, points.clone()).unwrap();
        let d = render_density_with(&ann, 15.0, (9, 12), BorderMode::Renormalize).unwrap();
        prop_assert!((count_from_density(&d) - points.len() as f64).abs() < 1e-3 * (points.len() as f64).max(1.0));
    }

    #[test]
    fn nested_crop_counts_are_monotone(points in points_strategy(200, 200), x in 0.0f64..100.0, y in 0.0f64..100.0, side in 10.0f64..100.0, f in 0.1f64..1.0) {
        let ann = PointAnnotation::new("p", 200, 200, points).unwrap();
        let outer = Rect::new(x, y, side, side);
        let inner = Rect::new(x + side * (1.0 - f) / 2.0, y + side * (1.0 - f) / 2.0, side * f, side * f);
        prop_assert!(ann.count_in(&inner) <= ann.count_in(&outer));
        prop_assert_eq!(crop_annotation(&ann, &outer).unwrap().count(), ann.count_in(&outer));
    }
}
