//! Fixtures shared by the benchmarks.

use rankcount_core::data::{generate_scene, LabeledScene, RankingSet, SceneParams};
use rankcount_core::density::PointAnnotation;
use rankcount_core::trainer::TrainConfig;
use rankcount_core::Tensor;

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn filled(shape: Vec<usize>, salt: u64) -> Tensor<f32> {
    let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 23) as f32) - 1.0
    })
}

/// `n` points on a grid inside a `side` x `side` image.
pub fn grid_annotation(side: u32, n: usize) -> PointAnnotation {
    let per_row = (n as f64).sqrt().ceil() as usize;
    let step = side as f64 / (per_row + 1) as f64;
    let points = (0..n).map(|i| [step * (1 + i % per_row) as f64, step * (1 + i / per_row) as f64]).collect();
    PointAnnotation::new("bench", side, side, points).expect("points lie inside the image")
}

/// Labeled and unlabeled synthetic data sized for the toy preset.
pub fn toy_sources(labeled: usize, unlabeled: usize) -> (Vec<LabeledScene>, RankingSet) {
    let lp = SceneParams { width: 128, height: 128, ..SceneParams::default() };
    let up = SceneParams { width: 192, height: 192, ..SceneParams::default() };
    let scenes = (0..labeled as u64)
        .map(|i| {
            let s = generate_scene(&format!("l{i}"), &lp, i).expect("valid scene");
            LabeledScene::new(s.image, s.annotation).expect("matching annotation")
        })
        .collect();
    let images = (0..unlabeled as u64)
        .map(|i| (format!("u{i}"), generate_scene("u", &up, 1000 + i).expect("valid scene").image))
        .collect();
    (scenes, RankingSet::new(images))
}

pub fn toy_config() -> TrainConfig {
    TrainConfig::toy()
}
