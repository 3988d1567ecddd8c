use proptest::prelude::*;
use rankcount_core::model::{CountingNet, NetConfig};
use rankcount_core::Tensor;
use std::collections::BTreeMap;

fn expected_params(cfg: &NetConfig) -> usize {
    let mut c = cfg.in_channels;
    let mut total = 0;
    for &w in &cfg.widths {
        total += w * c * 9 + w; // 3x3 conv
        total += w * w * 4 + w; // 2x2 stride-2 downsampling conv
        c = w;
    }
    total + c * 9 + 1
}

#[test]
fn parameter_count_formula() {
    for widths in [vec![8, 16, 16], vec![16, 32, 64, 64], vec![4], vec![3, 5, 7, 9, 11]] {
        for in_channels in [1, 3] {
            let cfg = NetConfig { in_channels, widths: widths.clone() };
            let net = CountingNet::<f32>::init(cfg.clone(), 0).unwrap();
            assert_eq!(net.params().numel(), expected_params(&cfg), "{}", cfg.descriptor());
        }
    }
}

#[test]
fn default_network_maps_224_to_14_and_112_to_7() {
    let net = CountingNet::<f32>::init(NetConfig::default(), 1).unwrap();
    assert_eq!(net.output_side(224).unwrap(), 14);
    assert_eq!(net.output_side(112).unwrap(), 7);
    assert!(net.output_side(100).is_err());
    let out = net.predict(&Tensor::full(vec![1, 1, 112, 112], 0.3)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 7, 7]);
}

#[test]
fn weight_std_matches_he_init() {
    let cfg = NetConfig::default();
    for seed in 0..10 {
        let net = CountingNet::<f64>::init(cfg.clone(), seed).unwrap();
        for p in net.params().iter().filter(|p| p.name.ends_with(".weight")) {
            let s = p.value.shape();
            let fan_in = (s[1] * s[2] * s[3]) as f64;
            if p.value.numel() < 100 {
                continue;
            }
            let n = p.value.numel() as f64;
            let mean = p.value.data().iter().sum::<f64>() / n;
            let var = p.value.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let want = (2.0 / fan_in).sqrt();
            assert!((var.sqrt() / want - 1.0).abs() < 0.1, "seed {seed} {}: std {} vs {want}", p.name, var.sqrt());
        }
        for p in net.params().iter().filter(|p| p.name.ends_with(".bias")) {
            assert!(p.value.data().iter().all(|&b| b == 0.0));
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = NetConfig { in_channels: 1, widths: vec![4, 8] };
    let net = CountingNet::<f32>::init(cfg.clone(), 5).unwrap();
    let bytes = net.to_checkpoint(&BTreeMap::new()).to_bytes();
    let ckpt = rankcount_core::tensor::Checkpoint::from_bytes(&bytes).unwrap();
    let back = CountingNet::<f32>::from_checkpoint(&ckpt, Some(&cfg)).unwrap();
    let x = Tensor::from_fn(vec![2, 1, 16, 16], |i| (i % 7) as f32 / 7.0);
    assert_eq!(net.predict(&x).unwrap(), back.predict(&x).unwrap());
    let other = NetConfig { in_channels: 1, widths: vec![4, 4] };
    assert!(CountingNet::<f32>::from_checkpoint(&ckpt, Some(&other)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn density_output_is_non_negative(seed in any::<u64>(), pixels in prop::collection::vec(0.0f32..1.0, 32 * 32)) {
        let net = CountingNet::<f32>::init(NetConfig { in_channels: 1, widths: vec![4, 8] }, seed).unwrap();
        let out = net.predict(&Tensor::new(vec![1, 1, 32, 32], pixels).unwrap()).unwrap();
        prop_assert_eq!(out.shape(), &[1, 1, 8, 8]);
        prop_assert!(out.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
