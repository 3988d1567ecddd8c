use rankcount_core::data::*;
use rankcount_core::eval::{evaluate, InferenceOptions};
use rankcount_core::model::CountingNet;
use rankcount_core::tensor::{read_checkpoint, Sgd};
use rankcount_core::trainer::*;
use std::collections::BTreeMap;

struct Fixture {
    labeled: Vec<LabeledScene>,
    ranking: RankingSet,
}

impl Fixture {
    fn new() -> Self {
        let lp = SceneParams {
            width: 128,
            height: 128,
            count: CountDistribution::Uniform { min: 5, max: 80 },
            ..SceneParams::default()
        };
        let up = SceneParams { width: 192, height: 192, ..lp.clone() };
        let labeled = (0..30)
            .map(|i| {
                let s = generate_scene(&format!("l{i}"), &lp, i).unwrap();
                LabeledScene::new(s.image, s.annotation).unwrap()
            })
            .collect();
        let ranking = RankingSet::new(
            (0..8).map(|i| (format!("u{i}"), generate_scene("u", &up, 500 + i).unwrap().image)).collect(),
        );
        Fixture { labeled, ranking }
    }

    fn sources(&self) -> Sources<'_> {
        Sources { labeled: Some(&self.labeled), ranking: Some(&self.ranking) }
    }
}

fn small_config(regime: Regime, iterations: usize) -> TrainConfig {
    TrainConfig {
        regime,
        iterations,
        rank_iterations: iterations / 2,
        widths: vec![4, 8],
        input_size: 32,
        max_patch_side: 128,
        lr: 1e-3,
        checkpoint_every: 0,
        eval_scale: 0.5,
        seed: 3,
        ..TrainConfig::toy()
    }
}

fn grads(net: &CountingNet<f64>) -> Vec<f64> {
    net.params().iter().flat_map(|p| p.grad.clone().unwrap()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn multitask_gradient_is_counting_plus_weighted_ranking() {
    let fx = Fixture::new();
    let cfg = small_config(Regime::Multitask, 10);
    let bc = cfg.batch_config().unwrap();
    let lambda = cfg.lambda;
    let mut net = init_net(&cfg).unwrap().cast::<f64>();
    let mut sgd = Sgd::new(0.0);
    for it in 0..10 {
        let batch = batch_for(it, BatchKind::Mixed, fx.sources(), &bc, cfg.seed).unwrap();
        compute_gradients(&mut net, &batch, Objective::Counting, 0.0).unwrap();
        let gc = grads(&net);
        net.params_mut().zero_grad();
        compute_gradients(&mut net, &batch, Objective::Ranking, 0.0).unwrap();
        let gr = grads(&net);
        net.params_mut().zero_grad();
        compute_gradients(&mut net, &batch, Objective::Multitask { lambda }, 0.0).unwrap();
        let gm = grads(&net);
        let diff: Vec<f64> = gm.iter().zip(gc.iter().zip(&gr)).map(|(m, (c, r))| m - (c + lambda * r)).collect();
        let rel = norm(&diff) / norm(&gm).max(1e-12);
        assert!(rel < 1e-6, "iteration {it}: relative error {rel:e}");
        sgd.step(net.params_mut(), 1e-3, 0.0).unwrap();
    }
}

#[test]
fn logged_active_pairs_match_an_independent_audit() {
    let fx = Fixture::new();
    let cfg = small_config(Regime::Multitask, 6);
    let bc = cfg.batch_config().unwrap();
    let mut trainer = Trainer::new(init_net(&cfg).unwrap(), &cfg);
    for it in 0..6 {
        let batch = batch_for(it, BatchKind::Mixed, fx.sources(), &bc, cfg.seed).unwrap();
        let out = trainer.net.predict(&batch.images).unwrap();
        let cells = out.shape()[2] * out.shape()[3];
        let counts: Vec<f64> =
            out.data().chunks(cells).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / cells as f64).collect();
        let violated = batch.pairs.as_slice().iter().filter(|&&(hi, lo)| counts[lo] > counts[hi]).count();
        let v = trainer.step(&batch, Objective::Multitask { lambda: cfg.lambda }, cfg.lr).unwrap();
        assert_eq!(v.active_pairs, Some(violated), "iteration {it}");
        assert_eq!(v.ranking == Some(0.0), violated == 0);
    }
}

#[test]
fn training_runs_are_bitwise_reproducible() {
    let fx = Fixture::new();
    for regime in [Regime::Multitask, Regime::Alternating, Regime::Finetune] {
        let mut cfg = small_config(regime, 8);
        cfg.alternating_period = 2;
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
            let (_, log) = train(init_net(&cfg).unwrap(), fx.sources(), &cfg, &opts).unwrap();
            (log, std::fs::read(dir.path().join("final.bin")).unwrap())
        };
        let (log_a, ckpt_a) = run();
        let (log_b, ckpt_b) = run();
        assert_eq!(log_a, log_b, "{regime}");
        assert_eq!(ckpt_a, ckpt_b, "{regime}");
    }
}

#[test]
fn finetune_phase_checkpoint_reloads_identically() {
    let fx = Fixture::new();
    let cfg = small_config(Regime::Finetune, 8);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    train(init_net(&cfg).unwrap(), fx.sources(), &cfg, &opts).unwrap();
    let phase1 = read_checkpoint(dir.path().join("phase1.bin")).unwrap();

    let ranking_only = TrainConfig { iterations: cfg.rank_iterations, ..cfg.clone() };
    let (net, log) = train(init_net(&cfg).unwrap(), fx.sources(), &ranking_only, &RunOptions::default()).unwrap();
    assert!(log.records.iter().all(|r| r.phase == Phase::Rank));
    let reloaded = CountingNet::<f32>::from_checkpoint(&phase1, Some(&cfg.net_config())).unwrap();
    for (a, b) in reloaded.params().iter().zip(net.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(reloaded.to_checkpoint(&BTreeMap::new()).tensors, phase1.tensors);
}

#[test]
fn evaluation_does_not_touch_the_model() {
    let fx = Fixture::new();
    let cfg = small_config(Regime::Multitask, 2);
    let (net, _) = train(init_net(&cfg).unwrap(), fx.sources(), &cfg, &RunOptions::default()).unwrap();
    let before = net.to_checkpoint(&BTreeMap::new()).to_bytes();
    let report =
        evaluate(&net, &fx.labeled[..5], "fixture", "x", &InferenceOptions { scale: 0.5, tile: None }).unwrap();
    assert_eq!(report.items.len(), 5);
    assert_eq!(net.to_checkpoint(&BTreeMap::new()).to_bytes(), before);
}

#[test]
fn alternating_blocks_split_evenly() {
    let cfg =
        TrainConfig { regime: Regime::Alternating, iterations: 1200, alternating_period: 300, ..TrainConfig::toy() };
    let phases: Vec<Phase> = (0..1200).map(|it| phase_at(&cfg, it).0).collect();
    assert_eq!(phases.iter().filter(|&&p| p == Phase::Count).count(), 600);
    assert_eq!(phases.iter().filter(|&&p| p == Phase::Rank).count(), 600);
    let log = TrainLog {
        records: phases
            .iter()
            .enumerate()
            .map(|(iteration, &phase)| IterRecord {
                iteration,
                phase,
                lr: 0.0,
                loss: 0.0,
                l_c: None,
                l_r: None,
                active_pairs: None,
            })
            .collect(),
        evals: vec![],
    };
    assert_eq!(
        log.phase_runs(),
        vec![(Phase::Rank, 300), (Phase::Count, 300), (Phase::Rank, 300), (Phase::Count, 300)]
    );
}
