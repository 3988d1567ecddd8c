//! Seeded comparison of the training regimes on synthetic scenes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{generate_scene, CountDistribution, LabeledScene, RankingSet, SceneParams, Sources};
use crate::error::Result;
use crate::eval::{evaluate, InferenceOptions};
use crate::seed::{derive_seed, hash_str};
use crate::trainer::{init_net, train, Regime, RunOptions, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    CountingOnly,
    Finetune,
    Alternating,
    Multitask,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::CountingOnly, Arm::Finetune, Arm::Alternating, Arm::Multitask];

    pub fn name(self) -> &'static str {
        match self {
            Arm::CountingOnly => "counting-only",
            Arm::Finetune => "ranking-then-finetune",
            Arm::Alternating => "alternating",
            Arm::Multitask => "multitask",
        }
    }

    /// The training configuration this arm uses on top of `base`.
    ///
    /// Every arm makes `base.iterations` counting updates; ranking updates
    /// come on top. The finetune arm runs `rank_fraction * base.iterations`
    /// ranking iterations first, and the alternating arm inserts a full ranking
    /// block between consecutive counting blocks.
    pub fn config(self, base: &TrainConfig, rank_fraction: f64) -> TrainConfig {
        let n = base.iterations;
        match self {
            Arm::CountingOnly => TrainConfig { regime: Regime::Finetune, rank_iterations: 0, ..base.clone() },
            Arm::Finetune => {
                let rank = (n as f64 * rank_fraction).round() as usize;
                TrainConfig { regime: Regime::Finetune, iterations: n + rank, rank_iterations: rank, ..base.clone() }
            }
            Arm::Alternating => {
                let p = base.alternating_period.max(1);
                let iterations = n + n.div_ceil(p).saturating_sub(1) * p;
                TrainConfig { regime: Regime::Alternating, iterations, ..base.clone() }
            }
            Arm::Multitask => TrainConfig { regime: Regime::Multitask, ..base.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub seeds: Vec<u64>,
    pub labeled_scene: SceneParams,
    pub unlabeled_scene: SceneParams,
    pub test_scene: SceneParams,
    pub base: TrainConfig,
    /// Ranking iterations of the finetune arm, as a multiple of the counting iterations.
    pub rank_fraction: f64,
    pub arms: Vec<Arm>,
}

impl ComparisonConfig {
    /// 30 labeled and 300 unlabeled scenes, 5 seeds, sized for a CPU.
    pub fn toy() -> Self {
        let labeled_scene = SceneParams {
            width: 128,
            height: 128,
            count: CountDistribution::Uniform { min: 5, max: 160 },
            blob_radius: (6.0, 12.0),
            ..SceneParams::default()
        };
        // Same person density per unit area on larger frames.
        let unlabeled_scene = SceneParams {
            width: 192,
            height: 192,
            count: CountDistribution::Uniform { min: 11, max: 360 },
            ..labeled_scene.clone()
        };
        let base = TrainConfig {
            max_patch_side: 128,
            iterations: 800,
            rank_iterations: 0,
            alternating_period: 300,
            // Constant learning rate.
            lr_step: 1_000_000,
            lr: 1e-4,
            momentum: 0.9,
            checkpoint_every: 0,
            // Mean training patch side is 92 px, resized to the 48 px input.
            eval_scale: 48.0 / 92.0,
            ..TrainConfig::toy()
        };
        ComparisonConfig {
            labeled: 30,
            unlabeled: 300,
            test: 60,
            seeds: (0..5).collect(),
            test_scene: labeled_scene.clone(),
            labeled_scene,
            unlabeled_scene,
            base,
            rank_fraction: 1.0,
            arms: Arm::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub mae: Vec<f64>,
    pub mse: Vec<f64>,
    pub median_mae: f64,
    pub median_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub claim: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ArmResult>,
    pub checks: Vec<OrderingCheck>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn scenes(prefix: &str, n: usize, params: &SceneParams, seed: u64) -> Result<Vec<LabeledScene>> {
    (0..n)
        .map(|i| {
            let s =
                generate_scene(&format!("{prefix}{i:04}"), params, derive_seed(seed, &[hash_str(prefix), i as u64]))?;
            LabeledScene::new(s.image, s.annotation)
        })
        .collect()
}

/// Trains every arm for every seed and evaluates on a shared held-out set.
pub fn run_comparison(cfg: &ComparisonConfig, progress: &dyn Fn(&str)) -> Result<Comparison> {
    let test = scenes("test", cfg.test, &cfg.test_scene, 0x7e57)?;
    let infer = InferenceOptions { scale: cfg.base.eval_scale, tile: None };
    let mut results: Vec<(Arm, Vec<f64>, Vec<f64>)> = cfg.arms.iter().map(|&a| (a, vec![], vec![])).collect();
    for &seed in &cfg.seeds {
        let labeled = scenes("lab", cfg.labeled, &cfg.labeled_scene, seed)?;
        let unlabeled = scenes("unl", cfg.unlabeled, &cfg.unlabeled_scene, seed)?;
        let ranking = RankingSet::new(unlabeled.into_iter().map(|s| (s.annotation.image_id, s.image)).collect());
        let sources = Sources { labeled: Some(&labeled), ranking: Some(&ranking) };
        for (arm, maes, mses) in results.iter_mut() {
            let tc = TrainConfig { seed, ..arm.config(&cfg.base, cfg.rank_fraction) };
            let (net, _) = train(init_net(&tc)?, sources, &tc, &RunOptions::default())?;
            let report = evaluate(&net, &test, "synthetic-test", arm.name(), &infer)?;
            progress(&format!("seed {seed} {:<22} MAE {:8.3}  MSE {:8.3}", arm.name(), report.mae, report.mse));
            maes.push(report.mae);
            mses.push(report.mse);
        }
    }
    let rows: Vec<ArmResult> = results
        .into_iter()
        .map(|(arm, mae, mse)| ArmResult { arm, median_mae: median(&mae), median_mse: median(&mse), mae, mse })
        .collect();
    let get = |a: Arm| rows.iter().find(|r| r.arm == a).map(|r| r.median_mae);
    let mut checks = Vec::new();
    let mut claim = |text: &str, a: Option<f64>, b: Option<f64>, f: fn(f64, f64) -> bool| {
        if let (Some(a), Some(b)) = (a, b) {
            checks.push(OrderingCheck { claim: text.into(), holds: f(a, b) });
        }
    };
    claim("multitask < counting-only", get(Arm::Multitask), get(Arm::CountingOnly), |a, b| a < b);
    claim("alternating < counting-only", get(Arm::Alternating), get(Arm::CountingOnly), |a, b| a < b);
    claim("ranking-then-finetune >= alternating", get(Arm::Finetune), get(Arm::Alternating), |a, b| a >= b);
    Ok(Comparison { rows, checks })
}

impl Comparison {
    /// Rows sorted by median MAE, then the ordering checks.
    pub fn to_markdown(&self) -> String {
        let mut rows: Vec<&ArmResult> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.median_mae.total_cmp(&b.median_mae));
        let mut out = String::from("| regime | median MAE | median MSE | MAE per seed |\n|---|---|---|---|\n");
        for r in rows {
            let per: Vec<String> = r.mae.iter().map(|v| format!("{v:.2}")).collect();
            let _ =
                writeln!(out, "| {} | {:.3} | {:.3} | {} |", r.arm.name(), r.median_mae, r.median_mse, per.join(", "));
        }
        out.push('\n');
        for c in &self.checks {
            let _ = writeln!(out, "- {}: {}", c.claim, if c.holds { "holds" } else { "FAILS" });
        }
        out
    }
}
