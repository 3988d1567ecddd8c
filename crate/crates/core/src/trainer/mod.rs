//! The three training regimes, the SGD schedule and run bookkeeping.

mod config;
mod log;

pub use config::{LrClock, Regime, TrainConfig};
pub use log::{EvalRecord, IterRecord, Phase, TrainLog};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{assemble_batch, BatchConfig, BatchKind, LabeledScene, Minibatch, Sources};
use crate::error::{Error, Result};
use crate::eval::{evaluate, InferenceOptions};
use crate::losses::{active_pairs, counting_loss, multitask_loss, normalized_counts, ranking_loss, LossValue};
use crate::model::CountingNet;
use crate::rankgen::PairSet;
use crate::seed::{derive_seed, hash_str, rng_for};
use crate::tensor::{write_checkpoint, Graph, Real, Sgd, Tensor};

const BATCH_STREAM: u64 = 0xba7c;

/// Which loss a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Counting,
    Ranking,
    Multitask { lambda: f64 },
}

/// Learning rate after `clock` iterations: `lr0 * decay^floor(clock / step)`.
pub fn learning_rate(cfg: &TrainConfig, clock: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((clock / cfg.lr_step) as i32)
}

/// Phase of iteration `it` and the iteration count that drives the learning rate.
pub fn phase_at(cfg: &TrainConfig, it: usize) -> (Phase, usize) {
    let phase_clock = cfg.effective_clock() == LrClock::Phase;
    match cfg.regime {
        Regime::Finetune if it < cfg.rank_iterations => (Phase::Rank, it),
        Regime::Finetune => (Phase::Count, if phase_clock { it - cfg.rank_iterations } else { it }),
        Regime::Alternating => {
            // Blocks are aligned to the end of the run so the last block counts.
            let p = cfg.alternating_period;
            let shift = (p - cfg.iterations % p) % p;
            let (block, pos) = ((it + shift) / p, (it + shift) % p);
            let last = ((cfg.iterations + shift) / p).saturating_sub(1);
            let phase = if last.abs_diff(block) % 2 == 0 { Phase::Count } else { Phase::Rank };
            let clock = if block == 0 { it } else { pos };
            (phase, if phase_clock { clock } else { it })
        }
        Regime::Multitask => (Phase::Multi, it),
    }
}

pub fn batch_kind(phase: Phase) -> BatchKind {
    match phase {
        Phase::Count => BatchKind::Counting,
        Phase::Rank => BatchKind::Ranking,
        Phase::Multi => BatchKind::Mixed,
    }
}

/// Batch for iteration `it`, seeded by `(seed, it)` alone.
pub fn batch_for(
    it: usize,
    kind: BatchKind,
    sources: Sources<'_>,
    config: &BatchConfig,
    seed: u64,
) -> Result<Minibatch> {
    assemble_batch(kind, sources, config, &mut rng_for(seed, &[BATCH_STREAM, it as u64]))
}

fn rows<T: Real>(images: &Tensor<f32>, range: std::ops::Range<usize>) -> Result<Tensor<T>> {
    let s = images.shape();
    let per = s[1] * s[2] * s[3];
    let data = images.data()[range.start * per..range.end * per].iter().map(|&v| T::from_f64(v as f64)).collect();
    Tensor::new(vec![range.len(), s[1], s[2], s[3]], data)
}

/// Runs forward and backward for one batch, leaving gradients in the
/// network's parameter store.
///
/// `Counting` uses only the counting rows of the batch and `Ranking` only
/// the ranking rows; `Multitask` runs every row through one forward pass.
pub fn compute_gradients<T: Real>(
    net: &mut CountingNet<T>,
    batch: &Minibatch,
    objective: Objective,
    epsilon: f64,
) -> Result<LossValue> {
    debug_assert!(!net.params().has_any_grad(), "gradients left over from a previous step");
    let mut g = Graph::new();
    let out = match objective {
        Objective::Counting => {
            if batch.counting_rows.is_empty() {
                return Err(Error::Config(format!("{} batch has no counting rows", batch.kind)));
            }
            let x = g.constant(rows(&batch.images, batch.counting_rows.clone())?)?;
            let pred = net.forward(&mut g, x)?;
            let lc = counting_loss(&mut g, pred, &batch.gt)?;
            let v = g.value(lc).item().to_f64();
            (lc, LossValue { total: v, counting: Some(v), ranking: None, active_pairs: None })
        }
        Objective::Ranking => {
            if batch.ranking_rows.is_empty() {
                return Err(Error::Config(format!("{} batch has no ranking rows", batch.kind)));
            }
            let off = batch.ranking_rows.start;
            let pairs = PairSet::from_pairs(batch.pairs.as_slice().iter().map(|&(a, b)| (a - off, b - off)).collect());
            let x = g.constant(rows(&batch.images, batch.ranking_rows.clone())?)?;
            let pred = net.forward(&mut g, x)?;
            let counts = normalized_counts(&mut g, pred)?;
            let active = active_pairs(g.value(counts).data(), &pairs, epsilon);
            let lr = ranking_loss(&mut g, counts, &pairs, epsilon)?;
            let v = g.value(lr).item().to_f64();
            (lr, LossValue { total: v, counting: None, ranking: Some(v), active_pairs: Some(active) })
        }
        Objective::Multitask { lambda } => {
            if batch.counting_rows.is_empty() || batch.ranking_rows.is_empty() {
                return Err(Error::Config(format!("multitask objective needs a mixed batch, got {}", batch.kind)));
            }
            let x = g.constant(rows(&batch.images, 0..batch.len())?)?;
            let pred = net.forward(&mut g, x)?;
            let counted = g.slice_rows(pred, batch.counting_rows.start, batch.counting_rows.len())?;
            let lc = counting_loss(&mut g, counted, &batch.gt)?;
            let counts = normalized_counts(&mut g, pred)?;
            let active = active_pairs(g.value(counts).data(), &batch.pairs, epsilon);
            let lr = ranking_loss(&mut g, counts, &batch.pairs, epsilon)?;
            let total = multitask_loss(&mut g, lc, lr, lambda)?;
            let value = LossValue {
                total: g.value(total).item().to_f64(),
                counting: Some(g.value(lc).item().to_f64()),
                ranking: Some(g.value(lr).item().to_f64()),
                active_pairs: Some(active),
            };
            (total, value)
        }
    };
    let (loss, value) = out;
    g.backward(loss, net.params_mut())?;
    Ok(value)
}

/// A network plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: CountingNet<f32>,
    pub sgd: Sgd,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Trainer {
    pub fn new(net: CountingNet<f32>, cfg: &TrainConfig) -> Self {
        Trainer { net, sgd: Sgd::new(cfg.momentum), weight_decay: cfg.weight_decay, epsilon: cfg.epsilon }
    }

    /// One SGD update on `batch`.
    pub fn step(&mut self, batch: &Minibatch, objective: Objective, lr: f64) -> Result<LossValue> {
        let value = match compute_gradients(&mut self.net, batch, objective, self.epsilon) {
            Ok(v) => v,
            Err(e) => {
                self.net.params_mut().zero_grad();
                return Err(e);
            }
        };
        self.sgd.step(self.net.params_mut(), lr, self.weight_decay)?;
        Ok(value)
    }
}

/// Seed used for network initialization under run seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, &[hash_str("init")])
}

pub fn init_net(cfg: &TrainConfig) -> Result<CountingNet<f32>> {
    CountingNet::init(cfg.net_config(), init_seed(cfg.seed))
}

/// Held-out data evaluated during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub scenes: &'a [LabeledScene],
    pub dataset_id: &'a str,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for checkpoints and logs.
    pub out_dir: Option<PathBuf>,
    pub eval: Option<EvalSet<'a>>,
    pub progress: Option<&'a dyn Fn(&IterRecord)>,
}

fn checkpoint_meta(cfg: &TrainConfig, iteration: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("iteration".to_string(), iteration.to_string()),
        ("regime".to_string(), cfg.regime.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ])
}

fn save(net: &CountingNet<f32>, cfg: &TrainConfig, iteration: usize, dir: &Path, name: &str) -> Result<()> {
    write_checkpoint(dir.join(name), &net.to_checkpoint(&checkpoint_meta(cfg, iteration)))
}

/// Trains `net` under `cfg.regime` and returns it with the log.
pub fn train(
    net: CountingNet<f32>,
    sources: Sources<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions<'_>,
) -> Result<(CountingNet<f32>, TrainLog)> {
    cfg.validate()?;
    if net.config() != &cfg.net_config() {
        return Err(Error::Config(format!(
            "network `{}` does not match configured `{}`",
            net.config().descriptor(),
            cfg.net_config().descriptor()
        )));
    }
    let batch_cfg = cfg.batch_config()?;
    let needs_labeled = cfg.regime != Regime::Finetune || cfg.rank_iterations < cfg.iterations;
    let needs_ranking = cfg.regime != Regime::Finetune || cfg.rank_iterations > 0;
    if needs_labeled && sources.labeled.is_none() {
        return Err(Error::Config(format!("{} training needs a labeled source", cfg.regime)));
    }
    if needs_ranking && sources.ranking.is_none() {
        return Err(Error::Config(format!("{} training needs a ranking source", cfg.regime)));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let infer = InferenceOptions { scale: cfg.eval_scale, tile: None };
    let mut trainer = Trainer::new(net, cfg);
    let mut log = TrainLog::default();
    let run_eval = |net: &CountingNet<f32>, log: &mut TrainLog, done: usize| -> Result<()> {
        if let Some(e) = opts.eval {
            let r = evaluate(net, e.scenes, e.dataset_id, &cfg.regime.to_string(), &infer)?;
            log.evals.push(EvalRecord { iteration: done, mae: r.mae, mse: r.mse });
        }
        Ok(())
    };

    for it in 0..cfg.iterations {
        let (phase, clock) = phase_at(cfg, it);
        let lr = learning_rate(cfg, clock);
        let batch = batch_for(it, batch_kind(phase), sources, &batch_cfg, cfg.seed)?;
        let objective = match phase {
            Phase::Count => Objective::Counting,
            Phase::Rank => Objective::Ranking,
            Phase::Multi => Objective::Multitask { lambda: cfg.lambda },
        };
        let v = trainer.step(&batch, objective, lr)?;
        let rec = IterRecord {
            iteration: it,
            phase,
            lr,
            loss: v.total,
            l_c: v.counting,
            l_r: v.ranking,
            active_pairs: v.active_pairs,
        };
        if let Some(cb) = opts.progress {
            cb(&rec);
        }
        log.records.push(rec);

        let done = it + 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save(&trainer.net, cfg, done, dir, &format!("ckpt_{done:06}.bin"))?;
            }
            if cfg.regime == Regime::Finetune && done == cfg.rank_iterations {
                save(&trainer.net, cfg, done, dir, "phase1.bin")?;
            }
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.iterations {
            run_eval(&trainer.net, &mut log, done)?;
        }
    }
    run_eval(&trainer.net, &mut log, cfg.iterations)?;
    if let Some(dir) = &opts.out_dir {
        save(&trainer.net, cfg, cfg.iterations, dir, "final.bin")?;
        log.write(dir)?;
        let path = dir.join("config.txt");
        std::fs::write(&path, cfg.to_kv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok((trainer.net, log))
}

fn with_regime(cfg: &TrainConfig, regime: Regime) -> TrainConfig {
    TrainConfig { regime, ..cfg.clone() }
}

/// Ranking only for `cfg.rank_iterations`, then counting only.
pub fn train_finetune(
    net: CountingNet<f32>,
    sources: Sources<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions<'_>,
) -> Result<(CountingNet<f32>, TrainLog)> {
    train(net, sources, &with_regime(cfg, Regime::Finetune), opts)
}

/// Blocks of `alternating_period` ranking and counting batches in turn,
/// ending with a counting block.
pub fn train_alternating(
    net: CountingNet<f32>,
    sources: Sources<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions<'_>,
) -> Result<(CountingNet<f32>, TrainLog)> {
    train(net, sources, &with_regime(cfg, Regime::Alternating), opts)
}

/// `L_c + lambda * L_r` on mixed batches.
pub fn train_multitask(
    net: CountingNet<f32>,
    sources: Sources<'_>,
    cfg: &TrainConfig,
    opts: &RunOptions<'_>,
) -> Result<(CountingNet<f32>, TrainLog)> {
    train(net, sources, &with_regime(cfg, Regime::Multitask), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_by_tenth() {
        let cfg = TrainConfig { lr: 0.5, ..TrainConfig::toy() };
        assert_eq!(learning_rate(&cfg, 0), 0.5);
        assert_eq!(learning_rate(&cfg, 9_999), 0.5);
        assert!((learning_rate(&cfg, 10_000) - 0.05).abs() < 1e-15);
        assert!((learning_rate(&cfg, 19_999) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn alternating_blocks() {
        let cfg = TrainConfig {
            regime: Regime::Alternating,
            alternating_period: 300,
            iterations: 1200,
            ..TrainConfig::toy()
        };
        let phases: Vec<Phase> = (0..1200).map(|i| phase_at(&cfg, i).0).collect();
        assert_eq!(phases[0], Phase::Rank);
        assert_eq!(phases[299], Phase::Rank);
        assert_eq!(phases[300], Phase::Count);
        assert_eq!(phases[1199], Phase::Count);
        let strict = TrainConfig { alternating_period: 1, iterations: 5, ..cfg.clone() };
        assert_eq!(
            (0..5).map(|i| phase_at(&strict, i).0).collect::<Vec<_>>(),
            [Phase::Count, Phase::Rank, Phase::Count, Phase::Rank, Phase::Count]
        );
        // A partial block comes first.
        let ragged = TrainConfig { iterations: 1400, ..cfg };
        let phases: Vec<Phase> = (0..1400).map(|i| phase_at(&ragged, i).0).collect();
        assert_eq!(phases[0], Phase::Count);
        assert_eq!(phases[199], Phase::Count);
        assert_eq!(phases[200], Phase::Rank);
        assert_eq!(phases.iter().filter(|&&p| p == Phase::Count).count(), 800);
        let clocked = TrainConfig { lr_clock: LrClock::Phase, ..ragged };
        assert_eq!(phase_at(&clocked, 199).1, 199);
        assert_eq!(phase_at(&clocked, 200).1, 0);
        assert_eq!(phase_at(&clocked, 1399).1, 299);
    }

    #[test]
    fn finetune_clock_restarts() {
        let cfg =
            TrainConfig { regime: Regime::Finetune, rank_iterations: 12_000, iterations: 20_000, ..TrainConfig::toy() };
        assert_eq!(phase_at(&cfg, 11_999), (Phase::Rank, 11_999));
        assert_eq!(phase_at(&cfg, 12_000), (Phase::Count, 0));
        let global = TrainConfig { lr_clock: LrClock::Global, ..cfg };
        assert_eq!(phase_at(&global, 12_000), (Phase::Count, 12_000));
    }
}
