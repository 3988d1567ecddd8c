use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{BatchConfig, PatchSampler, SideDistribution};
use crate::error::{Error, Result};
use crate::model::{parse_widths, NetConfig};
use crate::rankgen::{AnchorMode, ChainParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Ranking only, then counting only.
    Finetune,
    /// Blocks of counting batches and ranking batches in turn.
    Alternating,
    /// Joint loss on mixed batches.
    Multitask,
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Regime::Finetune),
            "alternating" => Ok(Regime::Alternating),
            "multitask" => Ok(Regime::Multitask),
            other => Err(Error::Config(format!("unknown regime `{other}` (finetune, alternating, multitask)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Finetune => "finetune",
            Regime::Alternating => "alternating",
            Regime::Multitask => "multitask",
        })
    }
}

/// Which iteration counter drives the learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrClock {
    /// `phase` for finetune, `global` otherwise.
    #[default]
    Auto,
    Global,
    /// Restarts at every phase boundary.
    Phase,
}

impl FromStr for LrClock {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(LrClock::Auto),
            "global" => Ok(LrClock::Global),
            "phase" => Ok(LrClock::Phase),
            other => Err(Error::Config(format!("unknown lr clock `{other}`"))),
        }
    }
}

impl fmt::Display for LrClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrClock::Auto => "auto",
            LrClock::Global => "global",
            LrClock::Phase => "phase",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub lr_clock: LrClock,
    pub iterations: usize,
    /// Ranking-only iterations before counting starts (finetune only).
    pub rank_iterations: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub alternating_period: usize,
    pub k: usize,
    pub scale: f64,
    pub anchor_ratio: f64,
    pub anchor_mode: AnchorMode,
    pub min_chain_side: u32,
    pub counting_batch: usize,
    pub chains_per_batch: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub sigma: f64,
    pub side_distribution: SideDistribution,
    pub min_patch_side: u32,
    pub max_patch_side: u32,
    pub patch_scales: Vec<f64>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Small from-scratch network suited to CPU runs on synthetic data.
    pub fn toy() -> Self {
        TrainConfig {
            regime: Regime::Multitask,
            lambda: 100.0,
            epsilon: 0.0,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_step: 10_000,
            lr_clock: LrClock::Auto,
            iterations: 20_000,
            rank_iterations: 10_000,
            weight_decay: 5e-4,
            momentum: 0.0,
            alternating_period: 300,
            k: 5,
            scale: 0.75,
            anchor_ratio: 8.0,
            anchor_mode: AnchorMode::Area,
            min_chain_side: 32,
            counting_batch: 25,
            chains_per_batch: 5,
            input_size: 48,
            in_channels: 1,
            widths: vec![8, 16, 16],
            sigma: 15.0,
            side_distribution: SideDistribution::Uniform,
            min_patch_side: 56,
            max_patch_side: 448,
            patch_scales: vec![1.0],
            seed: 0,
            checkpoint_every: 1000,
            eval_every: 0,
            eval_scale: 1.0,
        }
    }

    /// The published schedule: learning rate 1e-6 and a 224-pixel input.
    pub fn paper() -> Self {
        TrainConfig { lr: 1e-6, input_size: 224, widths: vec![16, 32, 64, 64], ..Self::toy() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (toy, paper)"))),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig { in_channels: self.in_channels, widths: self.widths.clone() }
    }

    pub fn chain_params(&self) -> ChainParams {
        ChainParams {
            k: self.k,
            scale: self.scale,
            anchor_ratio: self.anchor_ratio,
            anchor_mode: self.anchor_mode,
            min_side: self.min_chain_side,
        }
    }

    pub fn batch_config(&self) -> Result<BatchConfig> {
        let sampler = PatchSampler {
            sigma: self.sigma,
            min_side: self.min_patch_side,
            max_side: self.max_patch_side,
            side_distribution: self.side_distribution,
            scales: self.patch_scales.clone(),
            ..PatchSampler::new(self.input_size, self.net_config().output_stride())?
        };
        Ok(BatchConfig {
            counting_batch: self.counting_batch,
            chains_per_batch: self.chains_per_batch,
            chain: self.chain_params(),
            sampler,
        })
    }

    pub fn effective_clock(&self) -> LrClock {
        match (self.lr_clock, self.regime) {
            (LrClock::Auto, Regime::Finetune) => LrClock::Phase,
            (LrClock::Auto, _) => LrClock::Global,
            (c, _) => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0) || !(self.epsilon >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lambda, epsilon and weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_step == 0 {
            return bad(format!("lr decay {} every {} iterations", self.lr_decay, self.lr_step));
        }
        if self.iterations == 0 || self.alternating_period == 0 {
            return bad("iterations and alternating_period must be positive".into());
        }
        if self.regime == Regime::Finetune && self.rank_iterations > self.iterations {
            return bad(format!(
                "rank_iterations {} exceeds total iterations {}",
                self.rank_iterations, self.iterations
            ));
        }
        if self.counting_batch == 0 || self.chains_per_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.eval_scale > 0.0) {
            return bad(format!("eval_scale {}", self.eval_scale));
        }
        self.net_config().validate()?;
        self.chain_params().validate()?;
        self.batch_config()?.sampler.validate()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "regime" => self.regime = v.parse()?,
            "lambda" => self.lambda = p(key, v)?,
            "epsilon" => self.epsilon = p(key, v)?,
            "lr" => self.lr = p(key, v)?,
            "lr_decay" => self.lr_decay = p(key, v)?,
            "lr_step" => self.lr_step = p(key, v)?,
            "lr_clock" => self.lr_clock = v.parse()?,
            "iterations" => self.iterations = p(key, v)?,
            "rank_iterations" => self.rank_iterations = p(key, v)?,
            "weight_decay" => self.weight_decay = p(key, v)?,
            "momentum" => self.momentum = p(key, v)?,
            "alternating_period" => self.alternating_period = p(key, v)?,
            "k" => self.k = p(key, v)?,
            "scale" => self.scale = p(key, v)?,
            "anchor_ratio" => self.anchor_ratio = p(key, v)?,
            "anchor_mode" => self.anchor_mode = v.parse()?,
            "min_chain_side" => self.min_chain_side = p(key, v)?,
            "counting_batch" => self.counting_batch = p(key, v)?,
            "chains_per_batch" => self.chains_per_batch = p(key, v)?,
            "input_size" => self.input_size = p(key, v)?,
            "in_channels" => self.in_channels = p(key, v)?,
            "widths" => self.widths = parse_widths(v)?,
            "sigma" => self.sigma = p(key, v)?,
            "side_distribution" => self.side_distribution = v.parse()?,
            "min_patch_side" => self.min_patch_side = p(key, v)?,
            "max_patch_side" => self.max_patch_side = p(key, v)?,
            "patch_scales" => {
                self.patch_scales = v.split(',').map(|s| p(key, s.trim())).collect::<Result<_>>()?;
            }
            "seed" => self.seed = p(key, v)?,
            "checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "eval_every" => self.eval_every = p(key, v)?,
            "eval_scale" => self.eval_scale = p(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment). A `preset` key, if
    /// present, selects the base before the other keys apply.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match entries.iter().find(|(k, _)| k == "preset") {
            Some((_, name)) => Self::preset(name)?,
            None => Self::toy(),
        };
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Every field as `key = value`, readable by [`TrainConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let rows: Vec<(&str, String)> = vec![
            ("regime", self.regime.to_string()),
            ("lambda", self.lambda.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_step", self.lr_step.to_string()),
            ("lr_clock", self.lr_clock.to_string()),
            ("iterations", self.iterations.to_string()),
            ("rank_iterations", self.rank_iterations.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("momentum", self.momentum.to_string()),
            ("alternating_period", self.alternating_period.to_string()),
            ("k", self.k.to_string()),
            ("scale", self.scale.to_string()),
            ("anchor_ratio", self.anchor_ratio.to_string()),
            ("anchor_mode", if self.anchor_mode == AnchorMode::Area { "area" } else { "side" }.to_string()),
            ("min_chain_side", self.min_chain_side.to_string()),
            ("counting_batch", self.counting_batch.to_string()),
            ("chains_per_batch", self.chains_per_batch.to_string()),
            ("input_size", self.input_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("widths", join(&self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>())),
            ("sigma", self.sigma.to_string()),
            (
                "side_distribution",
                if self.side_distribution == SideDistribution::Uniform { "uniform" } else { "log-uniform" }.to_string(),
            ),
            ("min_patch_side", self.min_patch_side.to_string()),
            ("max_patch_side", self.max_patch_side.to_string()),
            ("patch_scales", join(&self.patch_scales.iter().map(|s| s.to_string()).collect::<Vec<_>>())),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_scale", self.eval_scale.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
