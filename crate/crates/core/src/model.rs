//! Fully convolutional density regressor.
//!
//! Each block is a 3×3 convolution (stride 1, zero padding 1) followed by a
//! 2×2 stride-2 convolution, both with ReLU. A single-filter 3×3 head maps
//! the last block to one density channel, passed through softplus so the map
//! is non-negative. With `B` blocks the output stride is `2^B`.
//!
//! Parameter count for input channels `c0` and widths `w1..wB`:
//! `sum_b (9 c_{b-1} w_b + w_b + 4 w_b^2 + w_b) + 9 wB + 1`.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Checkpoint, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Constant subtracted from every input pixel before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl Default for NetConfig {
    /// Four blocks of widths 16-32-64-64: output stride 16, so a 224 input
    /// gives a 14×14 map.
    fn default() -> Self {
        NetConfig { in_channels: 1, widths: vec![16, 32, 64, 64] }
    }
}

impl NetConfig {
    pub fn output_stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("network needs at least one input channel".into()));
        }
        if self.widths.is_empty() || self.widths.len() > 8 {
            return Err(Error::Config(format!("network needs 1 to 8 blocks, got {}", self.widths.len())));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero-width block in {:?}", self.widths)));
        }
        Ok(())
    }

    /// Compact text form stored in checkpoints, e.g. `in=1;widths=16,32,64,64`.
    pub fn descriptor(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("in={};widths={}", self.in_channels, widths.join(","))
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed architecture descriptor `{s}`"));
        let mut in_channels = None;
        let mut widths = None;
        for part in s.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k {
                "in" => in_channels = Some(v.parse().map_err(|_| bad())?),
                "widths" => widths = Some(parse_widths(v)?),
                _ => return Err(bad()),
            }
        }
        let cfg = NetConfig { in_channels: in_channels.ok_or_else(bad)?, widths: widths.ok_or_else(bad)? };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `16,32,64` or `16-32-64`.
pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split([',', '-'])
        .map(|w| w.trim().parse().map_err(|_| Error::Config(format!("bad layer width `{w}` in `{s}`"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountingNet<T: Real = f32> {
    config: NetConfig,
    params: ParamStore<T>,
    layers: Vec<Layer>,
}

impl<T: Real> CountingNet<T> {
    /// He-initialized weights (`N(0, 2 / fan_in)`), zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x6e6574]);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut add = |params: &mut ParamStore<T>, name: String, f: usize, c: usize, k: usize, stride, pad, relu| {
            let fan_in = (c * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w = Tensor::from_fn(vec![f, c, k, k], |_| T::from_f64(normal.sample(&mut rng)));
            let weight = params.add(format!("{name}.weight"), w);
            let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![f]));
            Layer { weight, bias, stride, pad, relu }
        };
        let mut c = config.in_channels;
        for (b, &w) in config.widths.iter().enumerate() {
            layers.push(add(&mut params, format!("block{b}.conv"), w, c, 3, 1, 1, true));
            layers.push(add(&mut params, format!("block{b}.down"), w, w, 2, 2, 0, true));
            c = w;
        }
        layers.push(add(&mut params, "head".into(), 1, c, 3, 1, 1, false));
        Ok(CountingNet { config, params, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn output_stride(&self) -> usize {
        self.config.output_stride()
    }

    /// Output map side for an input side, or a shape error if not divisible.
    pub fn output_side(&self, input: usize) -> Result<usize> {
        let s = self.output_stride();
        if input == 0 || input % s != 0 {
            return Err(Error::shape(
                "forward",
                format!("input side {input} is not a positive multiple of the output stride {s}"),
            ));
        }
        Ok(input / s)
    }

    /// Records the network on `graph`; `input` is `[N, C, H, W]`.
    pub fn forward(&self, graph: &mut Graph<T>, input: Var) -> Result<Var> {
        let shape = graph.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, H, W] input, got {shape:?}", self.config.in_channels),
            ));
        }
        self.output_side(shape[2])?;
        self.output_side(shape[3])?;
        let mut x = graph.shift(input, -INPUT_MEAN)?;
        for layer in &self.layers {
            let w = graph.param(&self.params, layer.weight)?;
            let b = graph.param(&self.params, layer.bias)?;
            x = graph.conv2d(x, w, layer.stride, layer.pad)?;
            x = graph.bias_add(x, b)?;
            if layer.relu {
                x = graph.relu(x)?;
            }
        }
        graph.softplus(x)
    }

    /// Inference-only forward pass returning `[N, 1, h, w]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = graph.constant(batch.clone())?;
        let y = self.forward(&mut graph, x)?;
        Ok(graph.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> CountingNet<U> {
        CountingNet { config: self.config.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut metadata = extra.clone();
        metadata.insert("arch".into(), self.config.descriptor());
        Checkpoint { metadata, tensors: self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect() }
    }

    /// Rebuilds a network from a checkpoint, optionally requiring a given
    /// architecture.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&NetConfig>) -> Result<Self> {
        let arch = ckpt.metadata.get("arch").ok_or_else(|| Error::Checkpoint("missing architecture header".into()))?;
        let config = NetConfig::from_descriptor(arch)?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: checkpoint has `{}`, expected `{}`",
                    config.descriptor(),
                    exp.descriptor()
                )));
            }
        }
        let mut net = Self::init(config, 0)?;
        if ckpt.tensors.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                ckpt.tensors.len()
            )));
        }
        for p in net.params.iter_mut() {
            let t = ckpt.tensor(&p.name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(net)
    }
}
