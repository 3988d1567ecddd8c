//! Ranked crop chains from unlabeled images.
//!
//! A chain is `k` concentric squares around one anchor point. Every square
//! is contained in the previous one, so its person count can only be equal
//! or smaller. Steps:
//!
//! 1. draw the anchor uniformly from a centered region with the image's
//!    aspect ratio and `1/r` of its area,
//! 2. take the largest square centered on the anchor that fits the image,
//! 3. shrink the side by `s` (floored to whole pixels) `k - 1` times,
//! 4. resize every crop to the network input size.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::image::{stack_images, Image};
use crate::seed::{hash_str, rng_for};
use crate::tensor::Tensor;

/// How the anchor-region ratio `r` is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// Region area is `1/r` of the image (each side scaled by `1/sqrt(r)`).
    #[default]
    Area,
    /// Each side is scaled by `1/r`.
    Side,
}

impl std::str::FromStr for AnchorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(AnchorMode::Area),
            "side" => Ok(AnchorMode::Side),
            other => Err(Error::Config(format!("unknown anchor mode `{other}` (area|side)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    /// Number of patches per chain.
    pub k: usize,
    /// Side shrink factor between consecutive patches.
    pub scale: f64,
    /// Anchor region ratio.
    pub anchor_ratio: f64,
    pub anchor_mode: AnchorMode,
    /// Smallest allowed patch side in pixels.
    pub min_side: u32,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams { k: 5, scale: 0.75, anchor_ratio: 8.0, anchor_mode: AnchorMode::Area, min_side: 32 }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return Err(Error::Config(format!("scale factor must be in (0, 1), got {}", self.scale)));
        }
        if !(self.anchor_ratio >= 1.0) {
            return Err(Error::Config(format!("anchor ratio must be >= 1, got {}", self.anchor_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChain {
    pub image_id: String,
    pub anchor: [f64; 2],
    /// Square sides in pixels, largest first (rank index 0).
    pub sides: Vec<u32>,
    pub seed: u64,
}

impl RankedChain {
    pub fn k(&self) -> usize {
        self.sides.len()
    }

    pub fn rects(&self) -> Vec<Rect> {
        self.sides.iter().map(|&s| Rect::square(self.anchor[0], self.anchor[1], s as f64)).collect()
    }

    /// Checks bounds, nesting and the floored side progression.
    pub fn validate(&self, width: u32, height: u32, scale: f64) -> Result<()> {
        let fail = |msg: String| Err(Error::ChainInfeasible(format!("{}: {msg}", self.image_id)));
        if self.k() < 2 {
            return fail(format!("chain has {} patches", self.k()));
        }
        let rects = self.rects();
        for (j, r) in rects.iter().enumerate() {
            if !r.within_image(width, height) {
                return fail(format!("patch {j} {r:?} leaves the {width}x{height} image"));
            }
        }
        for j in 1..rects.len() {
            if !rects[j - 1].contains_rect(&rects[j], 1e-9) {
                return fail(format!("patch {j} is not inside patch {}", j - 1));
            }
            if self.sides[j] != (self.sides[j - 1] as f64 * scale).floor() as u32 {
                return fail(format!("side {} does not follow {} by factor {scale}", self.sides[j], self.sides[j - 1]));
            }
        }
        Ok(())
    }
}

/// Centered region anchors are drawn from.
pub fn anchor_region(width: u32, height: u32, ratio: f64, mode: AnchorMode) -> Rect {
    let f = match mode {
        AnchorMode::Area => 1.0 / ratio.sqrt(),
        AnchorMode::Side => 1.0 / ratio,
    };
    let (w, h) = (width as f64 * f, height as f64 * f);
    Rect::new((width as f64 - w) / 2.0, (height as f64 - h) / 2.0, w, h)
}

/// `k` sides starting at `first`, each floored after multiplying by `scale`.
pub fn chain_sides(first: u32, k: usize, scale: f64) -> Vec<u32> {
    let mut sides = Vec::with_capacity(k);
    let mut side = first;
    for _ in 0..k {
        sides.push(side);
        side = (side as f64 * scale).floor() as u32;
    }
    sides
}

fn largest_side(width: u32, height: u32, ax: f64, ay: f64) -> u32 {
    let half = ax.min(width as f64 - ax).min(ay).min(height as f64 - ay);
    (2.0 * half).floor().max(0.0) as u32
}

/// Builds the chain for a given anchor (steps 2 and 3).
pub fn chain_at_anchor(
    image_id: &str,
    width: u32,
    height: u32,
    anchor: [f64; 2],
    params: &ChainParams,
    seed: u64,
) -> Result<RankedChain> {
    params.validate()?;
    let sides = chain_sides(largest_side(width, height, anchor[0], anchor[1]), params.k, params.scale);
    let last = *sides.last().expect("k >= 2");
    if last < params.min_side {
        return Err(Error::ChainInfeasible(format!(
            "{image_id}: smallest patch side {last} < {} for anchor {anchor:?} in {width}x{height}",
            params.min_side
        )));
    }
    let chain = RankedChain { image_id: image_id.to_string(), anchor, sides, seed };
    chain.validate(width, height, params.scale)?;
    Ok(chain)
}

/// Whether every anchor in the region yields a chain with the minimum side.
pub fn chain_feasible(width: u32, height: u32, params: &ChainParams) -> bool {
    let region = anchor_region(width, height, params.anchor_ratio, params.anchor_mode);
    let half = region.x.min(region.y);
    let sides = chain_sides((2.0 * half).floor().max(0.0) as u32, params.k, params.scale);
    sides.last().is_some_and(|&s| s >= params.min_side)
}

/// Samples one chain (steps 1 to 3) from a seeded stream.
///
/// Feasibility is checked for the worst-case anchor, so the outcome depends
/// only on the image size and parameters, never on the draw.
pub fn generate_chain(image_id: &str, width: u32, height: u32, params: &ChainParams, seed: u64) -> Result<RankedChain> {
    params.validate()?;
    if !chain_feasible(width, height, params) {
        return Err(Error::ChainInfeasible(format!(
            "{image_id}: {width}x{height} image too small for {} patches at factor {} with minimum side {}",
            params.k, params.scale, params.min_side
        )));
    }
    let region = anchor_region(width, height, params.anchor_ratio, params.anchor_mode);
    let mut rng = rng_for(seed, &[]);
    let ax = region.x + rng.random::<f64>() * region.w;
    let ay = region.y + rng.random::<f64>() * region.h;
    chain_at_anchor(image_id, width, height, [ax, ay], params, seed)
}

/// Seed of the `index`-th chain drawn for `image_id` under a run seed.
pub fn chain_seed(run_seed: u64, image_id: &str, index: usize) -> u64 {
    crate::seed::derive_seed(run_seed, &[hash_str(image_id), index as u64])
}

/// Ordered `(containing row, contained row)` comparisons within a batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    /// All within-chain pairs for chains laid out consecutively from row `offset`.
    pub fn for_chain_lengths(lengths: &[usize], offset: usize) -> PairSet {
        let mut pairs = Vec::with_capacity(lengths.iter().map(|k| k * k.saturating_sub(1) / 2).sum());
        let mut base = offset;
        for &k in lengths {
            for i in 0..k {
                for j in i + 1..k {
                    pairs.push((base + i, base + j));
                }
            }
            base += k;
        }
        PairSet { pairs }
    }

    pub fn from_pairs(pairs: Vec<(usize, usize)>) -> PairSet {
        PairSet { pairs }
    }

    pub fn shifted(&self, by: usize) -> PairSet {
        PairSet { pairs: self.pairs.iter().map(|&(i, j)| (i + by, j + by)).collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn as_slice(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn to_vec(&self) -> Vec<(usize, usize)> {
        self.pairs.clone()
    }
}

/// Pairs for a minibatch whose rows hold the chains' patches in order.
pub fn enumerate_pairs(chains: &[RankedChain]) -> PairSet {
    let lengths: Vec<usize> = chains.iter().map(RankedChain::k).collect();
    PairSet::for_chain_lengths(&lengths, 0)
}

/// Crops every patch of `chain` and resizes it to `input_size` square (step 4).
pub fn materialize(chain: &RankedChain, image: &Image, input_size: usize) -> Result<Vec<Image>> {
    let rects = chain.rects();
    for r in &rects {
        if !r.within_image(image.width as u32, image.height as u32) {
            return Err(Error::ChainInfeasible(format!(
                "{}: patch {r:?} outside {}x{} image",
                chain.image_id, image.width, image.height
            )));
        }
    }
    Ok(rects.iter().map(|r| image.crop_resize(r, input_size, input_size)).collect())
}

/// [`materialize`] stacked into a `[k, C, input, input]` tensor.
pub fn materialize_tensor(chain: &RankedChain, image: &Image, input_size: usize) -> Result<Tensor<f32>> {
    stack_images(&materialize(chain, image, input_size)?)
}

pub fn read_chains(path: impl AsRef<Path>) -> Result<Vec<RankedChain>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_chains(path: impl AsRef<Path>, chains: &[RankedChain]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for c in chains {
        serde_json::to_writer(&mut buf, c).expect("chain serializes");
        buf.push(b'\n');
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_anchor_on_square_image() {
        let c = chain_at_anchor("a", 1000, 1000, [500.0, 500.0], &ChainParams::default(), 0).unwrap();
        assert_eq!(c.sides, vec![1000, 750, 562, 421, 315]);
    }

    #[test]
    fn anchor_region_area_and_aspect() {
        let r = anchor_region(800, 400, 8.0, AnchorMode::Area);
        assert!((r.area() - 800.0 * 400.0 / 8.0).abs() < 1e-6);
        assert!((r.w / r.h - 2.0).abs() < 1e-12);
        assert!((r.x + r.w / 2.0 - 400.0).abs() < 1e-9 && (r.y + r.h / 2.0 - 200.0).abs() < 1e-9);
        let s = anchor_region(800, 400, 8.0, AnchorMode::Side);
        assert!((s.w - 100.0).abs() < 1e-9 && (s.h - 50.0).abs() < 1e-9);
    }

    #[test]
    fn too_small_image_is_infeasible() {
        let err = generate_chain("tiny", 100, 100, &ChainParams::default(), 1).unwrap_err();
        assert!(matches!(err, Error::ChainInfeasible(_)));
        assert!(generate_chain("ok", 400, 300, &ChainParams::default(), 1).is_ok());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = ChainParams::default();
        p.k = 1;
        assert!(p.validate().is_err());
        p = ChainParams { scale: 1.0, ..Default::default() };
        assert!(p.validate().is_err());
        p = ChainParams { anchor_ratio: 0.5, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn same_seed_same_chain() {
        let p = ChainParams::default();
        assert_eq!(generate_chain("x", 640, 480, &p, 9).unwrap(), generate_chain("x", 640, 480, &p, 9).unwrap());
        assert_ne!(generate_chain("x", 640, 480, &p, 9).unwrap(), generate_chain("x", 640, 480, &p, 10).unwrap());
    }

    #[test]
    fn pair_counts() {
        assert_eq!(PairSet::for_chain_lengths(&[5; 5], 0).len(), 50);
        assert_eq!(PairSet::for_chain_lengths(&[2], 0).len(), 1);
        assert_eq!(PairSet::for_chain_lengths(&[4; 3], 0).len(), 18);
    }

    #[test]
    fn pairs_stay_within_chains() {
        let ps = PairSet::for_chain_lengths(&[3, 4, 2], 10);
        let chain_of = |row: usize| match row - 10 {
            0..=2 => 0,
            3..=6 => 1,
            _ => 2,
        };
        for &(i, j) in ps.as_slice() {
            assert!(i < j);
            assert_eq!(chain_of(i), chain_of(j));
        }
    }

    #[test]
    fn materialize_shapes_and_constant_image() {
        let img = Image::filled(1, 300, 400, 0.6);
        let c = generate_chain("c", 400, 300, &ChainParams::default(), 3).unwrap();
        let t = materialize_tensor(&c, &img, 32).unwrap();
        assert_eq!(t.shape(), &[5, 1, 32, 32]);
        assert!(t.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn materialize_rejects_wrong_image() {
        let img = Image::filled(1, 100, 100, 0.0);
        let c = generate_chain("c", 400, 300, &ChainParams::default(), 3).unwrap();
        assert!(materialize(&c, &img, 32).is_err());
    }

    #[test]
    fn chain_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chains.jsonl");
        let chains: Vec<_> =
            (0..3).map(|i| generate_chain("img", 500, 400, &ChainParams::default(), i).unwrap()).collect();
        write_chains(&path, &chains).unwrap();
        assert_eq!(read_chains(&path).unwrap(), chains);
    }
}
