use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::{sample_labeled_patch, LabeledScene, PatchSampler};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::image::{stack_images, Image};
use crate::rankgen::{generate_chain, materialize, ChainParams, PairSet, RankedChain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchKind {
    Counting,
    Ranking,
    Mixed,
}

impl std::fmt::Display for BatchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BatchKind::Counting => "counting",
            BatchKind::Ranking => "ranking",
            BatchKind::Mixed => "mixed",
        })
    }
}

/// Unlabeled images plus an optional pool of precomputed chains.
///
/// With an empty pool, every ranking batch draws fresh chains (new random
/// anchors) from distinct images.
#[derive(Debug, Clone, Default)]
pub struct RankingSet {
    pub images: Vec<(String, Image)>,
    pub chains: Vec<RankedChain>,
}

impl RankingSet {
    pub fn new(images: Vec<(String, Image)>) -> Self {
        RankingSet { images, chains: Vec::new() }
    }

    pub fn with_chains(images: Vec<(String, Image)>, chains: Vec<RankedChain>) -> Result<Self> {
        for c in &chains {
            if !images.iter().any(|(id, _)| *id == c.image_id) {
                return Err(Error::MissingAnnotations(vec![c.image_id.clone()]));
            }
        }
        Ok(RankingSet { images, chains })
    }

    fn image(&self, id: &str) -> Option<&Image> {
        self.images.iter().find(|(i, _)| i == id).map(|(_, im)| im)
    }

    /// How many chains one batch may draw from.
    pub fn available(&self) -> usize {
        if self.chains.is_empty() {
            self.images.len()
        } else {
            self.chains.len()
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sources<'a> {
    pub labeled: Option<&'a [LabeledScene]>,
    pub ranking: Option<&'a RankingSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub counting_batch: usize,
    pub chains_per_batch: usize,
    pub chain: ChainParams,
    pub sampler: PatchSampler,
}

impl BatchConfig {
    pub fn new(input_size: usize, output_stride: usize) -> Result<Self> {
        Ok(BatchConfig {
            counting_batch: 25,
            chains_per_batch: 5,
            chain: ChainParams::default(),
            sampler: PatchSampler::new(input_size, output_stride)?,
        })
    }

    pub fn input_size(&self) -> usize {
        self.sampler.input_size
    }
}

/// One training batch. Counting rows come first in a mixed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub kind: BatchKind,
    pub images: Tensor<f32>,
    /// One map per counting row.
    pub gt: Vec<DensityMap>,
    /// Pairs over batch row indices, `(containing, contained)`.
    pub pairs: PairSet,
    pub counting_rows: Range<usize>,
    pub ranking_rows: Range<usize>,
    /// Exact labeled count per counting row.
    pub counts: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn counting_part(
    scenes: &[LabeledScene],
    config: &BatchConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Image>, Vec<DensityMap>, Vec<usize>)> {
    let n = config.counting_batch;
    if scenes.len() < n {
        return Err(Error::Insufficient { what: "labeled scenes", required: n, available: scenes.len() });
    }
    let mut images = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for i in sample(rng, scenes.len(), n) {
        let p = sample_labeled_patch(&scenes[i], &config.sampler, rng)
            .map_err(|e| Error::Sample { index: i, msg: e.to_string() })?;
        images.push(p.image);
        gt.push(p.gt);
        counts.push(p.count);
    }
    Ok((images, gt, counts))
}

fn ranking_part(set: &RankingSet, config: &BatchConfig, rng: &mut impl Rng) -> Result<(Vec<Image>, Vec<usize>)> {
    let n = config.chains_per_batch;
    if set.available() < n {
        return Err(Error::Insufficient { what: "ranking chains", required: n, available: set.available() });
    }
    let input = config.input_size();
    let mut images = Vec::new();
    let mut lengths = Vec::with_capacity(n);
    for i in sample(rng, set.available(), n) {
        let patches = if set.chains.is_empty() {
            let (id, image) = &set.images[i];
            let chain = generate_chain(id, image.width as u32, image.height as u32, &config.chain, rng.random())?;
            materialize(&chain, image, input)?
        } else {
            let chain = &set.chains[i];
            let image =
                set.image(&chain.image_id).ok_or_else(|| Error::MissingAnnotations(vec![chain.image_id.clone()]))?;
            materialize(chain, image, input)?
        };
        lengths.push(patches.len());
        images.extend(patches);
    }
    Ok((images, lengths))
}

/// Builds a batch of the requested kind. The result depends only on the
/// sources, the config and the RNG state.
pub fn assemble_batch(
    kind: BatchKind,
    sources: Sources<'_>,
    config: &BatchConfig,
    rng: &mut impl Rng,
) -> Result<Minibatch> {
    let need_labeled = matches!(kind, BatchKind::Counting | BatchKind::Mixed);
    let need_ranking = matches!(kind, BatchKind::Ranking | BatchKind::Mixed);
    let (mut images, gt, counts) = if need_labeled {
        let scenes = sources.labeled.ok_or(Error::Insufficient {
            what: "labeled scenes",
            required: config.counting_batch,
            available: 0,
        })?;
        counting_part(scenes, config, rng)?
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    let counting_rows = 0..images.len();
    let mut pairs = PairSet::default();
    if need_ranking {
        let set = sources.ranking.ok_or(Error::Insufficient {
            what: "ranking chains",
            required: config.chains_per_batch,
            available: 0,
        })?;
        let (ranked, lengths) = ranking_part(set, config, rng)?;
        pairs = PairSet::for_chain_lengths(&lengths, images.len());
        images.extend(ranked);
    }
    let ranking_rows = counting_rows.end..images.len();
    Ok(Minibatch { kind, images: stack_images(&images)?, gt, pairs, counting_rows, ranking_rows, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_scene, CountDistribution, SceneParams};
    use crate::seed::rng_for;

    fn labeled(n: usize) -> Vec<LabeledScene> {
        let p = SceneParams {
            width: 96,
            height: 96,
            count: CountDistribution::Poisson { mean: 20.0 },
            ..Default::default()
        };
        (0..n)
            .map(|i| {
                let s = generate_scene(&format!("l{i}"), &p, i as u64).unwrap();
                LabeledScene::new(s.image, s.annotation).unwrap()
            })
            .collect()
    }

    fn unlabeled(n: usize) -> RankingSet {
        let p = SceneParams { width: 200, height: 200, ..Default::default() };
        RankingSet::new(
            (0..n)
                .map(|i| (format!("u{i}"), generate_scene(&format!("u{i}"), &p, 100 + i as u64).unwrap().image))
                .collect(),
        )
    }

    #[test]
    fn batch_sizes_and_pair_offsets() {
        let cfg = BatchConfig::new(32, 8).unwrap();
        let l = labeled(25);
        let r = unlabeled(5);
        let src = Sources { labeled: Some(&l), ranking: Some(&r) };
        let mut rng = rng_for(9, &[]);

        let c = assemble_batch(BatchKind::Counting, src, &cfg, &mut rng).unwrap();
        assert_eq!((c.len(), c.gt.len(), c.pairs.len()), (25, 25, 0));

        let k = assemble_batch(BatchKind::Ranking, src, &cfg, &mut rng).unwrap();
        assert_eq!((k.len(), k.pairs.len(), k.gt.len()), (25, 50, 0));

        let m = assemble_batch(BatchKind::Mixed, src, &cfg, &mut rng).unwrap();
        assert_eq!(m.len(), 50);
        assert_eq!(m.images.shape(), &[50, 1, 32, 32]);
        assert_eq!((m.counting_rows.clone(), m.ranking_rows.clone()), (0..25, 25..50));
        for &(a, b) in m.pairs.as_slice() {
            assert!(m.ranking_rows.contains(&a) && m.ranking_rows.contains(&b));
        }
    }

    #[test]
    fn shortfall_reports_required_and_available() {
        let cfg = BatchConfig::new(32, 8).unwrap();
        let l = labeled(3);
        let err = assemble_batch(
            BatchKind::Counting,
            Sources { labeled: Some(&l), ranking: None },
            &cfg,
            &mut rng_for(0, &[]),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("25") && err.contains('3'), "{err}");
        assert!(assemble_batch(BatchKind::Ranking, Sources::default(), &cfg, &mut rng_for(0, &[])).is_err());
    }

    #[test]
    fn same_rng_state_same_batch() {
        let cfg = BatchConfig { counting_batch: 4, chains_per_batch: 2, ..BatchConfig::new(32, 8).unwrap() };
        let l = labeled(6);
        let r = unlabeled(3);
        let src = Sources { labeled: Some(&l), ranking: Some(&r) };
        let a = assemble_batch(BatchKind::Mixed, src, &cfg, &mut rng_for(5, &[1])).unwrap();
        let b = assemble_batch(BatchKind::Mixed, src, &cfg, &mut rng_for(5, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pooled_chains_are_used() {
        let r = unlabeled(2);
        let cfg = BatchConfig { chains_per_batch: 2, ..BatchConfig::new(32, 8).unwrap() };
        let chains: Vec<RankedChain> = r
            .images
            .iter()
            .map(|(id, im)| generate_chain(id, im.width as u32, im.height as u32, &cfg.chain, 7).unwrap())
            .collect();
        let pooled = RankingSet::with_chains(r.images.clone(), chains).unwrap();
        let b = assemble_batch(
            BatchKind::Ranking,
            Sources { labeled: None, ranking: Some(&pooled) },
            &cfg,
            &mut rng_for(1, &[]),
        )
        .unwrap();
        assert_eq!((b.len(), b.pairs.len()), (10, 20));
    }
}
