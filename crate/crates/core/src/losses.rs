//! Counting, ranking and combined losses as graph operations.

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::rankgen::PairSet;
use crate::tensor::{Graph, Real, Var};

/// Scalar loss with its per-term breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub counting: Option<f64>,
    pub ranking: Option<f64>,
    /// Ranking pairs with a positive hinge argument.
    pub active_pairs: Option<usize>,
}

/// Mean over the batch of the summed squared cell error:
/// `(1/M) * sum_i sum_cells (gt_i - pred_i)^2` for `pred` of shape `[M, 1, h, w]`.
pub fn counting_loss<T: Real>(graph: &mut Graph<T>, pred: Var, gt: &[DensityMap]) -> Result<Var> {
    let shape = graph.value(pred).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape("counting_loss", format!("expected [M, 1, h, w] prediction, got {shape:?}")));
    }
    let (m, h, w) = (shape[0], shape[2], shape[3]);
    if gt.len() != m {
        return Err(Error::shape("counting_loss", format!("{m} predictions but {} ground-truth maps", gt.len())));
    }
    let mut target = Vec::with_capacity(m * h * w);
    for (index, d) in gt.iter().enumerate() {
        if (d.height, d.width) != (h, w) {
            return Err(Error::Sample {
                index,
                msg: format!("ground truth is {}x{}, prediction {h}x{w}", d.height, d.width),
            });
        }
        target.extend(d.grid.iter().map(|&v| T::from_f64(v as f64)));
    }
    graph.squared_error(pred, target, 1.0 / m as f64)
}

/// Per-image mean density (count per spatial unit) as a `[B]` vector.
pub fn normalized_counts<T: Real>(graph: &mut Graph<T>, pred: Var) -> Result<Var> {
    let pooled = graph.avg_pool_global(pred)?;
    let shape = graph.value(pooled).shape().to_vec();
    if shape[1] != 1 {
        return Err(Error::shape("normalized_counts", format!("expected one density channel, got {}", shape[1])));
    }
    graph.reshape(pooled, vec![shape[0]])
}

/// Sum of `max(0, c[contained] - c[containing] + epsilon)` over `pairs`.
///
/// Pairs are summed in sorted order, so the value does not depend on the
/// order they were listed in.
pub fn ranking_loss<T: Real>(graph: &mut Graph<T>, counts: Var, pairs: &PairSet, epsilon: f64) -> Result<Var> {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    graph.pairwise_hinge(counts, sorted, epsilon)
}

/// Number of pairs whose hinge is active (strictly positive argument).
pub fn active_pairs<T: Real>(counts: &[T], pairs: &PairSet, epsilon: f64) -> usize {
    pairs.as_slice().iter().filter(|&&(hi, lo)| counts[lo].to_f64() - counts[hi].to_f64() + epsilon > 0.0).count()
}

/// `counting + lambda * ranking`.
pub fn multitask_loss<T: Real>(graph: &mut Graph<T>, counting: Var, ranking: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = graph.scale(ranking, lambda)?;
    graph.add(counting, weighted)
}
