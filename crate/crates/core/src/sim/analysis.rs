//! Frequency and spatial-redundancy diagnostics over token grids.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::{map_indexed, Parallelism};
use crate::numerics::{cosine_with_norms, haar_dwt2, l2_norm, SubbandNorms};
use crate::sim::trajectory::channel_field;
use crate::tokengrid::TokenGrid;

/// Subband norms of every channel, summarized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubbandSummary {
    pub mean: SubbandNorms,
    pub min: SubbandNorms,
    pub max: SubbandNorms,
}

fn fold(norms: &[SubbandNorms]) -> SubbandSummary {
    let n = norms.len().max(1) as f64;
    let mut mean = SubbandNorms::default();
    let inf = f64::INFINITY;
    let mut min = SubbandNorms {
        ll: inf,
        lh: inf,
        hl: inf,
        hh: inf,
    };
    let mut max = SubbandNorms::default();
    for s in norms {
        mean.ll += s.ll / n;
        mean.lh += s.lh / n;
        mean.hl += s.hl / n;
        mean.hh += s.hh / n;
        min.ll = min.ll.min(s.ll);
        min.lh = min.lh.min(s.lh);
        min.hl = min.hl.min(s.hl);
        min.hh = min.hh.min(s.hh);
        max.ll = max.ll.max(s.ll);
        max.lh = max.lh.max(s.lh);
        max.hl = max.hl.max(s.hl);
        max.hh = max.hh.max(s.hh);
    }
    if norms.is_empty() {
        min = SubbandNorms::default();
    }
    SubbandSummary { mean, min, max }
}

/// Channel-wise single-level Haar norms of a grid.
pub fn subband_summary(grid: &TokenGrid) -> Result<SubbandSummary> {
    let norms = (0..grid.dim())
        .map(|c| haar_dwt2(&channel_field(grid, c)).map(|b| b.norms()))
        .collect::<Result<Vec<_>>>()?;
    Ok(fold(&norms))
}

/// Combines several summaries (for example across layers) into one.
pub fn merge_summaries(parts: &[SubbandSummary]) -> SubbandSummary {
    let means: Vec<SubbandNorms> = parts.iter().map(|p| p.mean).collect();
    let mut out = fold(&means);
    if !parts.is_empty() {
        out.min = fold(&parts.iter().map(|p| p.min).collect::<Vec<_>>()).min;
        out.max = fold(&parts.iter().map(|p| p.max).collect::<Vec<_>>()).max;
    }
    out
}

/// Per-step summaries of a trajectory.
pub fn analyze_frequency(traj: &[TokenGrid], par: Parallelism) -> Result<Vec<SubbandSummary>> {
    map_indexed(par, traj.len(), |t| subband_summary(&traj[t]))
        .into_iter()
        .collect()
}

/// Fraction of the total absolute step-to-step change of `series` that
/// falls within transitions ending at or before step `boundary`.
/// Returns `None` when the series never changes.
pub fn change_share_before(series: &[f64], boundary: usize) -> Option<f64> {
    let mut early = 0.0;
    let mut total = 0.0;
    for (t, w) in series.windows(2).enumerate() {
        let d = (w[1] - w[0]).abs();
        total += d;
        if t < boundary {
            early += d;
        }
    }
    (total > 0.0).then(|| early / total)
}

/// LL and high-band change concentration of a trajectory: the share of
/// cumulative LL change in the first `fraction` of steps and the share of
/// cumulative high-band change after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub boundary_step: usize,
    pub low_early_share: f64,
    pub high_late_share: f64,
}

pub fn change_concentration(summaries: &[SubbandSummary], fraction: f64) -> Concentration {
    let boundary = (fraction * summaries.len() as f64).round() as usize;
    let ll: Vec<f64> = summaries.iter().map(|s| s.mean.ll).collect();
    let hi: Vec<f64> = summaries.iter().map(|s| s.mean.high()).collect();
    Concentration {
        boundary_step: boundary,
        low_early_share: change_share_before(&ll, boundary).unwrap_or(0.0),
        high_late_share: change_share_before(&hi, boundary).map_or(0.0, |e| 1.0 - e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyStats {
    /// Mean Euclidean grid distance from each token to its most similar
    /// other token.
    pub mean_distance: f64,
    /// Mean of each token's highest cosine similarity to another token.
    pub mean_similarity: f64,
}

/// Most similar other token of every token (ties to the lowest index) and
/// the similarity, computed by brute force.
pub fn nearest_neighbours(grid: &TokenGrid, par: Parallelism) -> Vec<(usize, f64)> {
    let n = grid.len();
    let norms: Vec<f64> = grid.tokens.iter_rows().map(l2_norm).collect();
    map_indexed(par, n, |i| {
        let xi = grid.tokens.row(i);
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in (0..n).filter(|&j| j != i) {
            let s = cosine_with_norms(xi, grid.tokens.row(j), norms[i], norms[j]);
            if s > best.1 {
                best = (j, s);
            }
        }
        best
    })
}

pub fn analyze_redundancy(grid: &TokenGrid, par: Parallelism) -> RedundancyStats {
    let n = grid.len();
    if n < 2 {
        return RedundancyStats {
            mean_distance: 0.0,
            mean_similarity: 0.0,
        };
    }
    let nn = nearest_neighbours(grid, par);
    let mut dist = 0.0;
    let mut sim = 0.0;
    for (i, &(j, s)) in nn.iter().enumerate() {
        let (ri, ci) = grid.coords(i);
        let (rj, cj) = grid.coords(j);
        let dr = ri as f64 - rj as f64;
        let dc = ci as f64 - cj as f64;
        dist += (dr * dr + dc * dc).sqrt();
        sim += s;
    }
    RedundancyStats {
        mean_distance: dist / n as f64,
        mean_similarity: sim / n as f64,
    }
}
