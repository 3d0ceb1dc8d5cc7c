//! Spatial token container, window partitioning, and the reversible
//! [`MergePlan`] record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix};

/// An `H x W` grid of `d`-dimensional tokens.
///
/// Row `i` of `tokens` is the token at `(i / W, i % W)`. `last_merge_age[i]`
/// counts denoising steps since position `i` last took part in a merge.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    pub tokens: Matrix,
    pub last_merge_age: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(Error::Shape(format!(
                "{}x{} grid needs {} tokens, got {}",
                height,
                width,
                height * width,
                tokens.rows()
            )));
        }
        Ok(Self {
            height,
            width,
            last_merge_age: vec![0; tokens.rows()],
            tokens,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col)` of token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// Resets positions merged during this step and ages the rest by one.
    pub fn tick_ages(&mut self, merged: &[bool]) {
        debug_assert_eq!(merged.len(), self.last_merge_age.len());
        for (age, &m) in self.last_merge_age.iter_mut().zip(merged) {
            *age = if m { 0 } else { age.saturating_add(1) };
        }
    }
}

/// Applies one plan's membership to the merge-age counters.
pub fn tick_merge_ages(grid: &mut TokenGrid, plan: &MergePlan) {
    let mask = plan.merged_mask();
    grid.tick_ages(&mask);
}

/// Non-overlapping `m x m` windows in row-major window order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPartition {
    pub window_size: usize,
    pub windows: Vec<Vec<usize>>,
}

impl WindowPartition {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

pub fn partition_windows(grid: &TokenGrid, m: usize) -> Result<WindowPartition> {
    window_partition(grid.height(), grid.width(), m)
}

pub fn window_partition(height: usize, width: usize, m: usize) -> Result<WindowPartition> {
    if m == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "a {height}x{width} grid cannot be split into {m}x{m} windows; pad the grid or pick a window size dividing both sides"
        )));
    }
    let (wh, ww) = (height / m, width / m);
    let mut windows = Vec::with_capacity(wh * ww);
    for bi in 0..wh {
        for bj in 0..ww {
            let mut w = Vec::with_capacity(m * m);
            for di in 0..m {
                for dj in 0..m {
                    w.push((bi * m + di) * width + bj * m + dj);
                }
            }
            windows.push(w);
        }
    }
    Ok(WindowPartition {
        window_size: m,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Structure,
    Detail,
}

impl std::fmt::Display for MergeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeKind::Structure => "structure",
            MergeKind::Detail => "detail",
        })
    }
}

/// Tokens collapsed into one survivor row.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeGroup {
    pub survivor: usize,
    /// All positions in the group, survivor included, ascending.
    pub members: Vec<usize>,
    /// Weight per entry of `members`.
    pub weights: Vec<f64>,
    // softmax logits per member; empty means uniform weights
    logits: Vec<f64>,
    // selection rank of each absorbed member, None for the survivor
    ranks: Vec<Option<usize>>,
}

impl MergeGroup {
    /// Uniform-weight group; every non-survivor member carries `rank`.
    pub fn uniform(survivor: usize, mut members: Vec<usize>, rank: usize) -> Self {
        members.sort_unstable();
        let w = 1.0 / members.len() as f64;
        let ranks = members
            .iter()
            .map(|&m| (m != survivor).then_some(rank))
            .collect();
        Self {
            survivor,
            weights: vec![w; members.len()],
            members,
            logits: Vec::new(),
            ranks,
        }
    }

    /// Softmax-weighted group. `entries` are `(position, logit, rank)`;
    /// the survivor's rank is ignored.
    pub fn softmax(survivor: usize, mut entries: Vec<(usize, f64, usize)>) -> Self {
        entries.sort_by_key(|e| e.0);
        let logits: Vec<f64> = entries.iter().map(|e| e.1).collect();
        Self {
            survivor,
            members: entries.iter().map(|e| e.0).collect(),
            weights: softmax(&logits),
            ranks: entries
                .iter()
                .map(|e| (e.0 != survivor).then_some(e.2))
                .collect(),
            logits,
        }
    }

    pub fn absorbed(&self) -> usize {
        self.members.len() - 1
    }

    fn retain_absorbed(&self, keep: impl Fn(usize) -> bool) -> Option<MergeGroup> {
        let idx: Vec<usize> = (0..self.members.len())
            .filter(|&i| self.members[i] == self.survivor || keep(self.members[i]))
            .collect();
        if idx.len() < 2 {
            return None;
        }
        let members: Vec<usize> = idx.iter().map(|&i| self.members[i]).collect();
        let ranks = idx.iter().map(|&i| self.ranks[i]).collect();
        let (weights, logits) = if self.logits.is_empty() {
            (vec![1.0 / members.len() as f64; members.len()], Vec::new())
        } else {
            let l: Vec<f64> = idx.iter().map(|&i| self.logits[i]).collect();
            (softmax(&l), l)
        };
        Some(MergeGroup {
            survivor: self.survivor,
            members,
            weights,
            logits,
            ranks,
        })
    }
}

/// Which source positions were merged into which survivors.
///
/// Compressed output rows are laid out as group survivors (ascending
/// survivor index) followed by kept tokens (ascending index).
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub kind: MergeKind,
    pub groups: Vec<MergeGroup>,
    pub kept: Vec<usize>,
    pub source_count: usize,
    pub warnings: Vec<String>,
}

impl MergePlan {
    pub fn noop(kind: MergeKind, n: usize) -> Self {
        Self {
            kind,
            groups: Vec::new(),
            kept: (0..n).collect(),
            source_count: n,
            warnings: Vec::new(),
        }
    }

    /// Builds a plan from groups; every position not in a group is kept.
    pub fn from_groups(kind: MergeKind, n: usize, mut groups: Vec<MergeGroup>) -> Result<Self> {
        groups.sort_by_key(|g| g.survivor);
        let mut seen = vec![false; n];
        for g in &groups {
            for &m in &g.members {
                if m >= n {
                    return Err(Error::Shape(format!(
                        "merge member {m} outside a {n}-token grid"
                    )));
                }
                if std::mem::replace(&mut seen[m], true) {
                    return Err(Error::InvalidInput(format!(
                        "position {m} appears in more than one merge group"
                    )));
                }
            }
        }
        let kept = (0..n).filter(|&i| !seen[i]).collect();
        let plan = Self {
            kind,
            groups,
            kept,
            source_count: n,
            warnings: Vec::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    /// N' = |kept| + |groups|.
    pub fn result_count(&self) -> usize {
        self.kept.len() + self.groups.len()
    }

    /// Number of tokens absorbed into a survivor, N - N'.
    pub fn merged_count(&self) -> usize {
        self.source_count - self.result_count()
    }

    pub fn is_noop(&self) -> bool {
        self.groups.is_empty()
    }

    /// Source position behind each compressed row.
    pub fn layout(&self) -> Vec<usize> {
        self.groups
            .iter()
            .map(|g| g.survivor)
            .chain(self.kept.iter().copied())
            .collect()
    }

    /// True for every position belonging to a group, survivor included.
    pub fn merged_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.source_count];
        for g in &self.groups {
            for &m in &g.members {
                mask[m] = true;
            }
        }
        mask
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.source_count;
        let mut count = vec![0u8; n];
        let mut bump = |i: usize| -> Result<()> {
            if i >= n {
                return Err(Error::Shape(format!("plan index {i} outside {n} tokens")));
            }
            count[i] = count[i].saturating_add(1);
            Ok(())
        };
        for g in &self.groups {
            if g.members.len() != g.weights.len() || !g.members.contains(&g.survivor) {
                return Err(Error::InvalidInput(format!(
                    "malformed group for survivor {}",
                    g.survivor
                )));
            }
            let sum: f64 = g.weights.iter().sum();
            if g.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "group {} weights must be non-negative and sum to 1",
                    g.survivor
                )));
            }
            for &m in &g.members {
                bump(m)?;
            }
        }
        for &k in &self.kept {
            bump(k)?;
        }
        if let Some(i) = count.iter().position(|&c| c != 1) {
            return Err(Error::InvalidInput(format!(
                "position {i} covered {} times by the plan",
                count[i]
            )));
        }
        Ok(())
    }

    /// Drops the lowest-priority merges until at most `max_merged` tokens
    /// are absorbed. Merges sharing a rank (a whole window) are dropped
    /// together.
    pub fn truncate(&self, max_merged: usize) -> MergePlan {
        if self.merged_count() <= max_merged {
            return self.clone();
        }
        let mut by_rank: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &self.groups {
            for r in g.ranks.iter().flatten() {
                *by_rank.entry(*r).or_default() += 1;
            }
        }
        let mut budget = max_merged;
        let mut cutoff = 0usize;
        for (&rank, &size) in &by_rank {
            if size > budget {
                break;
            }
            budget -= size;
            cutoff = rank + 1;
        }
        let mut kept = self.kept.clone();
        let mut groups = Vec::new();
        for g in &self.groups {
            let rank_of = |m: usize| {
                g.members
                    .iter()
                    .position(|&x| x == m)
                    .and_then(|i| g.ranks[i])
            };
            let keep = |m: usize| rank_of(m).is_some_and(|r| r < cutoff);
            match g.retain_absorbed(keep) {
                Some(ng) => {
                    kept.extend(g.members.iter().filter(|m| !ng.members.contains(m)));
                    groups.push(ng);
                }
                None => kept.extend(&g.members),
            }
        }
        kept.sort_unstable();
        let mut warnings = self.warnings.clone();
        warnings.push(format!(
            "truncated from {} to {} merged tokens",
            self.merged_count(),
            self.source_count - kept.len() - groups.len()
        ));
        MergePlan {
            kind: self.kind,
            groups,
            kept,
            source_count: self.source_count,
            warnings,
        }
    }
}

/// Builds the compressed `N' x d` token matrix for `plan`.
pub fn apply_merge(tokens: &Matrix, plan: &MergePlan) -> Result<Matrix> {
    if tokens.rows() != plan.source_count {
        return Err(Error::Shape(format!(
            "plan built for {} tokens applied to {}",
            plan.source_count,
            tokens.rows()
        )));
    }
    let d = tokens.cols();
    let mut out = Matrix::zeros(plan.result_count(), d);
    for (r, g) in plan.groups.iter().enumerate() {
        let row = out.row_mut(r);
        for (&m, &w) in g.members.iter().zip(&g.weights) {
            if m >= tokens.rows() {
                return Err(Error::Shape(format!("merge member {m} out of range")));
            }
            for (o, &x) in row.iter_mut().zip(tokens.row(m)) {
                *o += w * x;
            }
        }
    }
    let base = plan.groups.len();
    for (r, &k) in plan.kept.iter().enumerate() {
        if k >= tokens.rows() {
            return Err(Error::Shape(format!("kept index {k} out of range")));
        }
        out.row_mut(base + r).copy_from_slice(tokens.row(k));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, d: usize) -> TokenGrid {
        let data = (0..h * w * d).map(|i| i as f64).collect();
        TokenGrid::new(h, w, Matrix::from_vec(h * w, d, data).unwrap()).unwrap()
    }

    #[test]
    fn partition_4x4() {
        let p = partition_windows(&grid(4, 4, 1), 2).unwrap();
        assert_eq!(
            p.windows,
            vec![
                vec![0, 1, 4, 5],
                vec![2, 3, 6, 7],
                vec![8, 9, 12, 13],
                vec![10, 11, 14, 15]
            ]
        );
        let p = partition_windows(&grid(2, 2, 1), 2).unwrap();
        assert_eq!(p.windows, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn partition_6x4_is_disjoint_cover() {
        let p = partition_windows(&grid(6, 4, 1), 2).unwrap();
        assert_eq!(p.len(), 6);
        let mut all: Vec<usize> = p.windows.concat();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn partition_rejects_indivisible() {
        assert!(matches!(
            partition_windows(&grid(6, 4, 1), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn merge_identical_tokens() {
        let t = Matrix::filled(4, 3, 0.25);
        let plan = MergePlan::from_groups(
            MergeKind::Structure,
            4,
            vec![MergeGroup::uniform(0, vec![0, 1, 2, 3], 0)],
        )
        .unwrap();
        let out = apply_merge(&t, &plan).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.row(0), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn merge_two_orthogonal_tokens() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let plan = MergePlan::from_groups(
            MergeKind::Detail,
            2,
            vec![MergeGroup::softmax(1, vec![(0, 0.3, 0), (1, 0.3, 0)])],
        )
        .unwrap();
        assert_eq!(plan.groups[0].weights, vec![0.5, 0.5]);
        assert_eq!(apply_merge(&t, &plan).unwrap().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn empty_plan_is_identity_layout() {
        let g = grid(2, 3, 2);
        let plan = MergePlan::noop(MergeKind::Structure, 6);
        assert_eq!(plan.result_count(), 6);
        assert_eq!(apply_merge(&g.tokens, &plan).unwrap(), g.tokens);
    }

    #[test]
    fn apply_rejects_wrong_grid() {
        let plan = MergePlan::noop(MergeKind::Structure, 5);
        assert!(apply_merge(&Matrix::zeros(4, 2), &plan).is_err());
    }

    #[test]
    fn from_groups_rejects_overlap() {
        let r = MergePlan::from_groups(
            MergeKind::Structure,
            4,
            vec![
                MergeGroup::uniform(0, vec![0, 1], 0),
                MergeGroup::uniform(1, vec![1, 2], 1),
            ],
        );
        assert!(r.is_err());
    }

    #[test]
    fn ticks() {
        let mut g = grid(2, 2, 1);
        let all = MergePlan::from_groups(
            MergeKind::Structure,
            4,
            vec![MergeGroup::uniform(0, vec![0, 1, 2, 3], 0)],
        )
        .unwrap();
        g.last_merge_age = vec![3, 3, 3, 3];
        tick_merge_ages(&mut g, &all);
        assert_eq!(g.last_merge_age, vec![0, 0, 0, 0]);

        tick_merge_ages(&mut g, &MergePlan::noop(MergeKind::Structure, 4));
        assert_eq!(g.last_merge_age, vec![1, 1, 1, 1]);

        let half = MergePlan::from_groups(
            MergeKind::Detail,
            4,
            vec![MergeGroup::uniform(1, vec![1, 3], 0)],
        )
        .unwrap();
        tick_merge_ages(&mut g, &half);
        assert_eq!(g.last_merge_age, vec![2, 0, 2, 0]);
    }

    #[test]
    fn truncate_drops_lowest_priority_first() {
        let plan = MergePlan::from_groups(
            MergeKind::Detail,
            6,
            vec![
                MergeGroup::softmax(0, vec![(0, 0.1, 0), (3, 0.5, 0), (4, 0.2, 2)]),
                MergeGroup::softmax(1, vec![(1, 0.1, 0), (5, 0.9, 1)]),
            ],
        )
        .unwrap();
        assert_eq!(plan.merged_count(), 3);
        let t = plan.truncate(2);
        t.validate().unwrap();
        assert_eq!(t.merged_count(), 2);
        assert_eq!(t.kept, vec![2, 4]);
        assert_eq!(t.groups[0].members, vec![0, 3]);
        let t = plan.truncate(0);
        assert!(t.is_noop());
        assert_eq!(t.kept, (0..6).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn weighted_merge_matches_naive_loop(seed in any::<u64>(), h in 1usize..=4, w in 1usize..=4) {
            let (h, w) = (2 * h, 2 * w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let t = Matrix::from_vec(h * w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let part = window_partition(h, w, 2).unwrap();
            let mut groups = Vec::new();
            for (r, win) in part.windows.iter().enumerate() {
                if rng.random_bool(0.5) {
                    let e = win.iter().map(|&m| (m, rng.random_range(-1.0..1.0), r)).collect();
                    groups.push(MergeGroup::softmax(win[0], e));
                }
            }
            let plan = MergePlan::from_groups(MergeKind::Structure, h * w, groups).unwrap();
            let out = apply_merge(&t, &plan).unwrap();
            for (r, g) in plan.groups.iter().enumerate() {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..g.members.len() {
                        acc += g.weights[k] * t.get(g.members[k], c);
                    }
                    prop_assert!((out.get(r, c) - acc).abs() < 1e-12);
                }
            }
            prop_assert_eq!(out.rows(), plan.result_count());
        }

        #[test]
        fn partition_is_bijection(hb in 1usize..=6, wb in 1usize..=6, m in 1usize..=4) {
            let (h, w) = (hb * m, wb * m);
            let part = window_partition(h, w, m).unwrap();
            let mut slot = vec![None; h * w];
            for (k, win) in part.windows.iter().enumerate() {
                prop_assert_eq!(win.len(), m * m);
                for (s, &i) in win.iter().enumerate() {
                    prop_assert!(slot[i].is_none());
                    slot[i] = Some((k, s));
                }
                // contiguous m x m block
                let (r0, c0) = (win[0] / w, win[0] % w);
                for (s, &i) in win.iter().enumerate() {
                    prop_assert_eq!((i / w, i % w), (r0 + s / m, c0 + s % m));
                }
            }
            prop_assert!(slot.iter().all(Option::is_some));
        }

        #[test]
        fn ages_bounded_by_elapsed_steps(seed in any::<u64>(), steps in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = grid(2, 4, 1);
            for step in 1..=steps {
                let mask: Vec<bool> = (0..8).map(|_| rng.random_bool(0.3)).collect();
                g.tick_ages(&mask);
                prop_assert!(g.last_merge_age.iter().all(|&a| a as usize <= step));
            }
        }
    }
}
