//! Similarity-prioritized structure merging (windowed, early steps),
//! inattentive-prioritized detail merging (attention-driven, late steps),
//! and unmerging with cross-step blending.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::numerics::{argsort_desc, cosine_similarity, Matrix};
use crate::tokengrid::{MergeGroup, MergeKind, MergePlan, TokenGrid, WindowPartition};

/// How many candidates a plan merges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Merge the top fraction of candidates.
    Ratio(f64),
    /// Merge candidates whose score is strictly above the threshold.
    Threshold(f64),
}

/// `floor(fraction * n)`, tolerant of representation error such as
/// `0.3 * 10 = 2.9999999999999996`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let raw = (fraction.clamp(0.0, 1.0) * n as f64 + 1e-9).floor() as usize;
    raw.min(n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowScore {
    pub window_index: usize,
    pub sim_score: f64,
    pub fre_score: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore {
    pub token_index: usize,
    pub ina_score: f64,
    pub fre_score: f64,
    pub total: f64,
    /// Most similar attentive token, set for inattentive tokens only.
    pub best_match: Option<usize>,
    pub best_sim: Option<f64>,
}

/// Output of [`idm_score_tokens`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetailScores {
    /// All tokens, descending by total priority (ties by index).
    pub ranked: Vec<TokenScore>,
    /// Number of leading entries of `ranked` forming the inattentive group.
    pub inattentive_len: usize,
}

impl DetailScores {
    pub fn inattentive(&self) -> &[TokenScore] {
        &self.ranked[..self.inattentive_len]
    }

    pub fn attentive(&self) -> &[TokenScore] {
        &self.ranked[self.inattentive_len..]
    }

    pub fn token_count(&self) -> usize {
        self.ranked.len()
    }
}

/// Per-token frequency priority `T_x / mean(T)`; uniform 1 when every
/// counter is zero.
pub fn frequency_scores(ages: &[u32]) -> Vec<f64> {
    if ages.is_empty() {
        return Vec::new();
    }
    let mean = ages.iter().map(|&a| a as f64).sum::<f64>() / ages.len() as f64;
    if mean == 0.0 {
        return vec![1.0; ages.len()];
    }
    ages.iter().map(|&a| a as f64 / mean).collect()
}

/// Mean cosine similarity over ordered pairs of distinct window members.
pub fn window_similarity(tokens: &Matrix, window: &[usize]) -> f64 {
    let n = window.len();
    if n < 2 {
        return 1.0;
    }
    let mut acc = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            acc += cosine_similarity(tokens.row(window[a]), tokens.row(window[b]));
        }
    }
    2.0 * acc / (n * (n - 1)) as f64
}

/// Scores each window and returns them sorted by descending total.
pub fn ssm_score_windows(
    grid: &TokenGrid,
    part: &WindowPartition,
    alpha_s: f64,
) -> Result<Vec<WindowScore>> {
    if part.window_size < 2 {
        return Err(Error::Config(
            "structure merging needs a window size of at least 2".into(),
        ));
    }
    let covered: usize = part.windows.iter().map(Vec::len).sum();
    if covered != grid.len() || part.windows.iter().flatten().any(|&i| i >= grid.len()) {
        return Err(Error::Shape(format!(
            "window partition covers {covered} positions, grid has {}",
            grid.len()
        )));
    }
    let fre = frequency_scores(&grid.last_merge_age);
    let mut scores: Vec<WindowScore> = part
        .windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let sim = window_similarity(&grid.tokens, w);
            let fre_w = w.iter().map(|&i| fre[i]).sum::<f64>() / w.len() as f64;
            WindowScore {
                window_index: k,
                sim_score: sim,
                fre_score: fre_w,
                total: sim + alpha_s * fre_w,
            }
        })
        .collect();
    let totals: Vec<f64> = scores.iter().map(|s| s.total).collect();
    let order = argsort_desc(&totals);
    scores = order.into_iter().map(|i| scores[i]).collect();
    Ok(scores)
}

/// Turns ranked window scores into a structure merge plan.
pub fn ssm_build_plan(
    scores: &[WindowScore],
    part: &WindowPartition,
    selector: Selector,
) -> Result<MergePlan> {
    let n: usize = part.windows.iter().map(Vec::len).sum();
    let take = match selector {
        Selector::Ratio(r) => fraction_count(r, scores.len()),
        Selector::Threshold(t) => scores.iter().take_while(|s| s.total > t).count(),
    };
    let groups = scores[..take]
        .iter()
        .enumerate()
        .map(|(rank, s)| {
            let w = part.windows.get(s.window_index).ok_or_else(|| {
                Error::Mismatch(format!("window {} not in partition", s.window_index))
            })?;
            let survivor = *w.iter().min().expect("non-empty window");
            Ok(MergeGroup::uniform(survivor, w.clone(), rank))
        })
        .collect::<Result<Vec<_>>>()?;
    MergePlan::from_groups(MergeKind::Structure, n, groups)
}

fn check_row_stochastic(attn: &Matrix, n: usize) -> Result<()> {
    if attn.rows() != n || attn.cols() != n {
        return Err(Error::Shape(format!(
            "attention map is {}x{}, expected {n}x{n}",
            attn.rows(),
            attn.cols()
        )));
    }
    for (i, row) in attn.iter_rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "attention row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Inattentiveness `1 - mean_k A(k, x)` for every token `x`.
pub fn inattentive_scores(attn: &Matrix) -> Vec<f64> {
    let n = attn.rows();
    let mut col = vec![0.0; attn.cols()];
    for row in attn.iter_rows() {
        for (c, &v) in col.iter_mut().zip(row) {
            *c += v;
        }
    }
    col.into_iter().map(|s| 1.0 - s / n as f64).collect()
}

/// Scores tokens by inattentiveness plus merge frequency and splits them
/// into inattentive and attentive groups. Each inattentive token is paired
/// with its most similar attentive token (ties to the lowest index).
pub fn idm_score_tokens(
    grid: &TokenGrid,
    attn: &Matrix,
    alpha_d: f64,
    split: f64,
    par: Parallelism,
) -> Result<DetailScores> {
    let n = grid.len();
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config(format!(
            "inattentive split must lie in (0, 1), got {split}"
        )));
    }
    check_row_stochastic(attn, n)?;
    let ina = inattentive_scores(attn);
    let fre = frequency_scores(&grid.last_merge_age);
    let totals: Vec<f64> = ina.iter().zip(&fre).map(|(a, f)| a + alpha_d * f).collect();
    let order = argsort_desc(&totals);
    let n_ina = fraction_count(split, n);
    let mut attentive: Vec<usize> = order[n_ina..].to_vec();
    attentive.sort_unstable();

    let matches = map_indexed(par, n_ina, |k| {
        let i = order[k];
        let xi = grid.tokens.row(i);
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for &a in &attentive {
            let s = cosine_similarity(xi, grid.tokens.row(a));
            if s > best.1 {
                best = (a, s);
            }
        }
        best
    });

    let ranked = order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (best_match, best_sim) = match matches.get(k) {
                Some(&(a, s)) if a != usize::MAX => (Some(a), Some(s)),
                _ => (None, None),
            };
            TokenScore {
                token_index: i,
                ina_score: ina[i],
                fre_score: fre[i],
                total: totals[i],
                best_match,
                best_sim,
            }
        })
        .collect();
    Ok(DetailScores {
        ranked,
        inattentive_len: n_ina,
    })
}

/// Builds the detail merge plan. Priority decides the order, similarity to
/// the best attentive match decides threshold admission. Inattentive tokens
/// sharing a match fold into one group weighted by `softmax(1 - P_ina)`.
pub fn idm_build_plan(scores: &DetailScores, selector: Selector) -> Result<MergePlan> {
    let n = scores.token_count();
    let ina = scores.inattentive();
    let mut warnings = Vec::new();
    let chosen: Vec<(usize, &TokenScore)> = match selector {
        Selector::Ratio(r) => {
            let want = fraction_count(r, n);
            if want > ina.len() {
                warnings.push(format!(
                    "ratio {r} asks for {want} merges but only {} tokens are inattentive; clamped",
                    ina.len()
                ));
            }
            ina.iter().take(want).enumerate().collect()
        }
        Selector::Threshold(t) => ina
            .iter()
            .enumerate()
            .filter(|(_, s)| s.best_sim.is_some_and(|v| v > t))
            .collect(),
    };

    let ina_of: BTreeMap<usize, f64> = scores
        .ranked
        .iter()
        .map(|s| (s.token_index, s.ina_score))
        .collect();
    let mut by_survivor: BTreeMap<usize, Vec<(usize, f64, usize)>> = BTreeMap::new();
    for (rank, s) in chosen {
        let a = s.best_match.ok_or_else(|| {
            Error::InvalidInput(format!("token {} has no attentive match", s.token_index))
        })?;
        by_survivor
            .entry(a)
            .or_default()
            .push((s.token_index, 1.0 - s.ina_score, rank));
    }
    let groups = by_survivor
        .into_iter()
        .map(|(a, mut entries)| {
            entries.push((a, 1.0 - ina_of[&a], 0));
            MergeGroup::softmax(a, entries)
        })
        .collect();
    let mut plan = MergePlan::from_groups(MergeKind::Detail, n, groups)?;
    plan.warnings = warnings;
    Ok(plan)
}

/// Cross-step memory for one unmerge site.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmergeState {
    pub previous_full: Option<Matrix>,
    /// Weight of the current step's reconstruction at merged positions.
    pub blend: f64,
}

impl UnmergeState {
    pub fn new(blend: f64) -> Self {
        Self {
            previous_full: None,
            blend,
        }
    }
}

/// Restores the full token matrix from a compressed one.
///
/// Group members take their survivor's row; kept positions take their own.
/// Positions merged under `plan` are then blended with the previous step's
/// output, `blend * current + (1 - blend) * previous`.
pub fn unmerge(compressed: &Matrix, plan: &MergePlan, state: &mut UnmergeState) -> Result<Matrix> {
    if compressed.rows() != plan.result_count() {
        return Err(Error::Shape(format!(
            "compressed matrix has {} rows, plan expects {}",
            compressed.rows(),
            plan.result_count()
        )));
    }
    let n = plan.source_count;
    let d = compressed.cols();
    let mut full = Matrix::zeros(n, d);
    for (r, g) in plan.groups.iter().enumerate() {
        for &m in &g.members {
            full.row_mut(m).copy_from_slice(compressed.row(r));
        }
    }
    let base = plan.groups.len();
    for (r, &k) in plan.kept.iter().enumerate() {
        full.row_mut(k).copy_from_slice(compressed.row(base + r));
    }

    if let Some(prev) = &state.previous_full {
        if prev.rows() != n || prev.cols() != d {
            return Err(Error::Shape(format!(
                "previous step state is {}x{}, current output is {n}x{d}",
                prev.rows(),
                prev.cols()
            )));
        }
        let lam = state.blend;
        if !plan.is_noop() && lam != 1.0 {
            for g in &plan.groups {
                for &m in &g.members {
                    for (x, &p) in full.row_mut(m).iter_mut().zip(prev.row(m)) {
                        *x = lam * *x + (1.0 - lam) * p;
                    }
                }
            }
        }
    }
    state.previous_full = Some(full.clone());
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokengrid::{apply_merge, partition_windows, window_partition};
    use approx::assert_abs_diff_eq;

    fn grid_from_rows(h: usize, w: usize, rows: &[Vec<f64>]) -> TokenGrid {
        TokenGrid::new(h, w, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn identical_window_has_unit_similarity() {
        let g = grid_from_rows(2, 2, &vec![vec![0.3, -1.0]; 4]);
        let p = partition_windows(&g, 2).unwrap();
        let s = ssm_score_windows(&g, &p, 1.0).unwrap();
        assert_abs_diff_eq!(s[0].sim_score, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_pair_window_similarity_is_one_third() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let g = grid_from_rows(2, 2, &[e1.clone(), e1, e2.clone(), e2]);
        let p = partition_windows(&g, 2).unwrap();
        let s = ssm_score_windows(&g, &p, 1.0).unwrap();
        assert_abs_diff_eq!(s[0].sim_score, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_ages_give_unit_frequency() {
        let mut g = grid_from_rows(
            2,
            4,
            &[
                vec![1.0, 0.0],
                vec![1.0, 0.1],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![1.0, 0.2],
                vec![0.9, 0.0],
                vec![-1.0, 1.0],
                vec![1.0, -1.0],
            ],
        );
        g.last_merge_age = vec![5; 8];
        let p = partition_windows(&g, 2).unwrap();
        let s = ssm_score_windows(&g, &p, 1.0).unwrap();
        assert!(s.iter().all(|w| w.fre_score == 1.0));
        assert_eq!(s[0].window_index, 0);
        assert!(s[0].sim_score > s[1].sim_score);
        assert!(s
            .iter()
            .all(|w| (w.total - (w.sim_score + w.fre_score)).abs() < 1e-15));
    }

    #[test]
    fn zero_ages_fall_back_to_uniform_frequency() {
        assert_eq!(frequency_scores(&[0, 0, 0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(frequency_scores(&[0, 2, 4]), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn ratio_plan_counts_on_64_tokens() {
        let g = TokenGrid::new(8, 8, Matrix::filled(64, 2, 1.0)).unwrap();
        let p = partition_windows(&g, 2).unwrap();
        let s = ssm_score_windows(&g, &p, 1.0).unwrap();
        let plan = ssm_build_plan(&s, &p, Selector::Ratio(0.5)).unwrap();
        assert_eq!(plan.groups.len(), 8);
        assert_eq!(plan.result_count(), 40);
        assert!(plan.groups.iter().all(|g| g.weights == vec![0.25; 4]));

        let none = ssm_build_plan(&s, &p, Selector::Threshold(f64::INFINITY)).unwrap();
        assert_eq!(none.result_count(), 64);
        let all = ssm_build_plan(&s, &p, Selector::Threshold(f64::NEG_INFINITY)).unwrap();
        assert_eq!(all.result_count(), 16);
    }

    #[test]
    fn uniform_attention_gives_three_quarters() {
        let attn = Matrix::filled(4, 4, 0.25);
        assert_eq!(inattentive_scores(&attn), vec![0.75; 4]);
    }

    #[test]
    fn fully_attended_token_scores_zero() {
        let mut attn = Matrix::zeros(4, 4);
        for r in 0..4 {
            attn.set(r, 2, 1.0);
        }
        let s = inattentive_scores(&attn);
        assert_eq!(s[2], 0.0);
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn rejects_non_stochastic_attention() {
        let g = TokenGrid::new(2, 2, Matrix::filled(4, 2, 1.0)).unwrap();
        let attn = Matrix::filled(4, 4, 0.3);
        let r = idm_score_tokens(&g, &attn, 1.0, 0.5, Parallelism::Sequential);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    fn two_token_scores(p_i: f64, p_a: f64) -> DetailScores {
        let mk = |i, ina, m: Option<usize>| TokenScore {
            token_index: i,
            ina_score: ina,
            fre_score: 1.0,
            total: ina + 1.0,
            best_match: m,
            best_sim: m.map(|_| 0.9),
        };
        DetailScores {
            ranked: vec![mk(0, p_i, Some(1)), mk(1, p_a, None)],
            inattentive_len: 1,
        }
    }

    #[test]
    fn detail_weights_follow_softmax() {
        let plan = idm_build_plan(&two_token_scores(0.5, 0.5), Selector::Ratio(0.5)).unwrap();
        assert_eq!(plan.groups[0].weights, vec![0.5, 0.5]);

        let plan = idm_build_plan(&two_token_scores(0.8, 0.2), Selector::Ratio(0.5)).unwrap();
        let w = &plan.groups[0].weights;
        // members are [0 (inattentive), 1 (attentive)]
        assert_abs_diff_eq!(w[0], 0.3543, epsilon = 1e-4);
        assert_abs_diff_eq!(w[1], 0.6457, epsilon = 1e-4);
        assert_eq!(plan.result_count(), 1);

        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let plan = idm_build_plan(&two_token_scores(0.4, 0.4), Selector::Ratio(1.0)).unwrap();
        assert_eq!(apply_merge(&t, &plan).unwrap().row(0), &[0.5, 0.5]);
        assert_eq!(plan.warnings.len(), 1);
    }

    #[test]
    fn infinite_threshold_merges_nothing() {
        let plan = idm_build_plan(
            &two_token_scores(0.8, 0.2),
            Selector::Threshold(f64::INFINITY),
        )
        .unwrap();
        assert!(plan.is_noop());
        assert_eq!(plan.result_count(), 2);
    }

    #[test]
    fn unmerge_noop_plan_restores_positions() {
        let t = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let plan = MergePlan::noop(MergeKind::Detail, 3);
        for lam in [0.0, 0.3, 1.0] {
            let mut st = UnmergeState::new(lam);
            st.previous_full = Some(Matrix::filled(3, 1, 9.0));
            let c = apply_merge(&t, &plan).unwrap();
            assert_eq!(unmerge(&c, &plan, &mut st).unwrap(), t);
        }
    }

    #[test]
    fn unmerge_with_full_reuse_copies_survivor() {
        let t = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![5.0, 5.0],
            vec![7.0, 7.0],
        ])
        .unwrap();
        let part = window_partition(2, 2, 2).unwrap();
        let plan = ssm_build_plan(
            &[WindowScore {
                window_index: 0,
                sim_score: 0.0,
                fre_score: 1.0,
                total: 1.0,
            }],
            &part,
            Selector::Ratio(1.0),
        )
        .unwrap();
        let c = apply_merge(&t, &plan).unwrap();
        let mut st = UnmergeState::new(1.0);
        st.previous_full = Some(Matrix::filled(4, 2, -3.0));
        let out = unmerge(&c, &plan, &mut st).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), c.row(0));
        }
    }

    #[test]
    fn unmerge_blends_only_merged_positions() {
        let t = Matrix::from_rows(&[vec![2.0], vec![4.0], vec![6.0]]).unwrap();
        let plan = MergePlan::from_groups(
            MergeKind::Detail,
            3,
            vec![MergeGroup::uniform(0, vec![0, 1], 0)],
        )
        .unwrap();
        let c = apply_merge(&t, &plan).unwrap();
        let mut st = UnmergeState::new(0.5);
        let first = unmerge(&c, &plan, &mut st).unwrap();
        assert_eq!(first.data(), &[3.0, 3.0, 6.0]);
        st.previous_full = Some(Matrix::from_rows(&[vec![1.0], vec![1.0], vec![100.0]]).unwrap());
        let second = unmerge(&c, &plan, &mut st).unwrap();
        assert_eq!(second.data(), &[2.0, 2.0, 6.0]);
        assert_eq!(st.previous_full.as_ref().unwrap(), &second);
    }

    #[test]
    fn unmerge_rejects_dimension_mismatch() {
        let plan = MergePlan::noop(MergeKind::Detail, 3);
        let mut st = UnmergeState::new(0.5);
        assert!(unmerge(&Matrix::zeros(2, 1), &plan, &mut st).is_err());
        st.previous_full = Some(Matrix::zeros(4, 1));
        assert!(unmerge(&Matrix::zeros(3, 1), &plan, &mut st).is_err());
    }
}
