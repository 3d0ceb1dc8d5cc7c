//! Brute-force reference implementations used by the equivalence tests.
//!
//! Selections are decided by counting, for every candidate, how many other
//! candidates beat it (higher score, or equal score and lower index). No
//! sorting is involved, so a bug in the production sort order shows up as a
//! disagreement. Floating-point sums run in the natural index order so the
//! scores themselves match bit for bit.

#![allow(dead_code)]

/// A selected group: survivor, ascending members, member weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleGroup {
    pub survivor: usize,
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
}

pub enum OracleSelector {
    Ratio(f64),
    Threshold(f64),
}

pub fn floor_fraction(f: f64, n: usize) -> usize {
    ((f.clamp(0.0, 1.0) * n as f64 + 1e-9).floor() as usize).min(n)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
    }
    for x in a {
        aa += x * x;
    }
    for x in b {
        bb += x * x;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (ab / (na * nb)).clamp(-1.0, 1.0)
}

/// Number of candidates strictly ahead of `i`.
fn rank_of(scores: &[f64], i: usize) -> usize {
    (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

fn frequency(ages: &[u32]) -> Vec<f64> {
    let mut total = 0.0;
    for &a in ages {
        total += a as f64;
    }
    let mean = total / ages.len() as f64;
    ages.iter()
        .map(|&a| if mean == 0.0 { 1.0 } else { a as f64 / mean })
        .collect()
}

/// Windows of an `h x w` grid, enumerated by scanning every position and
/// bucketing it by `(row / m, col / m)`.
pub fn windows(h: usize, w: usize, m: usize) -> Vec<Vec<usize>> {
    let per_row = w / m;
    let mut out = vec![Vec::new(); (h / m) * per_row];
    for p in 0..h * w {
        let (r, c) = (p / w, p % w);
        out[(r / m) * per_row + c / m].push(p);
    }
    out
}

fn window_similarity(rows: &[Vec<f64>], win: &[usize]) -> f64 {
    let n = win.len();
    let mut acc = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            acc += cosine(&rows[win[a]], &rows[win[b]]);
        }
    }
    2.0 * acc / (n * (n - 1)) as f64
}

/// Structure selection on an `h x w` grid with `m x m` windows.
pub fn ssm(
    rows: &[Vec<f64>],
    h: usize,
    w: usize,
    m: usize,
    ages: &[u32],
    alpha_s: f64,
    sel: OracleSelector,
) -> Vec<OracleGroup> {
    let wins = windows(h, w, m);
    let fre = frequency(ages);
    let totals: Vec<f64> = wins
        .iter()
        .map(|win| {
            let mut f = 0.0;
            for &i in win {
                f += fre[i];
            }
            window_similarity(rows, win) + alpha_s * (f / win.len() as f64)
        })
        .collect();
    let chosen: Vec<usize> = match sel {
        OracleSelector::Ratio(r) => {
            let k = floor_fraction(r, wins.len());
            (0..wins.len())
                .filter(|&i| rank_of(&totals, i) < k)
                .collect()
        }
        OracleSelector::Threshold(t) => (0..wins.len()).filter(|&i| totals[i] > t).collect(),
    };
    let mut groups: Vec<OracleGroup> = chosen
        .into_iter()
        .map(|i| {
            let members = wins[i].clone();
            let q = members.len();
            OracleGroup {
                survivor: members[0],
                weights: vec![1.0 / q as f64; q],
                members,
            }
        })
        .collect();
    groups.sort_by_key(|g| g.survivor);
    groups
}

/// Detail selection. `attn` is an `n x n` row-stochastic map.
pub fn idm(
    rows: &[Vec<f64>],
    attn: &[Vec<f64>],
    ages: &[u32],
    alpha_d: f64,
    split: f64,
    sel: OracleSelector,
) -> Vec<OracleGroup> {
    let n = rows.len();
    let mut colsum = vec![0.0; n];
    for r in attn {
        for (c, v) in r.iter().enumerate() {
            colsum[c] += v;
        }
    }
    let ina: Vec<f64> = colsum.iter().map(|s| 1.0 - s / n as f64).collect();
    let fre = frequency(ages);
    let totals: Vec<f64> = (0..n).map(|i| ina[i] + alpha_d * fre[i]).collect();
    let ranks: Vec<usize> = (0..n).map(|i| rank_of(&totals, i)).collect();
    let n_ina = floor_fraction(split, n);
    let inattentive = |i: usize| ranks[i] < n_ina;

    // best attentive match per inattentive token, ties to the lowest index
    let best: Vec<Option<(usize, f64)>> = (0..n)
        .map(|i| {
            if !inattentive(i) {
                return None;
            }
            let mut b: Option<(usize, f64)> = None;
            for a in (0..n).filter(|&a| !inattentive(a)) {
                let s = cosine(&rows[i], &rows[a]);
                if b.is_none_or(|(_, bs)| s > bs) {
                    b = Some((a, s));
                }
            }
            b
        })
        .collect();

    let selected: Vec<usize> = match sel {
        OracleSelector::Ratio(r) => {
            let want = floor_fraction(r, n).min(n_ina);
            (0..n)
                .filter(|&i| inattentive(i) && ranks[i] < want)
                .collect()
        }
        OracleSelector::Threshold(t) => (0..n)
            .filter(|&i| best[i].is_some_and(|(_, s)| s > t))
            .collect(),
    };

    let mut groups: Vec<OracleGroup> = Vec::new();
    for a in 0..n {
        let mut members: Vec<usize> = selected
            .iter()
            .copied()
            .filter(|&i| best[i].map(|b| b.0) == Some(a))
            .collect();
        if members.is_empty() {
            continue;
        }
        members.push(a);
        members.sort_unstable();
        let logits: Vec<f64> = members.iter().map(|&i| 1.0 - ina[i]).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        groups.push(OracleGroup {
            survivor: a,
            members,
            weights: e.iter().map(|v| v / z).collect(),
        });
    }
    groups
}

/// Most similar other token per token, ties to the lowest index.
pub fn nearest(rows: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let n = rows.len();
    (0..n)
        .map(|i| {
            let mut b = (usize::MAX, f64::NEG_INFINITY);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let s = cosine(&rows[i], &rows[j]);
                if s > b.1 {
                    b = (j, s);
                }
            }
            b
        })
        .collect()
}

/// `(mean grid distance, mean similarity)` to the nearest token.
pub fn redundancy(rows: &[Vec<f64>], w: usize) -> (f64, f64) {
    let nn = nearest(rows);
    let n = rows.len() as f64;
    let mut d = 0.0;
    let mut s = 0.0;
    for (i, &(j, sim)) in nn.iter().enumerate() {
        let dr = (i / w) as f64 - (j / w) as f64;
        let dc = (i % w) as f64 - (j % w) as f64;
        d += (dr * dr + dc * dc).sqrt();
        s += sim;
    }
    (d / n, s / n)
}
