//! Seeded instance generators and production-vs-oracle comparisons shared
//! by the core integration tests and the acceptance suite.

#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdtm::merging::{
    idm_build_plan, idm_score_tokens, ssm_build_plan, ssm_score_windows, Selector,
};
use sdtm::sim::analysis::{analyze_redundancy, nearest_neighbours};
use sdtm::tokengrid::partition_windows;
use sdtm::{Matrix, MergePlan, Parallelism, TokenGrid};

use oracle::{OracleGroup, OracleSelector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Token rows drawn mostly from a small integer palette so that exact
/// similarity ties are common. Some instances include zero rows.
pub fn palette_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let palette_size = r.random_range(1..=4);
    let palette: Vec<Vec<f64>> = (0..palette_size)
        .map(|_| (0..d).map(|_| r.random_range(-2..=2) as f64).collect())
        .collect();
    let fresh = r.random_range(0.0..0.6);
    (0..n)
        .map(|_| {
            if r.random_bool(fresh) {
                (0..d).map(|_| r.random_range(-3..=3) as f64).collect()
            } else {
                palette[r.random_range(0..palette_size)].clone()
            }
        })
        .collect()
}

pub fn random_ages(r: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    if r.random_bool(0.25) {
        return vec![0; n];
    }
    (0..n).map(|_| r.random_range(0..4)).collect()
}

/// Row-stochastic `n x n` map; a quarter of instances are uniform, which
/// makes every inattentive score tie.
pub fn random_attention(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    if r.random_bool(0.25) {
        return vec![vec![1.0 / n as f64; n]; n];
    }
    (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64).collect();
            if row.iter().all(|&v| v == 0.0) {
                row[r.random_range(0..n)] = 1.0;
            }
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Grid sides (at most 64 tokens) and a window size dividing both.
pub fn random_grid_dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    loop {
        let m = *[2usize, 2, 2, 3, 4].get(r.random_range(0..5)).unwrap();
        let h = m * r.random_range(1..=8 / m.min(8));
        let w = m * r.random_range(1..=8 / m.min(8));
        if h * w <= 64 && h * w >= 2 {
            return (h, w, m);
        }
    }
}

fn grid(h: usize, w: usize, rows: &[Vec<f64>], ages: Vec<u32>) -> TokenGrid {
    let mut g = TokenGrid::new(h, w, Matrix::from_rows(rows).unwrap()).unwrap();
    g.last_merge_age = ages;
    g
}

fn to_oracle(sel: Selector) -> OracleSelector {
    match sel {
        Selector::Ratio(r) => OracleSelector::Ratio(r),
        Selector::Threshold(t) => OracleSelector::Threshold(t),
    }
}

fn compare_groups(
    plan: &MergePlan,
    want: &[OracleGroup],
    exact_weights: bool,
) -> Result<(), String> {
    if plan.groups.len() != want.len() {
        return Err(format!(
            "{} groups, oracle has {}",
            plan.groups.len(),
            want.len()
        ));
    }
    for (g, o) in plan.groups.iter().zip(want) {
        if g.survivor != o.survivor || g.members != o.members {
            return Err(format!(
                "group {:?}/{:?} vs oracle {:?}/{:?}",
                g.survivor, g.members, o.survivor, o.members
            ));
        }
        for (a, b) in g.weights.iter().zip(&o.weights) {
            let ok = if exact_weights {
                a == b
            } else {
                (a - b).abs() <= 1e-12
            };
            if !ok {
                return Err(format!("weights {:?} vs oracle {:?}", g.weights, o.weights));
            }
        }
    }
    let mut covered = vec![false; plan.source_count];
    for o in want {
        for &m in &o.members {
            covered[m] = true;
        }
    }
    let kept: Vec<usize> = (0..plan.source_count).filter(|&i| !covered[i]).collect();
    if plan.kept != kept {
        return Err(format!("kept {:?} vs oracle {:?}", plan.kept, kept));
    }
    Ok(())
}

/// Structure selection on one seeded instance, checked against the oracle
/// and against `N' = N - k(m^2 - 1)`.
pub fn check_ssm(seed: u64) -> Result<(), String> {
    let r = &mut rng(seed);
    let (h, w, m) = random_grid_dims(r);
    let n = h * w;
    let d = r.random_range(1..=4);
    let rows = palette_rows(r, n, d);
    let ages = random_ages(r, n);
    let alpha_s = [0.0, 0.5, 1.0][r.random_range(0..3)];
    let g = grid(h, w, &rows, ages.clone());
    let part = partition_windows(&g, m).map_err(|e| e.to_string())?;
    let scores = ssm_score_windows(&g, &part, alpha_s).map_err(|e| e.to_string())?;
    let sel = if r.random_bool(0.5) {
        Selector::Ratio(r.random_range(0..=part.len()) as f64 / part.len() as f64)
    } else if r.random_bool(0.5) {
        Selector::Threshold(scores[r.random_range(0..scores.len())].total)
    } else {
        Selector::Threshold(r.random_range(-1.0..2.5))
    };
    let plan = ssm_build_plan(&scores, &part, sel).map_err(|e| e.to_string())?;
    let want = oracle::ssm(&rows, h, w, m, &ages, alpha_s, to_oracle(sel));
    compare_groups(&plan, &want, true).map_err(|e| format!("seed {seed}: {e}"))?;
    let k = plan.groups.len();
    if plan.result_count() != n - k * (m * m - 1) {
        return Err(format!(
            "seed {seed}: count law broken, N'={} k={k}",
            plan.result_count()
        ));
    }
    plan.validate().map_err(|e| e.to_string())
}

/// Detail selection on one seeded instance, checked against the oracle and
/// against `N' = N - j`.
pub fn check_idm(seed: u64) -> Result<(), String> {
    let r = &mut rng(seed);
    let (h, w, _) = random_grid_dims(r);
    let n = h * w;
    let d = r.random_range(1..=4);
    let rows = palette_rows(r, n, d);
    let ages = random_ages(r, n);
    let attn = random_attention(r, n);
    let alpha_d = [0.0, 0.5, 1.0][r.random_range(0..3)];
    let split = [0.25, 0.5, 0.75][r.random_range(0..3)];
    let g = grid(h, w, &rows, ages.clone());
    let am = Matrix::from_rows(&attn).unwrap();
    let par = if seed.is_multiple_of(2) {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    };
    let scores = idm_score_tokens(&g, &am, alpha_d, split, par).map_err(|e| e.to_string())?;
    let sel = if r.random_bool(0.5) {
        Selector::Ratio(r.random_range(0..=n) as f64 / n as f64)
    } else {
        let sims: Vec<f64> = scores
            .inattentive()
            .iter()
            .filter_map(|s| s.best_sim)
            .collect();
        if !sims.is_empty() && r.random_bool(0.6) {
            Selector::Threshold(sims[r.random_range(0..sims.len())])
        } else {
            Selector::Threshold(r.random_range(-1.0..1.0))
        }
    };
    let plan = idm_build_plan(&scores, sel).map_err(|e| e.to_string())?;
    let want = oracle::idm(&rows, &attn, &ages, alpha_d, split, to_oracle(sel));
    compare_groups(&plan, &want, false).map_err(|e| format!("seed {seed}: {e}"))?;
    let j: usize = want.iter().map(|g| g.members.len() - 1).sum();
    if plan.result_count() != n - j {
        return Err(format!(
            "seed {seed}: count law broken, N'={} j={j}",
            plan.result_count()
        ));
    }
    plan.validate().map_err(|e| e.to_string())
}

/// Nearest-neighbour assignment and redundancy statistics.
pub fn check_nearest(seed: u64) -> Result<(), String> {
    let r = &mut rng(seed);
    let (h, w, _) = random_grid_dims(r);
    let d = r.random_range(1..=4);
    let rows = palette_rows(r, h * w, d);
    let g = grid(h, w, &rows, vec![0; h * w]);
    let want = oracle::nearest(&rows);
    for par in [Parallelism::Sequential, Parallelism::Rayon] {
        let got = nearest_neighbours(&g, par);
        if got != want {
            return Err(format!(
                "seed {seed}: neighbours {got:?} vs oracle {want:?}"
            ));
        }
        let stats = analyze_redundancy(&g, par);
        let (dist, sim) = oracle::redundancy(&rows, w);
        if stats.mean_distance != dist || stats.mean_similarity != sim {
            return Err(format!(
                "seed {seed}: stats ({}, {}) vs oracle ({dist}, {sim})",
                stats.mean_distance, stats.mean_similarity
            ));
        }
    }
    Ok(())
}
