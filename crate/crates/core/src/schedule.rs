//! Compression-ratio adjusting.
//!
//! Two controllers decide how much to merge at each `(step, layer)`:
//! a cosine-decay ratio that runs from `rho + d` down to `rho - d` over the
//! denoising run, and an adaptive threshold looked up from a calibrated
//! ratio-to-threshold map. Steps are indexed in execution order, so step 0
//! is the first (noisiest) step.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokengrid::{MergeKind, MergePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    #[default]
    DynamicRatio,
    AdaptiveThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    /// Elapsed fraction of steps after which the detail stage begins.
    pub stage_boundary: f64,
    pub basic_ratio: f64,
    pub max_deviation: f64,
    pub special_steps: Vec<usize>,
    pub special_layers: Vec<usize>,
    pub mode: ScheduleMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            stage_boundary: 0.6,
            basic_ratio: 0.5,
            max_deviation: 0.2,
            special_steps: vec![0],
            special_layers: vec![0, 1, 2, 3],
            mode: ScheduleMode::DynamicRatio,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let (r, d) = (self.basic_ratio, self.max_deviation);
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(self.stage_boundary > 0.0 && self.stage_boundary < 1.0) {
            return Err(Error::Config(format!(
                "stage_boundary must lie in (0, 1), got {}",
                self.stage_boundary
            )));
        }
        if !(d >= 0.0 && r - d >= -1e-12 && r + d <= 1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "basic_ratio {r} and max_deviation {d} must satisfy 0 <= r - d and r + d <= 1"
            )));
        }
        Ok(())
    }

    pub fn min_ratio(&self) -> f64 {
        (self.basic_ratio - self.max_deviation).max(0.0)
    }

    pub fn max_ratio(&self) -> f64 {
        (self.basic_ratio + self.max_deviation).min(1.0)
    }

    pub fn is_special(&self, step: usize, layer: usize) -> bool {
        self.special_steps.contains(&step) || self.special_layers.contains(&layer)
    }

    /// Normalized progress `t / (T - 1)`; 0 for single-step runs.
    pub fn progress(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            0.0
        } else {
            step as f64 / (self.total_steps - 1) as f64
        }
    }
}

/// `(rho - d) + 2d * cos(pi/2 * s)` evaluated at normalized progress `s`.
pub fn cosine_ratio(basic_ratio: f64, max_deviation: f64, s: f64) -> f64 {
    let lo = basic_ratio - max_deviation;
    let s = s.clamp(0.0, 1.0);
    if s == 0.0 {
        return basic_ratio + max_deviation;
    }
    if s == 1.0 {
        return lo;
    }
    lo + 2.0 * max_deviation * (FRAC_PI_2 * s).cos()
}

/// Merge ratio for `(step, layer)` under the cosine-decay schedule.
pub fn dynamic_ratio(cfg: &ScheduleConfig, step: usize, layer: usize) -> f64 {
    if cfg.is_special(step, layer) {
        return cfg.basic_ratio - cfg.max_deviation;
    }
    cosine_ratio(cfg.basic_ratio, cfg.max_deviation, cfg.progress(step))
}

/// Structure while the elapsed fraction `t / T` is below the boundary.
pub fn stage_of(cfg: &ScheduleConfig, step: usize) -> MergeKind {
    if (step as f64) / (cfg.total_steps as f64) < cfg.stage_boundary {
        MergeKind::Structure
    } else {
        MergeKind::Detail
    }
}

/// Candidate scores gathered at every `(step, layer)` of one sample run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationRun {
    pub scores: BTreeMap<(usize, usize), (MergeKind, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    pub step: usize,
    pub layer: usize,
    pub kind: MergeKind,
    /// Threshold admitting the top `p`% of candidates, for `p = 0..=100`.
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityEntry {
    pub step: usize,
    pub layer: usize,
    pub kind: MergeKind,
    pub raw: f64,
    pub scaled: f64,
}

/// Per-`(step, layer)` mean candidate score and its `[-1, 1]` rescaling.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityDistribution {
    pub entries: Vec<SimilarityEntry>,
}

impl SimilarityDistribution {
    pub fn get(&self, step: usize, layer: usize) -> Option<&SimilarityEntry> {
        self.entries
            .binary_search_by_key(&(step, layer), |e| (e.step, e.layer))
            .ok()
            .map(|i| &self.entries[i])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMeta {
    pub samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
}

/// Ratio-to-threshold calibration table at 1% granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioThresholdMap {
    pub version: u32,
    pub total_steps: usize,
    pub layers: usize,
    pub granularity_percent: u32,
    pub entries: Vec<MapEntry>,
    pub similarity: SimilarityDistribution,
    pub meta: MapMeta,
}

pub const MAP_VERSION: u32 = 1;
pub const BUCKETS: usize = 101;

impl RatioThresholdMap {
    pub fn entry(&self, step: usize, layer: usize) -> Option<&MapEntry> {
        if step >= self.total_steps || layer >= self.layers {
            return None;
        }
        self.entries
            .get(step * self.layers + layer)
            .filter(|e| e.step == step && e.layer == layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MAP_VERSION {
            return Err(Error::Mismatch(format!(
                "map version {} unsupported (expected {MAP_VERSION})",
                self.version
            )));
        }
        if self.granularity_percent != 1 {
            return Err(Error::Mismatch("map granularity must be 1%".into()));
        }
        if self.entries.len() != self.total_steps * self.layers
            || self.similarity.entries.len() != self.entries.len()
        {
            return Err(Error::Mismatch(format!(
                "map covers {} entries, expected {} steps x {} layers",
                self.entries.len(),
                self.total_steps,
                self.layers
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let s = &self.similarity.entries[i];
            if (e.step, e.layer) != (i / self.layers, i % self.layers)
                || (s.step, s.layer) != (e.step, e.layer)
            {
                return Err(Error::Mismatch(format!(
                    "map entry {i} out of order ({}, {})",
                    e.step, e.layer
                )));
            }
            if e.thresholds.len() != BUCKETS || e.thresholds.iter().any(|v| !v.is_finite()) {
                return Err(Error::Mismatch(format!(
                    "map entry ({}, {}) needs {BUCKETS} finite thresholds",
                    e.step, e.layer
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(s)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Number of candidates the `p`% bucket admits out of `n`.
pub fn bucket_count(percent: usize, n: usize) -> usize {
    ((percent * n) as f64 / 100.0 + 1e-9).floor() as usize
}

/// Threshold per 1% bucket for one descending-sorted score list. The
/// threshold is the midpoint between the last admitted and first rejected
/// score, so applying it with a strict `>` reproduces the count.
pub fn percentile_thresholds(sorted_desc: &[f64]) -> Vec<f64> {
    let n = sorted_desc.len();
    (0..BUCKETS)
        .map(|p| {
            let k = bucket_count(p, n);
            if k == 0 {
                sorted_desc[0]
            } else if k >= n {
                sorted_desc[n - 1] - 1.0
            } else {
                0.5 * (sorted_desc[k - 1] + sorted_desc[k])
            }
        })
        .collect()
}

/// Builds the ratio-threshold map and similarity distribution from sample
/// runs. Reductions run in sample order so the result does not depend on
/// how the samples were produced.
pub fn calibrate(
    runs: &[CalibrationRun],
    cfg: &ScheduleConfig,
    layers: usize,
    seed: u64,
) -> Result<RatioThresholdMap> {
    if runs.is_empty() {
        return Err(Error::Config("at least one sample required".into()));
    }
    cfg.validate()?;
    let mut entries = Vec::with_capacity(cfg.total_steps * layers);
    let mut raw = Vec::with_capacity(cfg.total_steps * layers);
    for step in 0..cfg.total_steps {
        for layer in 0..layers {
            let mut acc = vec![0.0; BUCKETS];
            let (mut sum, mut count) = (0.0, 0usize);
            let mut kind = None;
            for (k, run) in runs.iter().enumerate() {
                let (rk, scores) = run
                    .scores
                    .get(&(step, layer))
                    .filter(|(_, s)| !s.is_empty())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "sample {k} has no scores at step {step}, layer {layer}"
                        ))
                    })?;
                if *kind.get_or_insert(*rk) != *rk {
                    return Err(Error::Mismatch(format!(
                        "samples disagree on merge kind at step {step}, layer {layer}"
                    )));
                }
                let mut sorted = scores.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                for (a, t) in acc.iter_mut().zip(percentile_thresholds(&sorted)) {
                    *a += t;
                }
                sum += scores.iter().sum::<f64>();
                count += scores.len();
            }
            let kind = kind.expect("at least one run");
            entries.push(MapEntry {
                step,
                layer,
                kind,
                thresholds: acc.into_iter().map(|t| t / runs.len() as f64).collect(),
            });
            raw.push((step, layer, kind, sum / count as f64));
        }
    }

    let mut bounds: BTreeMap<MergeKind, (f64, f64)> = BTreeMap::new();
    for &(_, _, kind, v) in &raw {
        let b = bounds.entry(kind).or_insert((v, v));
        b.0 = b.0.min(v);
        b.1 = b.1.max(v);
    }
    let similarity = SimilarityDistribution {
        entries: raw
            .into_iter()
            .map(|(step, layer, kind, v)| {
                let (lo, hi) = bounds[&kind];
                let scaled = if hi > lo {
                    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                SimilarityEntry {
                    step,
                    layer,
                    kind,
                    raw: v,
                    scaled,
                }
            })
            .collect(),
    };
    Ok(RatioThresholdMap {
        version: MAP_VERSION,
        total_steps: cfg.total_steps,
        layers,
        granularity_percent: 1,
        entries,
        similarity,
        meta: MapMeta {
            samples: runs.len(),
            seed,
            config_sha256: None,
        },
    })
}

/// Target ratio `clamp(rho + d * S_scaled, 0, 1)`; pinned to `rho - d` at
/// special steps and layers.
pub fn adaptive_ratio(
    dist: &SimilarityDistribution,
    cfg: &ScheduleConfig,
    step: usize,
    layer: usize,
) -> Result<f64> {
    if cfg.is_special(step, layer) {
        return Ok(cfg.min_ratio());
    }
    let s = dist.get(step, layer).ok_or_else(|| {
        Error::Mismatch(format!(
            "similarity distribution has no entry for step {step}, layer {layer}"
        ))
    })?;
    Ok((cfg.basic_ratio + cfg.max_deviation * s.scaled).clamp(0.0, 1.0))
}

/// Nearest 1% bucket, halves rounding up.
pub fn ratio_bucket(ratio: f64) -> usize {
    ((ratio.clamp(0.0, 1.0) * 100.0 + 0.5 + 1e-9).floor() as usize).min(100)
}

/// Threshold for `(step, layer)` under the adaptive controller.
pub fn adaptive_threshold(
    map: &RatioThresholdMap,
    dist: &SimilarityDistribution,
    cfg: &ScheduleConfig,
    step: usize,
    layer: usize,
) -> Result<f64> {
    let ratio = adaptive_ratio(dist, cfg, step, layer)?;
    let entry = map.entry(step, layer).ok_or_else(|| {
        Error::Mismatch(format!(
            "ratio-threshold map has no entry for step {step}, layer {layer}"
        ))
    })?;
    Ok(entry.thresholds[ratio_bucket(ratio)])
}

/// Equalizes token counts across a batch: in adaptive mode every plan is
/// truncated to the smallest merged count in the batch.
pub fn batch_harmonize(plans: &[MergePlan], mode: ScheduleMode) -> Vec<MergePlan> {
    if mode != ScheduleMode::AdaptiveThreshold || plans.len() <= 1 {
        return plans.to_vec();
    }
    let min = plans.iter().map(MergePlan::merged_count).min().unwrap_or(0);
    plans.iter().map(|p| p.truncate(min)).collect()
}
