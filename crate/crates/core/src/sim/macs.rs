//! Analytic multiply-accumulate accounting.
//!
//! Per block and per token count `n`:
//!
//! * attention: `4 n d^2` for the Q/K/V/output projections, plus
//!   `2 n^2 d` for the score and value products when
//!   [`ModelShape::count_attention_core`] is set;
//! * feed-forward: `2 n d d_mlp`;
//! * structure identification: `N d + (N/m^2) ceil(log2(N/m^2))`;
//! * detail identification: `N^2 + N ceil(log2 N)`.
//!
//! Every count is multiplied by [`ModelShape::batch_multiplier`]
//! (2 for classifier-free guidance).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merging::fraction_count;
use crate::schedule::{dynamic_ratio, stage_of, ScheduleConfig, ScheduleMode};
use crate::tokengrid::MergeKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub blocks: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    /// Count the `QK^T` and `PV` products. Layer-level profilers that only
    /// hook linear modules leave these out.
    pub count_attention_core: bool,
    /// Forward passes per denoising step.
    pub batch_multiplier: u64,
}

impl ModelShape {
    /// 24 joint blocks at width 1536, 1024px images (64x64 latent patches),
    /// 77 + 256 text tokens, classifier-free guidance, linear-layer MACs.
    pub fn sd3_medium() -> Self {
        Self {
            blocks: 24,
            model_dim: 1536,
            mlp_dim: 6144,
            heads: 24,
            grid_height: 64,
            grid_width: 64,
            image_tokens: 4096,
            text_tokens: 333,
            count_attention_core: false,
            batch_multiplier: 2,
        }
    }

    /// Desk-scale shape used by the simulator.
    pub fn toy() -> Self {
        Self {
            blocks: 8,
            model_dim: 16,
            mlp_dim: 64,
            heads: 2,
            grid_height: 16,
            grid_width: 16,
            image_tokens: 256,
            text_tokens: 8,
            count_attention_core: false,
            batch_multiplier: 1,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "sd3-medium" | "sd3_medium" => Some(Self::sd3_medium()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("blocks", self.blocks),
            ("model_dim", self.model_dim),
            ("mlp_dim", self.mlp_dim),
            ("heads", self.heads),
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("image_tokens", self.image_tokens),
            ("text_tokens", self.text_tokens),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.grid_height * self.grid_width != self.image_tokens {
            return Err(Error::Config(format!(
                "grid {}x{} does not hold {} image tokens",
                self.grid_height, self.grid_width, self.image_tokens
            )));
        }
        if self.batch_multiplier == 0 {
            return Err(Error::Config("batch_multiplier must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

fn ceil_log2(x: u64) -> u64 {
    if x <= 1 {
        0
    } else {
        u64::from(64 - (x - 1).leading_zeros())
    }
}

pub fn macs_mhsa(shape: &ModelShape, n_tokens: usize) -> u64 {
    let (n, d) = (n_tokens as u64, shape.model_dim as u64);
    let mut m = 4 * n * d * d;
    if shape.count_attention_core {
        m += 2 * n * n * d;
    }
    m * shape.batch_multiplier
}

pub fn macs_mlp(shape: &ModelShape, n_tokens: usize) -> u64 {
    let (n, d, h) = (
        n_tokens as u64,
        shape.model_dim as u64,
        shape.mlp_dim as u64,
    );
    2 * n * d * h * shape.batch_multiplier
}

/// Cost of scoring `n_tokens` image tokens for one merge plan.
pub fn macs_identify(shape: &ModelShape, kind: MergeKind, n_tokens: usize, window: usize) -> u64 {
    let n = n_tokens as u64;
    let per = match kind {
        MergeKind::Structure => {
            let w = n / (window as u64 * window as u64).max(1);
            n * shape.model_dim as u64 + w * ceil_log2(w)
        }
        MergeKind::Detail => n * n + n * ceil_log2(n),
    };
    per * shape.batch_multiplier
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Mhsa,
    Mlp,
    Identify,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Mhsa => "mhsa",
            Component::Mlp => "mlp",
            Component::Identify => "identify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsEntry {
    pub step: usize,
    pub layer: usize,
    pub component: Component,
    pub n_tokens: usize,
    pub macs: u64,
    pub merged_count: usize,
}

/// Per-`(step, layer, component)` MAC counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MacsReport {
    pub steps: usize,
    pub entries: Vec<MacsEntry>,
}

impl MacsReport {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, e: MacsEntry) {
        self.entries.push(e);
    }

    /// Whole-run total across all steps.
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn per_step(&self) -> Vec<u64> {
        let mut v = vec![0; self.steps];
        for e in &self.entries {
            v[e.step] += e.macs;
        }
        v
    }

    pub fn component_total(&self, c: Component) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.component == c)
            .map(|e| e.macs)
            .sum()
    }

    /// Mean MACs per step.
    pub fn mean_per_step(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.total() as f64 / self.steps as f64
        }
    }

    /// Model MACs (attention plus feed-forward), excluding identification.
    pub fn model_total(&self) -> u64 {
        self.component_total(Component::Mhsa) + self.component_total(Component::Mlp)
    }

    /// Entries sorted by `(step, layer, component)`.
    pub fn sorted(&self) -> Vec<MacsEntry> {
        let mut v = self.entries.clone();
        v.sort_by_key(|e| (e.step, e.layer, e.component));
        v
    }
}

/// MACs of an unmerged run of `steps` denoising steps.
pub fn baseline_report(shape: &ModelShape, steps: usize) -> MacsReport {
    let n = shape.image_tokens + shape.text_tokens;
    let mut r = MacsReport::new(steps);
    for step in 0..steps {
        for layer in 0..shape.blocks {
            for (component, macs) in [
                (Component::Mhsa, macs_mhsa(shape, n)),
                (Component::Mlp, macs_mlp(shape, n)),
            ] {
                r.push(MacsEntry {
                    step,
                    layer,
                    component,
                    n_tokens: n,
                    macs,
                    merged_count: 0,
                });
            }
        }
    }
    r
}

/// Image tokens merged away at `(step, layer)` under a ratio schedule.
pub fn scheduled_merge_count(
    shape: &ModelShape,
    sched: &ScheduleConfig,
    window: usize,
    split: f64,
    step: usize,
    layer: usize,
) -> usize {
    let ratio = dynamic_ratio(sched, step, layer);
    let n = shape.image_tokens;
    match stage_of(sched, step) {
        MergeKind::Structure => {
            let windows = (shape.grid_height / window) * (shape.grid_width / window);
            fraction_count(ratio, windows) * (window * window - 1)
        }
        MergeKind::Detail => fraction_count(ratio, n).min(fraction_count(split, n)),
    }
}

/// MACs of a dynamic-ratio run, derived from the merge count laws without
/// running the model.
pub fn scheduled_report(
    shape: &ModelShape,
    sched: &ScheduleConfig,
    window: usize,
    split: f64,
) -> Result<MacsReport> {
    shape.validate()?;
    sched.validate()?;
    if sched.mode != ScheduleMode::DynamicRatio {
        return Err(Error::Config(
            "analytic MACs need a dynamic-ratio schedule; adaptive thresholds depend on data"
                .into(),
        ));
    }
    if window < 2
        || !shape.grid_height.is_multiple_of(window)
        || !shape.grid_width.is_multiple_of(window)
    {
        return Err(Error::Config(format!(
            "window {window} does not tile the {}x{} grid",
            shape.grid_height, shape.grid_width
        )));
    }
    let (ni, nt) = (shape.image_tokens, shape.text_tokens);
    let mut r = MacsReport::new(sched.total_steps);
    for step in 0..sched.total_steps {
        let kind = stage_of(sched, step);
        for layer in 0..shape.blocks {
            let merged = scheduled_merge_count(shape, sched, window, split, step, layer);
            let reduced = ni - merged + nt;
            let (attn_n, attn_m) = match kind {
                MergeKind::Structure => (reduced, merged),
                MergeKind::Detail => (ni + nt, 0),
            };
            r.push(MacsEntry {
                step,
                layer,
                component: Component::Identify,
                n_tokens: ni,
                macs: macs_identify(shape, kind, ni, window),
                merged_count: 0,
            });
            r.push(MacsEntry {
                step,
                layer,
                component: Component::Mhsa,
                n_tokens: attn_n,
                macs: macs_mhsa(shape, attn_n),
                merged_count: attn_m,
            });
            r.push(MacsEntry {
                step,
                layer,
                component: Component::Mlp,
                n_tokens: reduced,
                macs: macs_mlp(shape, reduced),
                merged_count: merged,
            });
        }
    }
    Ok(r)
}
