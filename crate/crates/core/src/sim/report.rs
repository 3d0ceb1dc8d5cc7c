//! CSV and JSON views of run metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::sim::analysis::{RedundancyStats, SubbandSummary};
use crate::sim::macs::MacsReport;
use crate::sim::pipeline::{LayerStat, RunOutput};

pub const MACS_HEADER: &str = "step,layer,component,n_tokens,macs,merged_count";
pub const FREQUENCY_HEADER: &str = "step,layer,ll,lh,hl,hh";
pub const REDUNDANCY_HEADER: &str = "step,layer,mean_distance,mean_similarity";

pub fn macs_csv(report: &MacsReport) -> String {
    let mut s = String::from(MACS_HEADER);
    s.push('\n');
    for e in report.sorted() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.step,
            e.layer,
            e.component.as_str(),
            e.n_tokens,
            e.macs,
            e.merged_count
        );
    }
    s
}

/// Channel-mean subband norms per `(step, layer)`.
pub fn frequency_csv(stats: &[LayerStat<SubbandSummary>]) -> String {
    let mut s = String::from(FREQUENCY_HEADER);
    s.push('\n');
    for st in stats {
        let m = st.value.mean;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            st.step, st.layer, m.ll, m.lh, m.hl, m.hh
        );
    }
    s
}

pub fn redundancy_csv(stats: &[LayerStat<RedundancyStats>]) -> String {
    let mut s = String::from(REDUNDANCY_HEADER);
    s.push('\n');
    for st in stats {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            st.step, st.layer, st.value.mean_distance, st.value.mean_similarity
        );
    }
    s
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub w_macs: u64,
    pub baseline_w_macs: u64,
    pub identify_macs: u64,
    /// `baseline_w_macs / w_macs`.
    pub speedup: f64,
    pub mean_image_tokens: f64,
    pub image_tokens_per_step: Vec<f64>,
    pub macs_per_step: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub redundancy: Option<RedundancySummary>,
    pub warnings: usize,
}

/// Redundancy statistics at the first and last step, averaged over layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancySummary {
    pub first_step: RedundancyStats,
    pub last_step: RedundancyStats,
}

fn layer_mean(stats: &[LayerStat<RedundancyStats>], step: usize) -> Option<RedundancyStats> {
    let sel: Vec<_> = stats.iter().filter(|s| s.step == step).collect();
    if sel.is_empty() {
        return None;
    }
    let k = sel.len() as f64;
    Some(RedundancyStats {
        mean_distance: sel.iter().map(|s| s.value.mean_distance).sum::<f64>() / k,
        mean_similarity: sel.iter().map(|s| s.value.mean_similarity).sum::<f64>() / k,
    })
}

pub fn summarize(run: &RunOutput, baseline: &MacsReport) -> RunSummary {
    let per_step = run.mean_tokens_per_step();
    let mean = per_step.iter().sum::<f64>() / per_step.len().max(1) as f64;
    let w = run.macs.total();
    let base = baseline.total();
    let last = run.macs.steps.saturating_sub(1);
    let redundancy = match (
        layer_mean(&run.redundancy, 0),
        layer_mean(&run.redundancy, last),
    ) {
        (Some(first_step), Some(last_step)) => Some(RedundancySummary {
            first_step,
            last_step,
        }),
        _ => None,
    };
    RunSummary {
        steps: run.macs.steps,
        w_macs: w,
        baseline_w_macs: base,
        identify_macs: run
            .macs
            .component_total(crate::sim::macs::Component::Identify),
        speedup: if w == 0 { 0.0 } else { base as f64 / w as f64 },
        mean_image_tokens: mean,
        image_tokens_per_step: per_step,
        macs_per_step: run.macs.per_step(),
        redundancy,
        warnings: run.warnings.len(),
    }
}
