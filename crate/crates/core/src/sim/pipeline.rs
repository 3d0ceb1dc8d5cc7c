//! The merge-aware forward pass over a trajectory.
//!
//! Structure steps merge image tokens before attention and the
//! feed-forward block; detail steps run full attention, score tokens on the
//! resulting image attention map and merge before the feed-forward block.
//! Blocks are residual, so merging wraps the branch:
//! `x += unmerge(branch(merge(x)))`.
//!
//! A batch runs in lockstep per layer so adaptive plans can be equalized
//! across elements before they execute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{for_each_mut, Parallelism};
use crate::merging::{
    idm_build_plan, idm_score_tokens, ssm_build_plan, ssm_score_windows, unmerge, Selector,
    UnmergeState,
};
use crate::numerics::Matrix;
use crate::ptr::PromptWeightPlan;
use crate::schedule::{
    adaptive_threshold, batch_harmonize, dynamic_ratio, stage_of, CalibrationRun,
    RatioThresholdMap, ScheduleConfig, ScheduleMode,
};
use crate::sim::analysis::{analyze_redundancy, subband_summary, RedundancyStats, SubbandSummary};
use crate::sim::macs::{macs_identify, macs_mhsa, macs_mlp, Component, MacsEntry, MacsReport};
use crate::sim::model::{image_attention, PromptContext, ToyTransformer};
use crate::tokengrid::{
    apply_merge, window_partition, MergeKind, MergePlan, TokenGrid, WindowPartition,
};

/// Merging hyperparameters shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdtmParams {
    pub window: usize,
    pub alpha_s: f64,
    pub alpha_d: f64,
    /// Fraction of tokens forming the inattentive group.
    pub split: f64,
    /// Unmerge blend weight.
    pub blend: f64,
}

impl Default for SdtmParams {
    fn default() -> Self {
        Self {
            window: 2,
            alpha_s: 1.0,
            alpha_d: 1.0,
            split: 0.5,
            blend: 0.5,
        }
    }
}

impl SdtmParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config("window must be at least 2".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!(
                "split must lie in (0, 1), got {}",
                self.split
            )));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!(
                "blend must lie in [0, 1], got {}",
                self.blend
            )));
        }
        if !(self.alpha_s.is_finite() && self.alpha_d.is_finite()) {
            return Err(Error::Config("alpha_s and alpha_d must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions<'a> {
    pub params: &'a SdtmParams,
    /// When false the blocks run unmerged (the baseline).
    pub merging: bool,
    /// Required in adaptive-threshold mode.
    pub map: Option<&'a RatioThresholdMap>,
    pub prompt: Option<&'a PromptWeightPlan>,
    /// Gather candidate scores for calibration.
    pub collect_scores: bool,
    pub redundancy: bool,
    pub frequency: bool,
    pub par: Parallelism,
}

impl<'a> PipelineOptions<'a> {
    pub fn baseline(params: &'a SdtmParams) -> Self {
        Self {
            params,
            merging: false,
            map: None,
            prompt: None,
            collect_scores: false,
            redundancy: false,
            frequency: false,
            par: Parallelism::default(),
        }
    }

    pub fn merged(params: &'a SdtmParams) -> Self {
        Self {
            merging: true,
            ..Self::baseline(params)
        }
    }
}

/// A statistic at one `(step, layer)`. Layer 0 is the block-stack input,
/// layer `l + 1` the output of block `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStat<T> {
    pub step: usize,
    pub layer: usize,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub macs: MacsReport,
    /// Image tokens entering the feed-forward block, `[step][layer]`.
    pub image_tokens: Vec<Vec<usize>>,
    pub redundancy: Vec<LayerStat<RedundancyStats>>,
    pub frequency: Vec<LayerStat<SubbandSummary>>,
    pub scores: CalibrationRun,
    /// Image tokens leaving the last block, per step.
    pub outputs: Vec<Matrix>,
    pub warnings: Vec<String>,
}

impl RunOutput {
    /// Mean image-token count per step.
    pub fn mean_tokens_per_step(&self) -> Vec<f64> {
        self.image_tokens
            .iter()
            .map(|l| l.iter().sum::<usize>() as f64 / l.len().max(1) as f64)
            .collect()
    }
}

struct Element<'t> {
    traj: &'t [TokenGrid],
    x: Matrix,
    text: Matrix,
    ages: Vec<u32>,
    /// Per layer: attention and feed-forward unmerge sites.
    sites: Vec<[UnmergeState; 2]>,
    step_mask: Vec<bool>,
    plan: Option<MergePlan>,
    out: RunOutput,
}

fn check_inputs(
    model: &ToyTransformer,
    cfg: &ScheduleConfig,
    trajs: &[&[TokenGrid]],
    opts: &PipelineOptions<'_>,
) -> Result<Option<WindowPartition>> {
    let shape = &model.shape;
    shape.validate()?;
    cfg.validate()?;
    opts.params.validate()?;
    for (b, traj) in trajs.iter().enumerate() {
        if traj.len() != cfg.total_steps {
            return Err(Error::Config(format!(
                "trajectory {b} has {} steps, schedule expects {}",
                traj.len(),
                cfg.total_steps
            )));
        }
        if let Some(g) = traj.iter().find(|g| {
            g.height() != shape.grid_height
                || g.width() != shape.grid_width
                || g.dim() != shape.model_dim
        }) {
            return Err(Error::Config(format!(
                "trajectory {b} grid {}x{}x{} does not match model {}x{}x{}",
                g.height(),
                g.width(),
                g.dim(),
                shape.grid_height,
                shape.grid_width,
                shape.model_dim
            )));
        }
    }
    if opts.merging && cfg.mode == ScheduleMode::AdaptiveThreshold {
        let map = opts.map.ok_or_else(|| {
            Error::Mismatch("adaptive-threshold mode needs a ratio-threshold map".into())
        })?;
        map.validate()?;
        if map.total_steps != cfg.total_steps || map.layers != shape.blocks {
            return Err(Error::Mismatch(format!(
                "map covers {} steps x {} layers, run has {} x {}",
                map.total_steps, map.layers, cfg.total_steps, shape.blocks
            )));
        }
    }
    if opts.merging || opts.collect_scores {
        Ok(Some(window_partition(
            shape.grid_height,
            shape.grid_width,
            opts.params.window,
        )?))
    } else {
        Ok(None)
    }
}

fn selector(
    cfg: &ScheduleConfig,
    map: Option<&RatioThresholdMap>,
    t: usize,
    l: usize,
) -> Result<Selector> {
    match cfg.mode {
        ScheduleMode::DynamicRatio => Ok(Selector::Ratio(dynamic_ratio(cfg, t, l))),
        ScheduleMode::AdaptiveThreshold => {
            let map = map.expect("checked before the run");
            Ok(Selector::Threshold(adaptive_threshold(
                map,
                &map.similarity,
                cfg,
                t,
                l,
            )?))
        }
    }
}

fn grid_of(x: &Matrix, ages: &[u32], h: usize, w: usize) -> Result<TokenGrid> {
    let mut g = TokenGrid::new(h, w, x.clone())?;
    g.last_merge_age = ages.to_vec();
    Ok(g)
}

/// Runs `branch` on `[merge(x); text]`, adds the unmerged image part to `x`
/// and the text part to `text`.
fn residual<F>(
    x: &mut Matrix,
    text: &mut Matrix,
    plan: Option<&MergePlan>,
    site: &mut UnmergeState,
    branch: F,
) -> Result<Matrix>
where
    F: FnOnce(&Matrix) -> Result<(Matrix, Matrix)>,
{
    let compressed = match plan {
        Some(p) => {
            let c = apply_merge(x, p)?;
            if c.rows() != p.result_count() {
                return Err(Error::Shape(format!(
                    "merged matrix has {} rows, plan records {}",
                    c.rows(),
                    p.result_count()
                )));
            }
            c
        }
        None => x.clone(),
    };
    let n_img = compressed.rows();
    let joint = compressed.vstack(text)?;
    let (delta, extra) = branch(&joint)?;
    if delta.rows() != joint.rows() {
        return Err(Error::Shape(format!(
            "block returned {} rows for {} inputs",
            delta.rows(),
            joint.rows()
        )));
    }
    let (d_img, d_txt) = delta.split_rows(n_img);
    let d_img = match plan {
        Some(p) => unmerge(&d_img, p, site)?,
        None => d_img,
    };
    x.add_assign(&d_img)?;
    text.add_assign(&d_txt)?;
    Ok(extra)
}

fn record(
    out: &mut RunOutput,
    step: usize,
    layer: usize,
    component: Component,
    n: usize,
    macs: u64,
    merged: usize,
) {
    out.macs.push(MacsEntry {
        step,
        layer,
        component,
        n_tokens: n,
        macs,
        merged_count: merged,
    });
}

fn observe(
    e: &mut Element<'_>,
    opts: &PipelineOptions<'_>,
    step: usize,
    layer: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    if !(opts.redundancy || opts.frequency) {
        return Ok(());
    }
    let g = TokenGrid::new(h, w, e.x.clone())?;
    if opts.redundancy {
        // Elements already run in parallel; keep the inner scan sequential.
        let value = analyze_redundancy(&g, Parallelism::Sequential);
        e.out.redundancy.push(LayerStat { step, layer, value });
    }
    if opts.frequency {
        let value = subband_summary(&g)?;
        e.out.frequency.push(LayerStat { step, layer, value });
    }
    Ok(())
}

/// Runs a batch of trajectories through the model in lockstep. Results are
/// returned in batch order.
pub fn run_batch(
    model: &ToyTransformer,
    cfg: &ScheduleConfig,
    trajs: &[&[TokenGrid]],
    opts: &PipelineOptions<'_>,
) -> Result<Vec<RunOutput>> {
    let part = check_inputs(model, cfg, trajs, opts)?;
    let shape = &model.shape;
    let (h, w) = (shape.grid_height, shape.grid_width);
    let n = shape.image_tokens;
    let nt = shape.text_tokens;
    let blocks = shape.blocks;
    let total = cfg.total_steps;
    let p = opts.params;

    let mut elems: Vec<Element<'_>> = trajs
        .iter()
        .map(|traj| Element {
            traj,
            x: Matrix::zeros(0, 0),
            text: Matrix::zeros(0, 0),
            ages: vec![0; n],
            sites: (0..blocks)
                .map(|_| [UnmergeState::new(p.blend), UnmergeState::new(p.blend)])
                .collect(),
            step_mask: vec![false; n],
            plan: None,
            out: RunOutput {
                macs: MacsReport::new(total),
                ..Default::default()
            },
        })
        .collect();
    let inner = if elems.len() > 1 {
        Parallelism::Sequential
    } else {
        opts.par
    };

    for t in 0..total {
        let kind = stage_of(cfg, t);
        for_each_mut(opts.par, &mut elems, |_, e| {
            e.x = e.traj[t].tokens.clone();
            e.text = model.text.clone();
            e.step_mask.fill(false);
            e.out.image_tokens.push(Vec::with_capacity(blocks));
        });
        collect(opts.par, &mut elems, |e| observe(e, opts, t, 0, h, w))?;

        for l in 0..blocks {
            let sel = if opts.merging {
                Some(selector(cfg, opts.map, t, l)?)
            } else {
                None
            };
            let prompt = opts.prompt.map(|plan| PromptContext {
                plan,
                step: t,
                total_steps: total,
            });

            // Phase 1: plans (detail steps also run attention here).
            collect(opts.par, &mut elems, |e| {
                e.plan = None;
                match kind {
                    MergeKind::Structure => {
                        if let Some(part) = &part {
                            let grid = grid_of(&e.x, &e.ages, h, w)?;
                            let scores = ssm_score_windows(&grid, part, p.alpha_s)?;
                            if opts.collect_scores {
                                let v = scores.iter().map(|s| s.total).collect();
                                e.out.scores.scores.insert((t, l), (kind, v));
                            }
                            if let Some(sel) = sel {
                                e.plan = Some(ssm_build_plan(&scores, part, sel)?);
                            }
                        }
                    }
                    MergeKind::Detail => {
                        let Element { x, text, .. } = e;
                        let attn = residual(x, text, None, &mut UnmergeState::new(1.0), |j| {
                            model.attention(l, j, nt, prompt, inner)
                        })?;
                        if part.is_some() {
                            let grid = grid_of(&e.x, &e.ages, h, w)?;
                            let a = image_attention(&attn, n)?;
                            let scores = idm_score_tokens(&grid, &a, p.alpha_d, p.split, inner)?;
                            if opts.collect_scores {
                                let v = scores
                                    .inattentive()
                                    .iter()
                                    .filter_map(|s| s.best_sim)
                                    .collect();
                                e.out.scores.scores.insert((t, l), (kind, v));
                            }
                            if let Some(sel) = sel {
                                e.plan = Some(idm_build_plan(&scores, sel)?);
                            }
                        }
                    }
                }
                Ok(())
            })?;

            let plans: Vec<MergePlan> = elems.iter().filter_map(|e| e.plan.clone()).collect();
            if plans.len() == elems.len() && !plans.is_empty() {
                for (e, plan) in elems.iter_mut().zip(batch_harmonize(&plans, cfg.mode)) {
                    e.plan = Some(plan);
                }
            }

            // Phase 2: the merged branches.
            collect(opts.par, &mut elems, |e| {
                let plan = e.plan.take();
                let merged = plan.as_ref().map_or(0, MergePlan::merged_count);
                let reduced = n - merged + nt;
                if let Some(pl) = &plan {
                    e.out.warnings.extend(
                        pl.warnings
                            .iter()
                            .map(|m| format!("step {t} layer {l}: {m}")),
                    );
                    for (flag, m) in e.step_mask.iter_mut().zip(pl.merged_mask()) {
                        *flag |= m;
                    }
                    record(
                        &mut e.out,
                        t,
                        l,
                        Component::Identify,
                        n,
                        macs_identify(shape, kind, n, p.window),
                        0,
                    );
                }
                let Element {
                    x,
                    text,
                    sites,
                    out,
                    ..
                } = e;
                let site = &mut sites[l];
                match kind {
                    MergeKind::Structure => {
                        residual(x, text, plan.as_ref(), &mut site[0], |j| {
                            model
                                .attention(l, j, nt, prompt, inner)
                                .map(|(d, _)| (d, Matrix::zeros(0, 0)))
                        })?;
                        record(
                            out,
                            t,
                            l,
                            Component::Mhsa,
                            reduced,
                            macs_mhsa(shape, reduced),
                            merged,
                        );
                    }
                    MergeKind::Detail => {
                        record(
                            out,
                            t,
                            l,
                            Component::Mhsa,
                            n + nt,
                            macs_mhsa(shape, n + nt),
                            0,
                        );
                    }
                }
                residual(x, text, plan.as_ref(), &mut site[1], |j| {
                    model.mlp(l, j).map(|d| (d, Matrix::zeros(0, 0)))
                })?;
                record(
                    out,
                    t,
                    l,
                    Component::Mlp,
                    reduced,
                    macs_mlp(shape, reduced),
                    merged,
                );
                e.out.image_tokens[t].push(n - merged);
                if !e.x.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite activations at step {t}, layer {l}"
                    )));
                }
                observe(e, opts, t, l + 1, h, w)
            })?;
        }

        for_each_mut(opts.par, &mut elems, |_, e| {
            for (age, &m) in e.ages.iter_mut().zip(&e.step_mask) {
                *age = if m { 0 } else { age.saturating_add(1) };
            }
            e.out.outputs.push(e.x.clone());
        });
    }
    Ok(elems.into_iter().map(|e| e.out).collect())
}

/// Runs `f` on every element and returns the first error in batch order.
fn collect<T: Send, F>(par: Parallelism, items: &mut [T], f: F) -> Result<()>
where
    F: Fn(&mut T) -> Result<()> + Sync + Send,
{
    let mut results: Vec<Result<()>> = (0..items.len()).map(|_| Ok(())).collect();
    {
        let mut pairs: Vec<(&mut T, &mut Result<()>)> =
            items.iter_mut().zip(results.iter_mut()).collect();
        for_each_mut(par, &mut pairs, |_, (item, slot)| {
            **slot = f(item);
        });
    }
    results.into_iter().collect()
}

/// Single-trajectory convenience wrapper around [`run_batch`].
pub fn run_pipeline(
    model: &ToyTransformer,
    cfg: &ScheduleConfig,
    traj: &[TokenGrid],
    opts: &PipelineOptions<'_>,
) -> Result<RunOutput> {
    let mut v = run_batch(model, cfg, &[traj], opts)?;
    Ok(v.pop().expect("one element"))
}
