//! Subcommand implementations. Each writes its human-readable report to
//! `out` and its artifacts to disk.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdtm::ptr::{categorize, tokenize, PromptWeightPlan};
use sdtm::schedule::{calibrate, RatioThresholdMap, ScheduleConfig, ScheduleMode};
use sdtm::sim::analysis::{analyze_frequency, change_concentration, Concentration};
use sdtm::sim::macs::{
    baseline_report, macs_identify, macs_mhsa, macs_mlp, scheduled_report, ModelShape,
};
use sdtm::sim::model::ToyTransformer;
use sdtm::sim::report::{
    frequency_csv, macs_csv, redundancy_csv, summarize, RunSummary, MACS_HEADER,
};
use sdtm::sim::{generate_trajectory, run_batch, run_pipeline, PipelineOptions, TrajectoryConfig};
use sdtm::{MergeKind, TokenGrid};

use crate::config::RunConfig;
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FREQUENCY_FILE: &str = "frequency.csv";
pub const REDUNDANCY_FILE: &str = "redundancy.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";

/// Provenance written into every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Meta {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config_sha256: cfg.sha256(),
            seed: cfg.seed,
        }
    }

    fn csv_header(&self) -> String {
        format!(
            "# sdtm {}\n# config_sha256: {}\n# seed: {}\n",
            self.command, self.config_sha256, self.seed
        )
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io(path, e))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn say(out: &mut dyn Write, msg: &str) -> Result<(), CliError> {
    writeln!(out, "{msg}").map_err(CliError::stdout)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn trajectory(cfg: &TrajectoryConfig, par: sdtm::Parallelism) -> Result<Vec<TokenGrid>, CliError> {
    Ok(generate_trajectory(cfg, par)?)
}

pub fn cmd_calibrate(
    cfg: &RunConfig,
    samples: usize,
    map_out: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if samples == 0 {
        return Err(CliError::Config("at least one sample required".into()));
    }
    let shape = cfg.shape.resolve()?;
    let model = ToyTransformer::new(shape.clone(), cfg.seed)?;
    let trajs = (0..samples)
        .map(|k| {
            let t = TrajectoryConfig {
                noise_seed: cfg.trajectory.noise_seed.wrapping_add(k as u64 + 1),
                ..cfg.trajectory.clone()
            };
            trajectory(&t, cfg.parallelism)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[TokenGrid]> = trajs.iter().map(Vec::as_slice).collect();
    let opts = PipelineOptions {
        collect_scores: true,
        par: cfg.parallelism,
        ..PipelineOptions::baseline(&cfg.merging)
    };
    let runs: Vec<_> = run_batch(&model, &cfg.schedule, &refs, &opts)?
        .into_iter()
        .map(|r| r.scores)
        .collect();
    let mut map = calibrate(&runs, &cfg.schedule, shape.blocks, cfg.seed)?;
    map.meta.config_sha256 = Some(cfg.sha256());
    write_file(map_out, &map.to_json()?)?;
    say(
        out,
        &format!(
            "calibrated {} steps x {} layers from {samples} samples -> {}",
            map.total_steps,
            map.layers,
            map_out.display()
        ),
    )
}

fn prompt_plan(cfg: &RunConfig, err: &mut dyn Write) -> Result<Option<PromptWeightPlan>, CliError> {
    let Some(ptr) = &cfg.ptr else {
        return Ok(None);
    };
    let tokens = tokenize(&ptr.prompt);
    if tokens.is_empty() {
        return Ok(None);
    }
    let categories = match cfg.provider() {
        Some(spec) => {
            let provider = spec.build()?;
            let c = categorize(&ptr.prompt, &tokens, provider.as_ref());
            for w in &c.warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            c.categories
        }
        None => vec![sdtm::ptr::PromptCategory::Neutral; tokens.len()],
    };
    Ok(Some(PromptWeightPlan::new(
        tokens,
        categories,
        ptr.alpha,
        ptr.endpoints,
    )?))
}

fn load_map(path: &Path) -> Result<RatioThresholdMap, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    RatioThresholdMap::from_json(&text).map_err(|e| match e {
        sdtm::Error::Io(e) => io(path, e),
        other => CliError::Mismatch(format!("{}: {other}", path.display())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub meta: Meta,
    pub summary: RunSummary,
}

pub fn cmd_run(
    cfg: &RunConfig,
    map: Option<&Path>,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<RunSummary, CliError> {
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| CliError::Config("no output directory (--out)".into()))?;
    let map_path: Option<PathBuf> = map
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.map.clone());
    let map = match (cfg.schedule.mode, map_path) {
        (ScheduleMode::AdaptiveThreshold, None) => {
            return Err(CliError::Mismatch(
                "adaptive_threshold mode needs a calibration map (--map)".into(),
            ))
        }
        (ScheduleMode::AdaptiveThreshold, Some(p)) => Some(load_map(&p)?),
        (ScheduleMode::DynamicRatio, _) => None,
    };
    prepare_dir(&dir)?;

    let shape = cfg.shape.resolve()?;
    let model = ToyTransformer::new(shape.clone(), cfg.seed)?;
    let traj = trajectory(&cfg.trajectory, cfg.parallelism)?;
    let prompt = prompt_plan(cfg, err)?;
    let opts = PipelineOptions {
        map: map.as_ref(),
        prompt: prompt.as_ref(),
        redundancy: true,
        par: cfg.parallelism,
        ..PipelineOptions::merged(&cfg.merging)
    };
    let run = run_pipeline(&model, &cfg.schedule, &traj, &opts)?;
    if let Some(first) = run.warnings.first() {
        let more = run.warnings.len() - 1;
        let _ = match more {
            0 => writeln!(err, "warning: {first}"),
            _ => writeln!(err, "warning: {first} (and {more} more)"),
        };
    }
    let summary = summarize(&run, &baseline_report(&shape, cfg.schedule.total_steps));
    let meta = Meta::new("run", cfg);
    write_file(
        &dir.join(METRICS_FILE),
        &(meta.csv_header() + &macs_csv(&run.macs)),
    )?;
    write_file(
        &dir.join(SUMMARY_FILE),
        &to_json(&SummaryFile {
            meta,
            summary: summary.clone(),
        }),
    )?;
    say(
        out,
        &format!(
            "W-MACs {} (baseline {}), mean N' {:.2}, speed ratio {:.4}",
            summary.w_macs, summary.baseline_w_macs, summary.mean_image_tokens, summary.speedup
        ),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisFile {
    pub meta: Meta,
    /// Change concentration of the input trajectory.
    pub trajectory: Concentration,
    /// Change concentration of block outputs, averaged over layers.
    pub features: Concentration,
}

pub fn cmd_analyze(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<AnalysisFile, CliError> {
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| CliError::Config("no output directory (--out)".into()))?;
    prepare_dir(&dir)?;
    let shape = cfg.shape.resolve()?;
    let model = ToyTransformer::new(shape.clone(), cfg.seed)?;
    let traj = trajectory(&cfg.trajectory, cfg.parallelism)?;
    let opts = PipelineOptions {
        redundancy: true,
        frequency: true,
        par: cfg.parallelism,
        ..PipelineOptions::baseline(&cfg.merging)
    };
    let run = run_pipeline(&model, &cfg.schedule, &traj, &opts)?;
    let window = cfg.trajectory.low_window;
    let input = change_concentration(&analyze_frequency(&traj, cfg.parallelism)?, window);
    let per_step: Vec<_> = (0..traj.len())
        .map(|t| {
            let parts: Vec<_> = run
                .frequency
                .iter()
                .filter(|s| s.step == t && s.layer > 0)
                .map(|s| s.value)
                .collect();
            sdtm::sim::analysis::merge_summaries(&parts)
        })
        .collect();
    let features = change_concentration(&per_step, window);

    let meta = Meta::new("analyze", cfg);
    write_file(
        &dir.join(FREQUENCY_FILE),
        &(meta.csv_header() + &frequency_csv(&run.frequency)),
    )?;
    write_file(
        &dir.join(REDUNDANCY_FILE),
        &(meta.csv_header() + &redundancy_csv(&run.redundancy)),
    )?;
    let file = AnalysisFile {
        meta,
        trajectory: input,
        features,
    };
    write_file(&dir.join(ANALYSIS_FILE), &to_json(&file))?;
    say(
        out,
        &format!(
            "LL change in first {:.0}% of steps: {:.4}; high-band change after: {:.4}",
            window * 100.0,
            input.low_early_share,
            input.high_late_share
        ),
    )?;
    Ok(file)
}

/// Per-step MAC figures for one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacsSummary {
    pub shape: ModelShape,
    pub mhsa_per_step: u64,
    pub mlp_per_step: u64,
    pub baseline_per_step: u64,
    pub mlp_share: f64,
    pub identify_structure_per_step: u64,
    pub identify_detail_per_step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduledMacs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledMacs {
    pub steps: usize,
    pub w_macs: u64,
    pub baseline_w_macs: u64,
    pub mean_per_step: f64,
    pub speedup: f64,
}

pub fn macs_summary(
    shape: &ModelShape,
    schedule: Option<&ScheduleConfig>,
    window: usize,
    split: f64,
) -> Result<MacsSummary, CliError> {
    shape.validate()?;
    let n = shape.image_tokens + shape.text_tokens;
    let blocks = shape.blocks as u64;
    let mhsa = macs_mhsa(shape, n) * blocks;
    let mlp = macs_mlp(shape, n) * blocks;
    let schedule = schedule
        .map(|s| -> Result<ScheduledMacs, CliError> {
            let r = scheduled_report(shape, s, window, split)?;
            let base = baseline_report(shape, s.total_steps).total();
            Ok(ScheduledMacs {
                steps: s.total_steps,
                w_macs: r.total(),
                baseline_w_macs: base,
                mean_per_step: r.mean_per_step(),
                speedup: base as f64 / r.total() as f64,
            })
        })
        .transpose()?;
    Ok(MacsSummary {
        shape: shape.clone(),
        mhsa_per_step: mhsa,
        mlp_per_step: mlp,
        baseline_per_step: mhsa + mlp,
        mlp_share: mlp as f64 / (mhsa + mlp) as f64,
        identify_structure_per_step: macs_identify(
            shape,
            MergeKind::Structure,
            shape.image_tokens,
            window,
        ) * blocks,
        identify_detail_per_step: macs_identify(
            shape,
            MergeKind::Detail,
            shape.image_tokens,
            window,
        ) * blocks,
        schedule,
    })
}

fn tera(v: f64) -> String {
    format!("{:.4}T", v / 1e12)
}

pub fn render_macs(m: &MacsSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mhsa      {}", tera(m.mhsa_per_step as f64));
    let _ = writeln!(s, "mlp       {}", tera(m.mlp_per_step as f64));
    let _ = writeln!(s, "total     {} per step", tera(m.baseline_per_step as f64));
    let _ = writeln!(s, "mlp share {:.4}", m.mlp_share);
    let _ = writeln!(
        s,
        "identify  structure {:.2E}T, detail {:.2E}T per step",
        m.identify_structure_per_step as f64 / 1e12,
        m.identify_detail_per_step as f64 / 1e12
    );
    if let Some(sc) = &m.schedule {
        let _ = writeln!(
            s,
            "scheduled {} per step over {} steps (W-MACs {}), speedup {:.4}",
            tera(sc.mean_per_step),
            sc.steps,
            tera(sc.w_macs as f64),
            sc.speedup
        );
    }
    s
}

/// Totals recomputed from a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub summary: SummaryFile,
    pub per_step: Vec<u64>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io(path, e))
}

fn header_hash(csv: &str) -> Option<&str> {
    csv.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# config_sha256: "))
}

/// Cross-checks a run directory's CSV against its summary and prints a
/// per-step table.
pub fn cmd_report(dir: &Path, out: &mut dyn Write) -> Result<RunReport, CliError> {
    let csv = read(&dir.join(METRICS_FILE))?;
    let summary: SummaryFile = serde_json::from_str(&read(&dir.join(SUMMARY_FILE))?)
        .map_err(|e| CliError::Mismatch(format!("{SUMMARY_FILE}: {e}")))?;
    if header_hash(&csv) != Some(summary.meta.config_sha256.as_str()) {
        return Err(CliError::Mismatch(format!(
            "{METRICS_FILE} and {SUMMARY_FILE} come from different configs"
        )));
    }
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(MACS_HEADER) {
        return Err(CliError::Mismatch(format!(
            "{METRICS_FILE}: unexpected header"
        )));
    }
    let steps = summary.summary.steps;
    let mut per_step = vec![0u64; steps];
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Mismatch(format!("{METRICS_FILE}: malformed row {}", i + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let step: usize = f[0].parse().map_err(|_| bad())?;
        let macs: u64 = f[4].parse().map_err(|_| bad())?;
        *per_step.get_mut(step).ok_or_else(bad)? += macs;
    }
    if per_step != summary.summary.macs_per_step {
        return Err(CliError::Mismatch(
            "per-step MACs in the CSV disagree with the summary".into(),
        ));
    }
    let base = summary.summary.baseline_w_macs as f64 / steps.max(1) as f64;
    say(out, "step,macs,ratio_to_baseline,mean_image_tokens")?;
    for (t, m) in per_step.iter().enumerate() {
        say(
            out,
            &format!(
                "{t},{m},{:.4},{:.2}",
                *m as f64 / base,
                summary
                    .summary
                    .image_tokens_per_step
                    .get(t)
                    .copied()
                    .unwrap_or(0.0)
            ),
        )?;
    }
    say(
        out,
        &format!(
            "W-MACs {} of {} baseline, speed ratio {:.4}",
            summary.summary.w_macs, summary.summary.baseline_w_macs, summary.summary.speedup
        ),
    )?;
    Ok(RunReport { summary, per_step })
}
