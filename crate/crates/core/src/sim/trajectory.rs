//! Synthetic latent trajectories.
//!
//! Each channel is a sum of a block-constant low-frequency field (zero
//! energy in the high Haar subbands) and a block-zero-mean high-frequency
//! field (zero energy in LL). Their amplitudes ramp with smoothsteps: the
//! low field over the first `low_window` of normalized time, the high field
//! over the following `high_window`. Independent Gaussian noise is added at
//! every step.
//!
//! Spatial fields are normalized to unit RMS per channel and the shared
//! offset to a fixed norm, so different seeds change the layout but not the
//! energy budget.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::numerics::Matrix;
use crate::tokengrid::TokenGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Seeds the spatial fields.
    pub seed: u64,
    /// Seeds the per-step noise; runs sharing `seed` but not `noise_seed`
    /// share content.
    pub noise_seed: u64,
    pub low_window: f64,
    pub high_window: f64,
    pub low_start: f64,
    pub low_end: f64,
    pub high_start: f64,
    pub high_end: f64,
    pub noise: f64,
    /// Cosine components per channel in the low field.
    pub low_components: usize,
    /// RMS of the per-channel constant shared by all tokens, relative to the
    /// unit-RMS spatial fields.
    pub offset: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            height: 16,
            width: 16,
            dim: 16,
            seed: 0,
            noise_seed: 0,
            low_window: 0.4,
            high_window: 0.6,
            low_start: 0.2,
            low_end: 1.0,
            high_start: 0.1,
            high_end: 0.6,
            noise: 0.01,
            low_components: 8,
            offset: 1.0,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.dim == 0 {
            return Err(Error::Config(
                "trajectory needs steps and dim of at least 1".into(),
            ));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(2)
            || !self.width.is_multiple_of(2)
        {
            return Err(Error::Config(format!(
                "trajectory grid {}x{} must have positive even sides",
                self.height, self.width
            )));
        }
        let windows_ok = self.low_window > 0.0
            && self.high_window > 0.0
            && self.low_window + self.high_window <= 1.0 + 1e-12;
        if !windows_ok {
            return Err(Error::Config(
                "low_window and high_window must be positive and sum to at most 1".into(),
            ));
        }
        let amps = [
            self.low_start,
            self.low_end,
            self.high_start,
            self.high_end,
            self.noise,
            self.offset,
        ];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config(
                "amplitudes must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    fn progress(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            0.0
        } else {
            step as f64 / (self.steps - 1) as f64
        }
    }

    pub fn low_amplitude(&self, step: usize) -> f64 {
        let u = self.progress(step) / self.low_window;
        self.low_start + (self.low_end - self.low_start) * smoothstep(u)
    }

    pub fn high_amplitude(&self, step: usize) -> f64 {
        let u = (self.progress(step) - self.low_window) / self.high_window;
        self.high_start + (self.high_end - self.high_start) * smoothstep(u)
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

const NOISE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Scales to unit root-mean-square; all-zero input stays zero.
fn normalize_rms(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        for x in v.iter_mut() {
            *x /= rms;
        }
    }
}

struct Bases {
    /// `[channel][pixel]`, row-major pixels.
    low: Vec<Vec<f64>>,
    high: Vec<Vec<f64>>,
}

fn bases(cfg: &TrajectoryConfig) -> Bases {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let (bh, bw) = (h / 2, w / 2);
    let mut low = Vec::with_capacity(cfg.dim);
    let mut high = Vec::with_capacity(cfg.dim);
    let offsets: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
    let scale = (cfg.dim as f64).sqrt() / crate::numerics::l2_norm(&offsets).max(f64::MIN_POSITIVE);
    for &offset in &offsets {
        let comps: Vec<(f64, f64, f64, f64)> = (0..cfg.low_components)
            .map(|_| {
                let fy = rng.random_range(0..=2) as f64;
                let fx = rng.random_range(0..=2) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp: f64 = rng.sample(StandardNormal);
                (fy, fx, phase, amp)
            })
            .collect();
        let mut field = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (bi, bj) = ((i / 2) as f64 / bh as f64, (j / 2) as f64 / bw as f64);
                field[i * w + j] = comps
                    .iter()
                    .map(|&(fy, fx, ph, a)| a * (2.0 * PI * (fy * bi + fx * bj) + ph).cos())
                    .sum();
            }
        }
        normalize_rms(&mut field);
        for v in &mut field {
            *v += cfg.offset * scale * offset;
        }
        low.push(field);

        let mut field: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
        for bi in 0..bh {
            for bj in 0..bw {
                let idx = [
                    2 * bi * w + 2 * bj,
                    2 * bi * w + 2 * bj + 1,
                    (2 * bi + 1) * w + 2 * bj,
                    (2 * bi + 1) * w + 2 * bj + 1,
                ];
                let mean = idx.iter().map(|&k| field[k]).sum::<f64>() / 4.0;
                for k in idx {
                    field[k] -= mean;
                }
            }
        }
        normalize_rms(&mut field);
        high.push(field);
    }
    Bases { low, high }
}

/// One token grid per step; token `i * width + j` holds pixel `(i, j)` of
/// every channel.
pub fn generate_trajectory(cfg: &TrajectoryConfig, par: Parallelism) -> Result<Vec<TokenGrid>> {
    cfg.validate()?;
    let b = bases(cfg);
    let (h, w, d) = (cfg.height, cfg.width, cfg.dim);
    map_indexed(par, cfg.steps, |t| {
        let (la, ha) = (cfg.low_amplitude(t), cfg.high_amplitude(t));
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_add(cfg.noise_seed.wrapping_mul(NOISE_SALT)),
        );
        rng.set_stream(t as u64 + 1);
        let mut m = Matrix::zeros(h * w, d);
        for c in 0..d {
            for p in 0..h * w {
                let noise: f64 = rng.sample(StandardNormal);
                m.set(
                    p,
                    c,
                    la * b.low[c][p] + ha * b.high[c][p] + cfg.noise * noise,
                );
            }
        }
        TokenGrid::new(h, w, m)
    })
    .into_iter()
    .collect()
}

/// Per-channel `height x width` field of a token grid.
pub fn channel_field(grid: &TokenGrid, channel: usize) -> Matrix {
    let (h, w) = (grid.height(), grid.width());
    let data = (0..h * w).map(|p| grid.tokens.get(p, channel)).collect();
    Matrix::from_vec(h, w, data).expect("grid dimensions are consistent")
}
