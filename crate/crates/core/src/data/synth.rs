//! Synthetic intensity videos: one Gaussian blob per intensity channel whose
//! brightness follows that channel's random walk, over a drifting background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::labels::{LabelRow, LabelTable, MAX_INTENSITY};
use super::PackedVideo;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub videos: usize,
    pub frames: usize,
    pub num_outputs: usize,
    pub height: usize,
    pub width: usize,
    /// Blob centres `(row, col)`; empty means an automatic grid layout.
    pub positions: Vec<(f64, f64)>,
    pub sigma: f64,
    /// AR(1) coefficient of the intensity velocity; closer to 1 is smoother.
    pub smoothness: f64,
    /// Standard deviation of the velocity innovations.
    pub step: f64,
    /// Peak blob brightness at intensity 5.
    pub gain: f64,
    /// Amplitude of the sinusoidal background drift.
    pub drift: f64,
    pub noise: f64,
    /// Largest per-video translation of the whole blob layout, in pixels.
    pub shift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            videos: 20,
            frames: 200,
            num_outputs: 3,
            height: 16,
            width: 16,
            positions: Vec::new(),
            sigma: 2.0,
            smoothness: 0.9,
            step: 0.08,
            gain: 0.7,
            drift: 0.02,
            noise: 0.01,
            shift: 0.0,
            seed: 0,
        }
    }
}

/// Generated videos plus the dense intensity curves, `intensities[v][t][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub videos: Vec<PackedVideo>,
    pub intensities: Vec<Vec<Vec<f32>>>,
}

impl SynthData {
    /// One label row per frame of every video.
    pub fn dense_labels(&self) -> Result<LabelTable> {
        let n = self.intensities.first().and_then(|c| c.first()).map_or(0, |r| r.len());
        let rows = self
            .videos
            .iter()
            .zip(&self.intensities)
            .flat_map(|(v, curve)| {
                curve.iter().enumerate().map(|(t, a)| LabelRow {
                    video: v.id.clone(),
                    frame: t,
                    values: a.clone(),
                })
            })
            .collect();
        LabelTable::new(n, rows)
    }
}

impl SynthSpec {
    /// Blob centres, laid out on a `g×g` grid (`g = ⌈√N⌉`) when not given.
    pub fn blob_positions(&self) -> Vec<(f64, f64)> {
        if !self.positions.is_empty() {
            return self.positions.clone();
        }
        let g = (self.num_outputs as f64).sqrt().ceil() as usize;
        let cell = |len: usize, i: usize| (i as f64 + 0.5) * len as f64 / g as f64;
        (0..self.num_outputs)
            .map(|n| (cell(self.height, n / g), cell(self.width, n % g)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 || self.frames == 0 || self.num_outputs == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic videos, frames, channels and size must be positive".into()));
        }
        if !(self.sigma > 0.0) || !(0.0..1.0).contains(&self.smoothness) {
            return Err(Error::Config(format!(
                "need sigma > 0 and smoothness in [0,1), got {} and {}",
                self.sigma, self.smoothness
            )));
        }
        for (name, v) in [("step", self.step), ("gain", self.gain), ("drift", self.drift), ("noise", self.noise), ("shift", self.shift)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("synthetic {name} must be non-negative, got {v}")));
            }
        }
        let pos = self.blob_positions();
        if pos.len() != self.num_outputs {
            return Err(Error::Config(format!(
                "{} blob positions for {} intensity channels",
                pos.len(),
                self.num_outputs
            )));
        }
        for (i, a) in pos.iter().enumerate() {
            for b in &pos[..i] {
                let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                if d < 2.0 * self.sigma {
                    return Err(Error::Config(format!(
                        "blobs at {a:?} and {b:?} are {d:.3} apart, closer than 2σ = {}",
                        2.0 * self.sigma
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthData> {
        self.validate()?;
        let per_video: Vec<(PackedVideo, Vec<Vec<f32>>)> = (0..self.videos)
            .into_par_iter()
            .map(|v| self.generate_video(v))
            .collect::<Result<_>>()?;
        let (videos, intensities) = per_video.into_iter().unzip();
        Ok(SynthData { videos, intensities })
    }

    fn generate_video(&self, index: usize) -> Result<(PackedVideo, Vec<Vec<f32>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let curves = self.intensity_curves(&mut rng);
        let base = rng.gen_range(0.05..0.1);
        let period = rng.gen_range(50.0..150.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let dy = self.shift * rng.gen_range(-1.0..=1.0);
        let dx = self.shift * rng.gen_range(-1.0..=1.0);
        let pos: Vec<(f64, f64)> = self.blob_positions().iter().map(|&(y, x)| (y + dy, x + dx)).collect();
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(self.frames * h * w);
        for (t, a) in curves.iter().enumerate() {
            let bg = base + self.drift * (std::f64::consts::TAU * t as f64 / period + phase).sin();
            let clean = self.render_frame(a, bg, &pos);
            for v in clean {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((v + self.noise * noise).clamp(0.0, 1.0) as f32);
            }
        }
        let frames = Tensor::new(vec![self.frames, 1, h, w], data)?;
        Ok((PackedVideo::new(format!("vid{index:03}"), frames)?, curves))
    }

    /// Clipped random walk with AR(1)-smoothed velocity, one curve per
    /// channel, `out[t][n] ∈ [0,5]`.
    fn intensity_curves(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let max = MAX_INTENSITY as f64;
        let mut out = vec![vec![0.0f32; self.num_outputs]; self.frames];
        for n in 0..self.num_outputs {
            let mut a = rng.gen_range(0.0..max);
            let mut vel = 0.0;
            for row in out.iter_mut() {
                row[n] = a as f32;
                let e: f64 = rng.sample(StandardNormal);
                vel = self.smoothness * vel + self.step * e;
                a += vel;
                if a < 0.0 || a > max {
                    a = a.clamp(0.0, max);
                    vel = -0.5 * vel;
                }
            }
        }
        out
    }

    /// Noise-free frame: background plus one blob per channel with peak
    /// `gain · a_n / 5`.
    pub fn render_frame(&self, intensities: &[f32], background: f64, positions: &[(f64, f64)]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut out = vec![background; h * w];
        for (&a, &(py, px)) in intensities.iter().zip(positions) {
            let amp = self.gain * a as f64 / MAX_INTENSITY as f64;
            if amp == 0.0 {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
                    out[y * w + x] += amp * (-d2 * inv).exp();
                }
            }
        }
        out
    }
}
