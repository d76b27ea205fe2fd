//! Desk-scale synthetic stand-in for a real/fake video corpus.
//!
//! Real clips are sums of drifting low-frequency gratings plus mild sensor
//! noise. A fake clip reuses the pattern of its paired real clip and adds two
//! artifacts whose amplitude scales with `artifact_strength`:
//!
//! * a static checkerboard texture (period 2 px) inside a square that always
//!   lies in the central region of the frame, and
//! * a global brightness flicker `sin(2π t / flicker_period + φ)`.
//!
//! With strength 0 a fake clip is pixel-identical to its pair.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_frames, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
use super::video::{Frame, Label, VideoClip};
use crate::error::{Error, IoContext, Result};
use crate::exec::{self, ExecMode};

pub const REAL_TAG: &str = "real";

const TEXTURE_AMPLITUDE: f64 = 0.2;
const FLICKER_AMPLITUDE: f64 = 0.12;
const NOISE_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_real: usize,
    pub num_fake: usize,
    /// Frames per stored video.
    pub frames: usize,
    /// Stored frame side in pixels.
    pub side: usize,
    pub artifact_strength: f64,
    pub flicker_period: f64,
    pub generator_tag: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_real: 50,
            num_fake: 50,
            frames: 12,
            side: 40,
            artifact_strength: 0.5,
            flicker_period: 4.0,
            generator_tag: "synth".into(),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_real == 0 || self.num_fake == 0 {
            return Err(Error::Config(format!(
                "need at least one real and one fake video (real={}, fake={})",
                self.num_real, self.num_fake
            )));
        }
        if !(0.0..=1.0).contains(&self.artifact_strength) {
            return Err(Error::Config(format!(
                "artifact_strength {} outside [0,1]",
                self.artifact_strength
            )));
        }
        if self.frames == 0 || self.side < 5 {
            return Err(Error::Config("frames must be >= 1 and side >= 5".into()));
        }
        if !(self.flicker_period > 0.0) {
            return Err(Error::Config("flicker_period must be > 0".into()));
        }
        if self.generator_tag == REAL_TAG || self.generator_tag.is_empty() {
            return Err(Error::Config(format!(
                "generator_tag must be non-empty and differ from `{REAL_TAG}`"
            )));
        }
        Ok(())
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    speed: f64,
    amp: f64,
    color: [f64; 3],
}

struct Pattern {
    gratings: Vec<Grating>,
    noise_seed: u64,
    texture_top: usize,
    texture_left: usize,
    flicker_phase: f64,
}

fn pattern_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn texture_side(side: usize) -> usize {
    (side * 2 / 5).max(2)
}

impl Pattern {
    fn draw(seed: u64, index: usize, side: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed(seed, index));
        let gratings = (0..3)
            .map(|_| Grating {
                fx: rng.random_range(-2.5..2.5),
                fy: rng.random_range(-2.5..2.5),
                phase: rng.random_range(0.0..2.0 * PI),
                speed: rng.random_range(-0.4..0.4),
                amp: rng.random_range(0.5..1.0),
                color: [
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                    rng.random_range(0.6..1.0),
                ],
            })
            .collect();
        // texture square inside [side/5, 4·side/5)
        let lo = side / 5;
        let hi = (4 * side / 5).saturating_sub(texture_side(side)).max(lo);
        Self {
            gratings,
            noise_seed: rng.random(),
            texture_top: rng.random_range(lo..=hi),
            texture_left: rng.random_range(lo..=hi),
            flicker_phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn render(&self, cfg: &SynthConfig, fake: bool) -> Vec<Frame> {
        let side = cfg.side;
        let s = if fake { cfg.artifact_strength } else { 0.0 };
        let normal = Normal::new(0.0, NOISE_STD).unwrap();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let amp_total: f64 = self.gratings.iter().map(|g| g.amp).sum();
        let tex = texture_side(side);
        (0..cfg.frames)
            .map(|t| {
                let flicker =
                    FLICKER_AMPLITUDE * s * (2.0 * PI * t as f64 / cfg.flicker_period + self.flicker_phase).sin();
                let mut data = vec![0.0f32; 3 * side * side];
                for c in 0..3 {
                    for y in 0..side {
                        for x in 0..side {
                            let mut v = 0.0;
                            for g in &self.gratings {
                                let arg = 2.0 * PI * (g.fx * x as f64 / side as f64 + g.fy * y as f64 / side as f64)
                                    + g.phase
                                    + g.speed * t as f64;
                                v += g.amp * g.color[c] * arg.sin();
                            }
                            let mut px = 0.5 + 0.25 * v / amp_total + normal.sample(&mut noise_rng);
                            if s > 0.0 {
                                let in_tex = (self.texture_top..self.texture_top + tex).contains(&y)
                                    && (self.texture_left..self.texture_left + tex).contains(&x);
                                if in_tex {
                                    let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                                    px += TEXTURE_AMPLITUDE * s * sign;
                                }
                                px += flicker;
                            }
                            data[(c * side + y) * side + x] = px as f32;
                        }
                    }
                }
                Frame::from_clamped(3, side, side, data)
            })
            .collect()
    }
}

/// Stratified 80/10/10 split of `count` items of one label.
fn assign_splits(count: usize, seed: u64, label: Label) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + label.as_u8() as u64));
    // Fisher-Yates
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (count as f64 * 0.1).round() as usize;
    let n_val = (count as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Train; count];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    splits
}

/// Generates every video in memory, reals first, in manifest order.
pub fn generate_videos(cfg: &SynthConfig, mode: ExecMode) -> Result<Vec<(ManifestEntry, VideoClip)>> {
    cfg.validate()?;
    let real_splits = assign_splits(cfg.num_real, cfg.seed, Label::Real);
    let fake_splits = assign_splits(cfg.num_fake, cfg.seed, Label::Fake);
    let mut jobs = Vec::with_capacity(cfg.num_real + cfg.num_fake);
    for (k, split) in real_splits.into_iter().enumerate() {
        jobs.push((Label::Real, k, split));
    }
    for (k, split) in fake_splits.into_iter().enumerate() {
        jobs.push((Label::Fake, k, split));
    }
    exec::try_map(mode, &jobs, |&(label, k, split)| {
        let pattern = Pattern::draw(cfg.seed, k, cfg.side);
        let frames = pattern.render(cfg, label.is_fake());
        let (prefix, tag) = match label {
            Label::Real => ("real", REAL_TAG.to_string()),
            Label::Fake => ("fake", cfg.generator_tag.clone()),
        };
        let path = format!("clips/{prefix}_{k:04}");
        let clip = VideoClip::new(frames, label, tag.clone(), path.clone())?;
        Ok((
            ManifestEntry {
                path,
                label,
                generator_tag: tag,
                split,
            },
            clip,
        ))
    })
}

/// Writes clips and `manifest.jsonl` under `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path, mode: ExecMode) -> Result<DatasetManifest> {
    let videos = generate_videos(cfg, mode)?;
    fs::create_dir_all(out).at(out)?;
    exec::try_map(mode, &videos, |(entry, clip)| {
        write_frames(&out.join(&entry.path), clip.frames())
    })?;
    let manifest = DatasetManifest::new(videos.into_iter().map(|(e, _)| e).collect(), out)?;
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
