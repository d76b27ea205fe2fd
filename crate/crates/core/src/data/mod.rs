//! Clips, training windows, post-processing attacks, and the synthetic
//! dataset generator.

pub mod attack;
pub mod manifest;
pub mod synth;
pub mod video;

pub use attack::{apply_attack, AttackKind, AttackParams, AttackSpec};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_videos, synth_generate, SynthConfig, REAL_TAG};
pub use video::{sample_window, select_key_frame, Frame, Label, VideoClip};

use sha2::{Digest, Sha256};

use crate::error::Result;

/// Per-item seed that depends only on `seed` and `key`, not on iteration order.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

/// Brings a clip to the model's square input side, resizing bilinearly when
/// an attack changed the frame size.
pub fn fit_to_side(clip: &VideoClip, side: usize) -> Result<VideoClip> {
    let (_, h, w) = clip.dims();
    if h == side && w == side {
        return Ok(clip.clone());
    }
    clip.map_frames(|f| Ok(attack::resize_bilinear(f, side, side)))
}
