//! Post-processing attacks: Gaussian blur, JPEG re-encoding, downscaling,
//! rotation, and a per-clip random mixture of the four.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use super::video::{Frame, VideoClip};
use crate::error::{Error, Result};
use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Blur,
    Jpeg,
    Resize,
    Rotate,
    Mixed,
}

impl AttackKind {
    pub const SINGLE: [AttackKind; 4] = [
        AttackKind::Blur,
        AttackKind::Jpeg,
        AttackKind::Resize,
        AttackKind::Rotate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Blur => "blur",
            AttackKind::Jpeg => "jpeg",
            AttackKind::Resize => "resize",
            AttackKind::Rotate => "rotate",
            AttackKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "none" => AttackKind::None,
            "blur" => AttackKind::Blur,
            "jpeg" => AttackKind::Jpeg,
            "resize" => AttackKind::Resize,
            "rotate" => AttackKind::Rotate,
            "mixed" => AttackKind::Mixed,
            other => return Err(Error::UnsupportedAttack(other.to_string())),
        })
    }
}

/// Default strengths used when an attack is named by kind alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    pub blur_sigma: f64,
    pub jpeg_quality: u8,
    pub resize_factor: f64,
    pub rotate_degrees: i32,
    pub mixed_seed: u64,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            blur_sigma: 3.0,
            jpeg_quality: 70,
            resize_factor: 0.7,
            rotate_degrees: 90,
            mixed_seed: 0,
        }
    }
}

/// A fully parameterized attack; each variant carries only its own knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackSpec {
    None,
    Blur { sigma: f64 },
    Jpeg { quality: u8 },
    Resize { factor: f64 },
    Rotate { degrees: i32 },
    Mixed { params: AttackParams, seed: u64 },
}

impl AttackSpec {
    pub fn blur(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidAttack(format!("blur sigma {sigma} must be > 0")));
        }
        Ok(Self::Blur { sigma })
    }

    pub fn jpeg(quality: u8) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(Error::InvalidAttack(format!("jpeg quality {quality} outside [1,100]")));
        }
        Ok(Self::Jpeg { quality })
    }

    pub fn resize(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::InvalidAttack(format!("resize factor {factor} outside (0,1]")));
        }
        Ok(Self::Resize { factor })
    }

    pub fn rotate(degrees: i32) -> Result<Self> {
        if degrees % 90 != 0 {
            return Err(Error::InvalidAttack(format!(
                "rotation {degrees} is not a multiple of 90"
            )));
        }
        Ok(Self::Rotate { degrees })
    }

    pub fn mixed(params: AttackParams, seed: u64) -> Result<Self> {
        // validate the component attacks up front
        Self::blur(params.blur_sigma)?;
        Self::jpeg(params.jpeg_quality)?;
        Self::resize(params.resize_factor)?;
        Self::rotate(params.rotate_degrees)?;
        Ok(Self::Mixed { params, seed })
    }

    pub fn from_kind(kind: AttackKind, params: &AttackParams) -> Result<Self> {
        match kind {
            AttackKind::None => Ok(Self::None),
            AttackKind::Blur => Self::blur(params.blur_sigma),
            AttackKind::Jpeg => Self::jpeg(params.jpeg_quality),
            AttackKind::Resize => Self::resize(params.resize_factor),
            AttackKind::Rotate => Self::rotate(params.rotate_degrees),
            AttackKind::Mixed => Self::mixed(params.clone(), params.mixed_seed),
        }
    }

    pub fn kind(&self) -> AttackKind {
        match self {
            Self::None => AttackKind::None,
            Self::Blur { .. } => AttackKind::Blur,
            Self::Jpeg { .. } => AttackKind::Jpeg,
            Self::Resize { .. } => AttackKind::Resize,
            Self::Rotate { .. } => AttackKind::Rotate,
            Self::Mixed { .. } => AttackKind::Mixed,
        }
    }

    /// The single attack a mixed spec applies to `clip`. The draw depends
    /// only on the seed and the clip's `source_id`, not on evaluation order.
    pub fn resolve_for(&self, clip: &VideoClip) -> Result<AttackSpec> {
        match self {
            Self::Mixed { params, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(*seed, &clip.source_id));
                let kind = AttackKind::SINGLE[rng.random_range(0..AttackKind::SINGLE.len())];
                Self::from_kind(kind, params)
            }
            other => Ok(other.clone()),
        }
    }
}

/// Applies `spec` to every frame of `clip`; label, tags, and frame count are kept.
pub fn apply_attack(clip: &VideoClip, spec: &AttackSpec) -> Result<VideoClip> {
    let resolved = spec.resolve_for(clip)?;
    match resolved {
        AttackSpec::None => Ok(clip.clone()),
        AttackSpec::Blur { sigma } => {
            let kernel = gaussian_kernel(sigma);
            clip.map_frames(|f| Ok(gaussian_blur(f, &kernel)))
        }
        AttackSpec::Jpeg { quality } => clip.map_frames(|f| jpeg_roundtrip(f, quality)),
        AttackSpec::Resize { factor } => clip.map_frames(|f| {
            let h = scaled_side(f.height(), factor);
            let w = scaled_side(f.width(), factor);
            Ok(resize_bilinear(f, h, w))
        }),
        AttackSpec::Rotate { degrees } => clip.map_frames(|f| Ok(rotate90(f, degrees))),
        AttackSpec::Mixed { .. } => unreachable!("mixed resolves to a single attack"),
    }
}

/// `floor(side · factor)`, with a small tolerance so that e.g. `30 · 0.7`
/// lands on 21 despite binary rounding.
pub fn scaled_side(side: usize, factor: f64) -> usize {
    ((side as f64 * factor + 1e-9).floor() as usize).max(1)
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable blur with edge replication.
pub fn gaussian_blur(frame: &Frame, kernel: &[f64]) -> Frame {
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    let r = (kernel.len() / 2) as i64;
    let mut out = Vec::with_capacity(c * h * w);
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = frame.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in kernel.iter().enumerate() {
                    let xx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += t * plane[y * w + xx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in kernel.iter().enumerate() {
                    let yy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += t * tmp[yy * w + x];
                }
                out.push(acc as f32);
            }
        }
    }
    Frame::from_clamped(c, h, w, out)
}

pub(crate) fn to_bytes(frame: &Frame) -> Vec<u8> {
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push((frame.get(ch, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    bytes
}

pub(crate) fn from_bytes(bytes: &[u8], c: usize, h: usize, w: usize) -> Frame {
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = bytes[(y * w + x) * c + ch] as f32 / 255.0;
            }
        }
    }
    Frame::from_clamped(c, h, w, data)
}

fn color_type(channels: usize) -> Result<ExtendedColorType> {
    match channels {
        1 => Ok(ExtendedColorType::L8),
        3 => Ok(ExtendedColorType::Rgb8),
        n => Err(Error::InvalidAttack(format!(
            "codec supports 1 or 3 channels, frame has {n}"
        ))),
    }
}

/// Quantizes to 8 bits, encodes as baseline JPEG at `quality`, decodes.
pub fn jpeg_roundtrip(frame: &Frame, quality: u8) -> Result<Frame> {
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(&to_bytes(frame), w as u32, h as u32, color_type(c)?)?;
    let decoded = image::load(Cursor::new(&buf), ImageFormat::Jpeg)?;
    let bytes = if c == 1 {
        decoded.to_luma8().into_raw()
    } else {
        decoded.to_rgb8().into_raw()
    };
    Ok(from_bytes(&bytes, c, h, w))
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(frame: &Frame, out_h: usize, out_w: usize) -> Frame {
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    if (out_h, out_w) == (h, w) {
        return frame.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = frame.plane(ch);
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - dx) + p(y0, x1) * dx;
                let bottom = p(y1, x0) * (1.0 - dx) + p(y1, x1) * dx;
                out.push((top * (1.0 - dy) + bottom * dy) as f32);
            }
        }
    }
    Frame::from_clamped(c, out_h, out_w, out)
}

/// Counter-clockwise rotation by a multiple of 90 degrees.
pub fn rotate90(frame: &Frame, degrees: i32) -> Frame {
    let turns = degrees.rem_euclid(360) / 90;
    let mut f = frame.clone();
    for _ in 0..turns {
        let (c, h, w) = (f.channels(), f.height(), f.width());
        let mut data = vec![0.0f32; c * h * w];
        // new shape [c, w, h]; new(y, x) = old(x, w-1-y)
        for ch in 0..c {
            for y in 0..w {
                for x in 0..h {
                    data[(ch * w + y) * h + x] = f.get(ch, x, w - 1 - y);
                }
            }
        }
        f = Frame::from_clamped(c, w, h, data);
    }
    f
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::data::video::Label;
    use proptest::prelude::*;

    fn frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(3, h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn four_quarter_turns_restore_any_frame(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let f = frame(h, w, seed);
            let mut r = f.clone();
            for _ in 0..4 {
                r = rotate90(&r, 90);
            }
            prop_assert_eq!(r, f);
        }

        #[test]
        fn opposite_turns_cancel(h in 1usize..10, w in 1usize..10, k in -4i32..=4, seed in any::<u64>()) {
            let f = frame(h, w, seed);
            prop_assert_eq!(rotate90(&rotate90(&f, 90 * k), -90 * k), f);
        }

        #[test]
        fn blur_keeps_any_constant(v in 0u8..=255, side in 1usize..20, sigma in 0.3f64..4.0) {
            let f = Frame::constant(3, side, side, v as f32 / 255.0);
            prop_assert_eq!(gaussian_blur(&f, &gaussian_kernel(sigma)), f);
        }

        #[test]
        fn resize_side_is_floor_of_tenths(side in 1usize..400, tenths in 1usize..=10) {
            prop_assert_eq!(scaled_side(side, tenths as f64 / 10.0), (side * tenths / 10).max(1));
        }

        #[test]
        fn mixed_draw_depends_only_on_seed_and_id(seed in any::<u64>(), id in "[a-z0-9_/]{1,12}", other in any::<u64>()) {
            let spec = AttackSpec::mixed(AttackParams::default(), seed).unwrap();
            let a = VideoClip::new(vec![frame(4, 4, other)], Label::Fake, "g", id.clone()).unwrap();
            let b = VideoClip::new(vec![frame(4, 4, other ^ 1)], Label::Real, "h", id).unwrap();
            prop_assert_eq!(spec.resolve_for(&a).unwrap(), spec.resolve_for(&b).unwrap());
        }
    }
}
