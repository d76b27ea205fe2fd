use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One image, channel-major `[C, H, W]`, every scalar in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidClip("empty frame dimensions".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidClip(format!(
                "frame {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidClip(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a frame from arbitrary values, clamping into `[0, 1]`.
    pub fn from_clamped(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data: data
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        }
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::from_clamped(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn crop(&self, top: usize, left: usize, side: usize) -> Frame {
        debug_assert!(top + side <= self.height && left + side <= self.width);
        let mut data = Vec::with_capacity(self.channels * side * side);
        for c in 0..self.channels {
            for y in top..top + side {
                let start = (c * self.height + y) * self.width + left;
                data.extend_from_slice(&self.data[start..start + side]);
            }
        }
        Frame {
            channels: self.channels,
            height: side,
            width: side,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::Manifest(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).map_err(serde::de::Error::custom)
    }
}

/// A sequence of same-sized frames with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    pub label: Label,
    pub generator_tag: String,
    pub source_id: String,
}

impl VideoClip {
    pub fn new(
        frames: Vec<Frame>,
        label: Label,
        generator_tag: impl Into<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidClip("clip has no frames".into()))?;
        let dims = (first.channels, first.height, first.width);
        if frames.iter().any(|f| (f.channels, f.height, f.width) != dims) {
            return Err(Error::InvalidClip("frames differ in shape".into()));
        }
        Ok(Self {
            frames,
            label,
            generator_tag: generator_tag.into(),
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(C, H, W)` shared by every frame.
    pub fn dims(&self) -> (usize, usize, usize) {
        let f = &self.frames[0];
        (f.channels, f.height, f.width)
    }

    /// Same provenance, new frames (shape checked).
    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Self> {
        Self::new(frames, self.label, self.generator_tag.clone(), self.source_id.clone())
    }

    pub fn map_frames(&self, f: impl Fn(&Frame) -> Result<Frame>) -> Result<Self> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        self.with_frames(frames)
    }
}

/// Window placement drawn by [`sample_window`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPlacement {
    pub start: usize,
    pub top: usize,
    pub left: usize,
}

/// Draws the window start and the square crop origin, in that order.
pub fn draw_window(
    video_len: usize,
    height: usize,
    width: usize,
    n: usize,
    crop: usize,
    seed: u64,
) -> Result<WindowPlacement> {
    if video_len < n {
        return Err(Error::TooFewFrames {
            have: video_len,
            need: n,
        });
    }
    if crop == 0 || crop > height.min(width) {
        return Err(Error::CropTooLarge { crop, height, width });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(WindowPlacement {
        start: rng.random_range(0..=video_len - n),
        top: rng.random_range(0..=height - crop),
        left: rng.random_range(0..=width - crop),
    })
}

/// `n` consecutive frames sharing one random `crop × crop` window.
pub fn sample_window(video: &VideoClip, n: usize, crop: usize, seed: u64) -> Result<VideoClip> {
    let (_, h, w) = video.dims();
    let p = draw_window(video.len(), h, w, n, crop, seed)?;
    let frames = video.frames[p.start..p.start + n]
        .iter()
        .map(|f| f.crop(p.top, p.left, crop))
        .collect();
    video.with_frames(frames)
}

/// Index of the frame handed to the multimodal branch.
pub fn key_frame_index(n: usize) -> usize {
    n / 2
}

/// The middle frame of the clip.
pub fn select_key_frame(clip: &VideoClip) -> &Frame {
    &clip.frames[key_frame_index(clip.len())]
}
