//! Spatio-temporal branch: per-frame conv encoder, patch projection,
//! factorized positional embeddings, and frame-centric transformer blocks.
//!
//! Each block runs two attentions. The first lets every patch token attend
//! to every patch token of every frame. The second lets each frame's
//! frame-centric (FC) token attend to itself and the patch tokens of its own
//! frame only. The final FC tokens, one per frame, form the branch output.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mask, Var};
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

const GROUP: ParamGroup = ParamGroup::StBranch;

/// Scope of the patch-to-patch attention. `Joint` is the model; the other
/// two exist for equivariance and isolation harnesses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchAttention {
    #[default]
    Joint,
    PerFrame,
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StConfig {
    pub n_frames: usize,
    pub input_side: usize,
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub patch_side: usize,
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_ratio: usize,
    pub patch_attention: PatchAttention,
}

impl Default for StConfig {
    fn default() -> Self {
        Self {
            n_frames: 4,
            input_side: 32,
            in_channels: 3,
            conv_channels: vec![16, 32],
            conv_kernel: 3,
            conv_stride: 2,
            patch_side: 4,
            token_dim: 64,
            n_blocks: 2,
            n_heads: 4,
            ffn_ratio: 4,
            patch_attention: PatchAttention::Joint,
        }
    }
}

impl StConfig {
    /// Frame count and token width used at full scale (12 blocks of width 768
    /// over 10 frames); the conv stem stays small.
    pub fn full_scale() -> Self {
        Self {
            n_frames: 10,
            token_dim: 768,
            n_blocks: 12,
            n_heads: 12,
            ..Self::default()
        }
    }

    fn conv_out(&self, side: usize) -> usize {
        let pad = self.conv_kernel / 2;
        (side + 2 * pad - self.conv_kernel) / self.conv_stride + 1
    }

    /// Feature-map sides after each conv layer.
    pub fn feature_sides(&self) -> Vec<usize> {
        let mut s = self.input_side;
        self.conv_channels
            .iter()
            .map(|_| {
                s = self.conv_out(s);
                s
            })
            .collect()
    }

    pub fn feature_side(&self) -> usize {
        self.feature_sides().last().copied().unwrap_or(self.input_side)
    }

    pub fn feature_channels(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(self.in_channels)
    }

    pub fn grid_side(&self) -> usize {
        self.feature_side() / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side * self.feature_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.n_blocks == 0 || self.conv_kernel == 0 || self.conv_stride == 0 {
            return Err(Error::Config(
                "st: frame, block, kernel, stride counts must be >= 1".into(),
            ));
        }
        if self.n_heads == 0 || !self.token_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "st: token_dim {} not divisible by n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        let fs = self.feature_side();
        if self.patch_side == 0 || !fs.is_multiple_of(self.patch_side) {
            return Err(Error::Shape(format!(
                "st: feature map side {fs} not divisible into patches of side {}",
                self.patch_side
            )));
        }
        Ok(())
    }
}

/// Channels-last feature maps `[N·H·W, C]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMaps {
    pub var: Var,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMaps {
    /// Copies the maps out as an `[N, C, H, W]` tensor.
    pub fn to_nchw(&self, g: &Graph) -> Tensor {
        let v = g.value(self.var);
        let (n, h, w, c) = (self.frames, self.height, self.width, self.channels);
        let mut out = vec![0.0; n * c * h * w];
        for f in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[((f * c + ch) * h + y) * w + x] = v.data()[((f * h + y) * w + x) * c + ch];
                    }
                }
            }
        }
        Tensor::new(&[n, c, h, w], out).unwrap()
    }
}

/// Channels-last `[N·H·W, C]` copy of a clip.
pub fn clip_tensor(clip: &VideoClip) -> Tensor {
    let (c, h, w) = clip.dims();
    let mut data = Vec::with_capacity(clip.len() * c * h * w);
    for f in clip.frames() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f.get(ch, y, x) as f64);
                }
            }
        }
    }
    Tensor::new(&[clip.len() * h * w, c], data).unwrap()
}

fn im2col_index(n: usize, h: usize, w: usize, c: usize, k: usize, stride: usize) -> (Vec<Option<usize>>, usize, usize) {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut idx = Vec::with_capacity(n * oh * ow * k * k * c);
    for f in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ch in 0..c {
                            idx.push(inside.then(|| ((f * h + iy as usize) * w + ix as usize) * c + ch));
                        }
                    }
                }
            }
        }
    }
    (idx, oh, ow)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    layers: Vec<Linear>,
    kernel: usize,
    stride: usize,
    in_channels: usize,
}

impl ConvEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &StConfig, rng: &mut R) -> Self {
        let mut c_in = cfg.in_channels;
        let k = cfg.conv_kernel;
        let layers = cfg
            .conv_channels
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let l = Linear::new(store, &format!("st.conv{i}"), c_in * k * k, c_out, true, GROUP, rng);
                c_in = c_out;
                l
            })
            .collect();
        Self {
            layers,
            kernel: k,
            stride: cfg.conv_stride,
            in_channels: cfg.in_channels,
        }
    }

    /// Each frame is convolved independently; GELU follows every layer.
    pub fn forward(&self, g: &Graph, clip: &VideoClip) -> Result<FeatureMaps> {
        let (c, h, w) = clip.dims();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv encoder expects {} channels, clip has {c}",
                self.in_channels
            )));
        }
        let n = clip.len();
        let mut x = g.constant(clip_tensor(clip));
        let (mut ch, mut hh, mut ww) = (c, h, w);
        for layer in &self.layers {
            let (idx, oh, ow) = im2col_index(n, hh, ww, ch, self.kernel, self.stride);
            let cols = g.gather(x, Arc::new(idx), &[n * oh * ow, ch * self.kernel * self.kernel]);
            let y = layer.forward(g, cols);
            x = g.gelu(y);
            ch = layer.out_dim;
            hh = oh;
            ww = ow;
        }
        Ok(FeatureMaps {
            var: x,
            frames: n,
            height: hh,
            width: ww,
            channels: ch,
        })
    }
}

/// Flattens each `p × p × C` patch (row-major over the grid, then `dy, dx, c`)
/// and multiplies by `W_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProjection {
    pub weight: ParamId,
    pub patch_side: usize,
    pub patch_len: usize,
    pub token_dim: usize,
}

impl PatchProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &StConfig, rng: &mut R) -> Self {
        let patch_len = cfg.patch_len();
        Self {
            weight: store.add(
                "st.patch_proj.weight",
                GROUP,
                crate::nn::lecun(patch_len, cfg.token_dim, rng),
            ),
            patch_side: cfg.patch_side,
            patch_len,
            token_dim: cfg.token_dim,
        }
    }

    pub fn patchify(&self, g: &Graph, fm: &FeatureMaps) -> Result<Var> {
        let p = self.patch_side;
        if p == 0 || !fm.height.is_multiple_of(p) || !fm.width.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "feature map {}x{} not divisible into {p}x{p} patches",
                fm.height, fm.width
            )));
        }
        if p * p * fm.channels != self.patch_len {
            return Err(Error::Shape(format!(
                "patch length {} does not match projection input {}",
                p * p * fm.channels,
                self.patch_len
            )));
        }
        let (gh, gw) = (fm.height / p, fm.width / p);
        let (n, h, w, c) = (fm.frames, fm.height, fm.width, fm.channels);
        let mut idx = Vec::with_capacity(n * gh * gw * self.patch_len);
        for f in 0..n {
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                let y = py * p + dy;
                                let x = px * p + dx;
                                idx.push(Some(((f * h + y) * w + x) * c + ch));
                            }
                        }
                    }
                }
            }
        }
        Ok(g.gather(fm.var, Arc::new(idx), &[n * gh * gw, self.patch_len]))
    }

    /// P-tokens `[N·R, M]`, frame-major.
    pub fn forward(&self, g: &Graph, fm: &FeatureMaps) -> Result<Var> {
        let patches = self.patchify(g, fm)?;
        let w = g.param(self.weight);
        Ok(g.matmul(patches, w))
    }
}

/// Separate spatial `[R, M]` and temporal `[N, M]` tables, summed per token.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding {
    pub spatial: ParamId,
    pub temporal: ParamId,
    n_frames: usize,
    n_patches: usize,
}

impl PositionalEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &StConfig, rng: &mut R) -> Self {
        let r = cfg.n_patches();
        Self {
            spatial: store.add("st.pos.spatial", GROUP, Tensor::randn(&[r, cfg.token_dim], 0.02, rng)),
            temporal: store.add(
                "st.pos.temporal",
                GROUP,
                Tensor::randn(&[cfg.n_frames, cfg.token_dim], 0.02, rng),
            ),
            n_frames: cfg.n_frames,
            n_patches: r,
        }
    }

    pub fn forward(&self, g: &Graph, tokens: Var) -> Result<Var> {
        let rows = g.shape(tokens)[0];
        let (n, r) = (self.n_frames, self.n_patches);
        if rows != n * r {
            return Err(Error::Shape(format!(
                "positional tables cover {n} frames x {r} patches, got {rows} tokens"
            )));
        }
        let sp = g.param(self.spatial);
        let tp = g.param(self.temporal);
        let sp_idx: Vec<usize> = (0..n * r).map(|k| k % r).collect();
        let tp_idx: Vec<usize> = (0..n * r).map(|k| k / r).collect();
        let s = g.gather_rows(sp, Arc::new(sp_idx));
        let t = g.gather_rows(tp, Arc::new(tp_idx));
        let x = g.add(tokens, s);
        Ok(g.add(x, t))
    }
}

pub struct FcBlockOutput {
    pub p_tokens: Var,
    pub fc_tokens: Var,
    /// Per-head patch attention weights `[N·R, N·R]` (empty when disabled).
    pub patch_weights: Vec<Var>,
    /// Per-head FC attention weights `[N, N + N·R]`; column `i` is FC-token
    /// `i`, columns `N + i·R ..` are the P-tokens of frame `i`.
    pub frame_weights: Vec<Var>,
}

/// Pre-norm transformer block with the two frame-centric attentions.
#[derive(Clone, Debug, PartialEq)]
pub struct FcBlock {
    pub norm_p1: LayerNorm,
    pub patch_attn: MultiHeadAttention,
    pub norm_p2: LayerNorm,
    pub ffn_p: FeedForward,
    pub norm_f1: LayerNorm,
    pub frame_attn: MultiHeadAttention,
    pub norm_f2: LayerNorm,
    pub ffn_f: FeedForward,
    n_frames: usize,
    n_patches: usize,
    mode: PatchAttention,
}

/// Mask for the frame-centric attention: FC-token `i` sees itself and the
/// P-tokens of frame `i`.
pub fn frame_mask(n: usize, r: usize) -> Mask {
    Mask::from_fn(n, n + n * r, |i, j| j == i || (j >= n && (j - n) / r == i))
}

fn per_frame_patch_mask(n: usize, r: usize) -> Mask {
    Mask::from_fn(n * r, n * r, |i, j| i / r == j / r)
}

impl FcBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &StConfig, rng: &mut R) -> Result<Self> {
        let m = cfg.token_dim;
        Ok(Self {
            norm_p1: LayerNorm::new(store, &format!("{name}.norm_p1"), m, GROUP),
            patch_attn: MultiHeadAttention::new(store, &format!("{name}.patch_attn"), m, cfg.n_heads, GROUP, rng)?,
            norm_p2: LayerNorm::new(store, &format!("{name}.norm_p2"), m, GROUP),
            ffn_p: FeedForward::new(store, &format!("{name}.ffn_p"), m, cfg.ffn_ratio, GROUP, rng),
            norm_f1: LayerNorm::new(store, &format!("{name}.norm_f1"), m, GROUP),
            frame_attn: MultiHeadAttention::new(store, &format!("{name}.frame_attn"), m, cfg.n_heads, GROUP, rng)?,
            norm_f2: LayerNorm::new(store, &format!("{name}.norm_f2"), m, GROUP),
            ffn_f: FeedForward::new(store, &format!("{name}.ffn_f"), m, cfg.ffn_ratio, GROUP, rng),
            n_frames: cfg.n_frames,
            n_patches: cfg.n_patches(),
            mode: cfg.patch_attention,
        })
    }

    pub fn set_patch_attention(&mut self, mode: PatchAttention) {
        self.mode = mode;
    }

    /// Residual patch-to-patch attention: `P + Attn(LN(P))`.
    pub fn patch_attention(&self, g: &Graph, p: Var) -> Result<(Var, Vec<Var>)> {
        let (n, r) = (self.n_frames, self.n_patches);
        let mask = match self.mode {
            PatchAttention::Disabled => return Ok((p, Vec::new())),
            PatchAttention::Joint => None,
            PatchAttention::PerFrame => Some(Arc::new(per_frame_patch_mask(n, r))),
        };
        let x = self.norm_p1.forward(g, p);
        let a = self.patch_attn.forward(g, x, x, mask, "patch attention")?;
        Ok((g.add(p, a.output), a.weights))
    }

    /// Residual frame-centric attention: FC-token `i` queries
    /// `LN([FC; P])` restricted to its own frame.
    pub fn frame_attention(&self, g: &Graph, p: Var, fc: Var) -> Result<(Var, Vec<Var>)> {
        let (n, r) = (self.n_frames, self.n_patches);
        let both = g.concat_rows(&[fc, p]);
        let normed = self.norm_f1.forward(g, both);
        let queries = g.slice_rows(normed, 0, n);
        let mask = Arc::new(frame_mask(n, r));
        let a = self
            .frame_attn
            .forward(g, queries, normed, Some(mask), "frame attention")?;
        Ok((g.add(fc, a.output), a.weights))
    }

    pub fn forward(&self, g: &Graph, p: Var, fc: Var) -> Result<FcBlockOutput> {
        let (n, r) = (self.n_frames, self.n_patches);
        let ps = g.shape(p);
        let fs = g.shape(fc);
        if ps[0] != n * r || fs[0] != n {
            return Err(Error::Shape(format!(
                "fc block expects [{}, M] P-tokens and [{n}, M] FC-tokens, got {ps:?} and {fs:?}",
                n * r
            )));
        }
        let (p1, patch_weights) = self.patch_attention(g, p)?;
        let h = self.norm_p2.forward(g, p1);
        let h = self.ffn_p.forward(g, h);
        let p2 = g.add(p1, h);

        let (f1, frame_weights) = self.frame_attention(g, p2, fc)?;
        let h = self.norm_f2.forward(g, f1);
        let h = self.ffn_f.forward(g, h);
        let f2 = g.add(f1, h);
        Ok(FcBlockOutput {
            p_tokens: p2,
            fc_tokens: f2,
            patch_weights,
            frame_weights,
        })
    }
}

pub struct StOutput {
    /// `[N, M]`: row `i` is the final FC-token of frame `i`.
    pub h_st: Var,
    pub blocks: Vec<FcBlockOutput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StBranch {
    pub cfg: StConfig,
    pub conv: ConvEncoder,
    pub patch_proj: PatchProjection,
    pub pos: PositionalEmbedding,
    /// Shared FC-token initialization `[1, M]`.
    pub fc_init: ParamId,
    pub blocks: Vec<FcBlock>,
}

impl StBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &StConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let conv = ConvEncoder::new(store, cfg, rng);
        let patch_proj = PatchProjection::new(store, cfg, rng);
        let pos = PositionalEmbedding::new(store, cfg, rng);
        let fc_init = store.add("st.fc_init", GROUP, Tensor::randn(&[1, cfg.token_dim], 0.02, rng));
        let blocks = (0..cfg.n_blocks)
            .map(|i| FcBlock::new(store, &format!("st.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            conv,
            patch_proj,
            pos,
            fc_init,
            blocks,
        })
    }

    pub fn set_patch_attention(&mut self, mode: PatchAttention) {
        self.cfg.patch_attention = mode;
        for b in &mut self.blocks {
            b.set_patch_attention(mode);
        }
    }

    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let (c, h, w) = clip.dims();
        let cfg = &self.cfg;
        if clip.len() != cfg.n_frames || c != cfg.in_channels || h != cfg.input_side || w != cfg.input_side {
            return Err(Error::Shape(format!(
                "st branch expects {}x{}x{}x{} clips, got {}x{c}x{h}x{w}",
                cfg.n_frames,
                cfg.in_channels,
                cfg.input_side,
                cfg.input_side,
                clip.len()
            )));
        }
        Ok(())
    }

    pub fn conv_encode(&self, g: &Graph, clip: &VideoClip) -> Result<FeatureMaps> {
        self.check_clip(clip)?;
        self.conv.forward(g, clip)
    }

    /// FC-tokens before the first block: the shared vector on every frame.
    pub fn initial_fc_tokens(&self, g: &Graph) -> Var {
        let init = g.param(self.fc_init);
        g.gather_rows(init, Arc::new(vec![0; self.cfg.n_frames]))
    }

    pub fn forward(&self, g: &Graph, clip: &VideoClip) -> Result<StOutput> {
        let fm = self.conv_encode(g, clip)?;
        let p = self.patch_proj.forward(g, &fm)?;
        let mut p = self.pos.forward(g, p)?;
        let mut fc = self.initial_fc_tokens(g);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let out = b.forward(g, p, fc)?;
            p = out.p_tokens;
            fc = out.fc_tokens;
            traces.push(out);
        }
        Ok(StOutput {
            h_st: fc,
            blocks: traces,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Frame, Label};
    use crate::nn::TrainableSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(cfg: &StConfig, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.input_side;
        let frames = (0..cfg.n_frames)
            .map(|_| {
                let data = (0..cfg.in_channels * s * s).map(|_| rng.random::<f32>()).collect();
                Frame::new(cfg.in_channels, s, s, data).unwrap()
            })
            .collect();
        VideoClip::new(frames, Label::Real, "real", "x").unwrap()
    }

    fn build(cfg: &StConfig) -> (ParamStore, StBranch) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let st = StBranch::new(&mut store, cfg, &mut rng).unwrap();
        (store, st)
    }

    #[test]
    fn conv_output_shape_matches_stride_arithmetic() {
        // 32 -> (32+2-3)/2+1 = 16 -> 8
        let cfg = StConfig {
            conv_channels: vec![8, 16],
            ..StConfig::default()
        };
        assert_eq!(cfg.feature_sides(), vec![16, 8]);
        let (store, st) = build(&cfg);
        let g = Graph::inference(&store);
        let fm = st.conv_encode(&g, &random_clip(&cfg, 1)).unwrap();
        assert_eq!(fm.to_nchw(&g).shape(), &[4, 16, 8, 8]);

        let cfg = StConfig::default();
        let (store, st) = build(&cfg);
        let g = Graph::inference(&store);
        let fm = st.conv_encode(&g, &random_clip(&cfg, 1)).unwrap();
        assert_eq!(fm.to_nchw(&g).shape(), &[4, 32, 8, 8]);
    }

    #[test]
    fn zero_clip_gives_bias_response_on_every_frame() {
        let cfg = StConfig::default();
        let (store, st) = build(&cfg);
        let zero = VideoClip::new(vec![Frame::constant(3, 32, 32, 0.0); 4], Label::Real, "r", "z").unwrap();
        let g = Graph::inference(&store);
        let fm = st.conv_encode(&g, &zero).unwrap().to_nchw(&g);
        let per = fm.len() / 4;
        for f in 1..4 {
            assert_eq!(&fm.data()[..per], &fm.data()[f * per..(f + 1) * per]);
        }
        // first layer alone: gelu(bias) everywhere
        let g1 = Graph::inference(&store);
        let one = ConvEncoder {
            layers: st.conv.layers[..1].to_vec(),
            ..st.conv.clone()
        };
        let fm1 = one.forward(&g1, &zero).unwrap();
        let bias = store.get(st.conv.layers[0].bias.unwrap());
        let v = g1.value(fm1.var);
        for row in 0..v.rows() {
            for (a, b) in v.row(row).iter().zip(bias.data()) {
                assert_eq!(*a, crate::autograd::gelu(*b));
            }
        }
    }

    #[test]
    fn frames_are_encoded_independently() {
        let cfg = StConfig::default();
        let (store, st) = build(&cfg);
        let a = random_clip(&cfg, 2);
        let b = random_clip(&cfg, 3);
        let mut mixed = b.frames().to_vec();
        mixed[2] = a.frames()[2].clone();
        let b = b.with_frames(mixed).unwrap();
        let g = Graph::inference(&store);
        let fa = st.conv_encode(&g, &a).unwrap().to_nchw(&g);
        let fb = st.conv_encode(&g, &b).unwrap().to_nchw(&g);
        let per = fa.len() / 4;
        assert_eq!(&fa.data()[2 * per..3 * per], &fb.data()[2 * per..3 * per]);
        assert_ne!(&fa.data()[..per], &fb.data()[..per]);
    }

    #[test]
    fn patch_count_and_identity_projection() {
        let cfg = StConfig {
            conv_channels: vec![2],
            input_side: 16,
            patch_side: 4,
            token_dim: 32,
            n_heads: 4,
            ..StConfig::default()
        };
        // 16 -> 8, R = 4, patch length 4*4*2 = 32 = M
        assert_eq!(cfg.n_patches(), 4);
        let (mut store, st) = build(&cfg);
        store.set(st.patch_proj.weight, Tensor::identity(32));
        let clip = random_clip(&cfg, 4);
        let g = Graph::inference(&store);
        let fm = st.conv_encode(&g, &clip).unwrap();
        let tokens = st.patch_proj.forward(&g, &fm).unwrap();
        let flat = st.patch_proj.patchify(&g, &fm).unwrap();
        assert_eq!(*g.value(tokens), *g.value(flat));
        // token (frame 1, patch 3) starts at feature pixel (4, 4) of frame 1
        let fmv = g.value(fm.var);
        let tv = g.value(tokens);
        let row = tv.row(4 + 3);
        let pixel = ((8 + 4) * 8 + 4) * 2;
        assert_eq!(row[0], fmv.data()[pixel]);
        assert_eq!(row[1], fmv.data()[pixel + 1]);
    }

    #[test]
    fn indivisible_patches_are_rejected() {
        let cfg = StConfig {
            patch_side: 3,
            ..StConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn positional_embedding_structure() {
        let cfg = StConfig::default();
        let (mut store, st) = build(&cfg);
        let (n, r, m) = (cfg.n_frames, cfg.n_patches(), cfg.token_dim);
        let g = Graph::inference(&store);
        let zeros = g.constant(Tensor::zeros(&[n * r, m]));
        let out = st.pos.forward(&g, zeros).unwrap();
        let sp = store.get(st.pos.spatial).clone();
        let tp = store.get(st.pos.temporal).clone();
        let ov = g.value(out).clone();
        for i in 0..n {
            for j in 0..r {
                for d in 0..m {
                    assert_eq!(ov.row(i * r + j)[d], sp.row(j)[d] + tp.row(i)[d]);
                }
            }
        }
        // differences between frames depend only on the temporal table
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = Tensor::randn(&[n * r, m], 1.0, &mut rng);
        let g = Graph::inference(&store);
        let tv = g.constant(tokens);
        let out = g.value(st.pos.forward(&g, tv).unwrap()).clone();
        let tok = g.value(tv).clone();
        for j in 0..r {
            for d in 0..m {
                let lhs = (out.row(2 * r + j)[d] - tok.row(2 * r + j)[d]) - (out.row(j)[d] - tok.row(j)[d]);
                assert!((lhs - (tp.row(2)[d] - tp.row(0)[d])).abs() < 1e-12);
            }
        }
        // zero tables leave tokens unchanged
        store.set(st.pos.spatial, Tensor::zeros(&[r, m]));
        store.set(st.pos.temporal, Tensor::zeros(&[n, m]));
        let g = Graph::inference(&store);
        let tv = g.constant(tok.clone());
        assert_eq!(*g.value(st.pos.forward(&g, tv).unwrap()), tok);
    }

    #[test]
    fn fc_tokens_start_equal_and_output_has_frame_rows() {
        let cfg = StConfig::default();
        let (store, st) = build(&cfg);
        let g = Graph::inference(&store);
        let init = g.value(st.initial_fc_tokens(&g)).clone();
        for i in 1..cfg.n_frames {
            assert_eq!(init.row(0), init.row(i));
        }
        let out = st.forward(&g, &random_clip(&cfg, 6)).unwrap();
        assert_eq!(g.shape(out.h_st), vec![cfg.n_frames, cfg.token_dim]);
    }

    #[test]
    fn attention_rows_are_distributions_and_frame_scoped() {
        let cfg = StConfig::default();
        let (store, st) = build(&cfg);
        let g = Graph::inference(&store);
        let out = st.forward(&g, &random_clip(&cfg, 7)).unwrap();
        let (n, r) = (cfg.n_frames, cfg.n_patches());
        let mask = frame_mask(n, r);
        for b in &out.blocks {
            for w in b.patch_weights.iter().chain(&b.frame_weights) {
                let v = g.value(*w);
                for i in 0..v.rows() {
                    let row = v.row(i);
                    assert!(row.iter().all(|&x| x >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            for w in &b.frame_weights {
                let v = g.value(*w);
                for i in 0..n {
                    for j in 0..n + n * r {
                        if !mask.allows(i, j) {
                            assert_eq!(v.row(i)[j], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let cfg = StConfig::default();
        let (store, st) = build(&cfg);
        let clip = random_clip(&cfg, 8);
        let a = {
            let g = Graph::inference(&store);
            let o = st.forward(&g, &clip).unwrap();
            let v = g.value(o.h_st).clone();
            v
        };
        let b = {
            let g = Graph::new(&store, TrainableSet::all());
            let o = st.forward(&g, &clip).unwrap();
            let v = g.value(o.h_st).clone();
            v
        };
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn wrong_clip_shape_is_rejected() {
        let cfg = StConfig::default();
        let (store, st) = build(&cfg);
        let g = Graph::inference(&store);
        let short = VideoClip::new(vec![Frame::constant(3, 32, 32, 0.1); 3], Label::Real, "r", "s").unwrap();
        assert!(matches!(st.forward(&g, &short), Err(Error::Shape(_))));
    }
}
