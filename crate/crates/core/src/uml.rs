//! Fusion of the two branches: reasoning-guided augmentation of the visual
//! tokens, contrastive alignment of class and reasoning embeddings,
//! visual-refined fusion with the spatio-temporal tokens, and the
//! classification head. Also the activation-map analysis.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mask, Tape, Var};
use crate::error::{Error, IoContext, Result};
use crate::nn::{AttentionOutput, Graph, LayerNorm, Linear, MultiHeadAttention, ParamGroup, ParamStore};
use crate::tensor::{cosine, l2_norm, Tensor};

const GROUP: ParamGroup = ParamGroup::Uml;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmlConfig {
    /// Shared width `F` of the fusion stage.
    pub fusion_dim: usize,
    pub n_heads: usize,
    pub temperature: f64,
}

impl Default for UmlConfig {
    fn default() -> Self {
        Self {
            fusion_dim: 64,
            n_heads: 4,
            temperature: 0.5,
        }
    }
}

impl UmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.fusion_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "uml: fusion_dim {} not divisible by n_heads {}",
                self.fusion_dim, self.n_heads
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("uml: temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// `query + Attn(LN(query), LN(context))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim, group),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim, group),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, group, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph, query: Var, context: Var, site: &'static str) -> Result<AttentionOutput> {
        let q = self.norm_q.forward(g, query);
        let kv = self.norm_kv.forward(g, context);
        let a = self.attn.forward(g, q, kv, None, site)?;
        Ok(AttentionOutput {
            output: g.add(query, a.output),
            weights: a.weights,
        })
    }
}

pub struct UmlOutput {
    /// `[1, S]` reasoning state projected into the visual space.
    pub reasoning_visual: Var,
    /// `[1, S]` class part of the cross-modal representation.
    pub cls: Var,
    /// `[L−1, S]` patch part of the cross-modal representation.
    pub patches: Var,
    /// `[1, F]` refined class token.
    pub refined: Var,
    /// `[N, F]` unified tokens.
    pub tokens: Var,
    /// `[1, F]` row mean of `tokens`.
    pub pooled: Var,
    /// `[1, 1]`.
    pub logit: Var,
    pub augment_weights: Vec<Var>,
    pub fuse_weights: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Uml {
    pub cfg: UmlConfig,
    /// `D → S`.
    pub reasoning_proj: Linear,
    pub augment: CrossAttention,
    /// `S → F`.
    pub visual_adapter: Linear,
    /// `M → F`.
    pub st_adapter: Linear,
    pub refine: CrossAttention,
    pub fuse: CrossAttention,
    pub head: Linear,
}

impl Uml {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &UmlConfig,
        text_dim: usize,
        visual_dim: usize,
        st_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.fusion_dim;
        let visual_heads = if visual_dim.is_multiple_of(cfg.n_heads) {
            cfg.n_heads
        } else {
            1
        };
        Ok(Self {
            cfg: cfg.clone(),
            reasoning_proj: Linear::new(store, "uml.reasoning_proj", text_dim, visual_dim, true, GROUP, rng),
            augment: CrossAttention::new(store, "uml.augment", visual_dim, visual_heads, GROUP, rng)?,
            visual_adapter: Linear::new(store, "uml.visual_adapter", visual_dim, f, true, GROUP, rng),
            st_adapter: Linear::new(store, "uml.st_adapter", st_dim, f, true, GROUP, rng),
            refine: CrossAttention::new(store, "uml.refine", f, cfg.n_heads, GROUP, rng)?,
            fuse: CrossAttention::new(store, "uml.fuse", f, cfg.n_heads, GROUP, rng)?,
            head: Linear::new(store, "uml.head", f, 1, true, ParamGroup::Head, rng),
        })
    }

    /// `[1, D] → [1, S]`.
    pub fn project_reasoning(&self, g: &Graph, reasoning: Var) -> Var {
        self.reasoning_proj.forward(g, reasoning)
    }

    /// Visual tokens query the projected reasoning state; returns
    /// `(cls [1, S], patches [L−1, S], weights)`.
    pub fn augment(&self, g: &Graph, visual: Var, reasoning_visual: Var) -> Result<(Var, Var, Vec<Var>)> {
        let l = g.shape(visual)[0];
        if l < 2 {
            return Err(Error::Shape(format!(
                "need a class token and at least one patch, got {l} tokens"
            )));
        }
        let a = self
            .augment
            .forward(g, visual, reasoning_visual, "reasoning-guided augmentation")?;
        let cls = g.slice_rows(a.output, 0, 1);
        let patches = g.slice_rows(a.output, 1, l - 1);
        Ok((cls, patches, a.weights))
    }

    /// Class token refined over the patches, then the spatio-temporal tokens
    /// fused with it. Returns `(refined [1, F], tokens [N, F], fuse weights)`.
    pub fn fuse(&self, g: &Graph, cls: Var, patches: Var, h_st: Var) -> Result<(Var, Var, Vec<Var>)> {
        let cls_f = self.visual_adapter.forward(g, cls);
        let patches_f = self.visual_adapter.forward(g, patches);
        let refined = self.refine.forward(g, cls_f, patches_f, "visual refinement")?.output;
        let st_f = self.st_adapter.forward(g, h_st);
        let fused = self.fuse.forward(g, st_f, refined, "fusion")?;
        Ok((refined, fused.output, fused.weights))
    }

    pub fn classify(&self, g: &Graph, pooled: Var) -> Var {
        self.head.forward(g, pooled)
    }

    pub fn forward(&self, g: &Graph, reasoning: Var, visual: Var, h_st: Var) -> Result<UmlOutput> {
        let reasoning_visual = self.project_reasoning(g, reasoning);
        let (cls, patches, augment_weights) = self.augment(g, visual, reasoning_visual)?;
        let (refined, tokens, fuse_weights) = self.fuse(g, cls, patches, h_st)?;
        let pooled = g.mean_rows(tokens);
        let logit = self.classify(g, pooled);
        Ok(UmlOutput {
            reasoning_visual,
            cls,
            patches,
            refined,
            tokens,
            pooled,
            logit,
            augment_weights,
            fuse_weights,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    crate::autograd::sigmoid(x)
}

/// NT-Xent over `{cls_i} ∪ {reason_i}` (`[B, S]` each): `(cls_i, reason_i)`
/// are positives in both directions, every other element of the `2B` set
/// except the anchor itself is a negative, and the loss is averaged over
/// all `2B` anchors.
pub fn contrastive_loss(g: &Tape, cls: Var, reason: Var, temperature: f64) -> Result<Var> {
    let cs = g.shape(cls);
    let rs = g.shape(reason);
    if cs != rs || cs.len() != 2 {
        return Err(Error::Shape(format!("contrastive batches {cs:?} and {rs:?} differ")));
    }
    let b = cs[0];
    if b < 2 {
        return Err(Error::Shape(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    let z = g.concat_rows(&[cls, reason]);
    {
        let zv = g.value(z);
        for i in 0..2 * b {
            if l2_norm(zv.row(i)) == 0.0 {
                return Err(Error::ZeroVector(if i < b {
                    "class embedding"
                } else {
                    "reasoning embedding"
                }));
            }
        }
    }
    let zn = g.normalize_rows(z);
    let sim = g.matmul_bt(zn, zn);
    let sim = g.scale(sim, 1.0 / temperature);
    let mask = Arc::new(Mask::from_fn(2 * b, 2 * b, |i, j| i != j));
    let logp = g.log_softmax(sim, Some(mask));
    let n = 2 * b;
    let idx: Vec<Option<usize>> = (0..n).map(|i| Some(i * n + (i + b) % n)).collect();
    let pos = g.gather(logp, Arc::new(idx), &[n]);
    let total = g.sum(pos);
    Ok(g.scale(total, -1.0 / n as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    #[default]
    Cosine,
    L2norm,
}

impl MapMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MapMode::Cosine => "cosine",
            MapMode::L2norm => "l2norm",
        }
    }
}

impl std::str::FromStr for MapMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(MapMode::Cosine),
            "l2norm" => Ok(MapMode::L2norm),
            other => Err(Error::Config(format!("unknown map mode `{other}` (cosine|l2norm)"))),
        }
    }
}

/// Per-patch heat map on the patch grid. `patches` is `[L−1, S]`.
pub fn activation_map(reference: &[f64], patches: &Tensor, mode: MapMode) -> Result<Tensor> {
    let n = patches.rows();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::Shape(format!("{n} patches do not form a square grid")));
    }
    let values = (0..n)
        .map(|i| {
            let p = patches.row(i);
            match mode {
                MapMode::Cosine => {
                    if reference.len() != p.len() {
                        return Err(Error::Shape(format!(
                            "reference width {} vs patch width {}",
                            reference.len(),
                            p.len()
                        )));
                    }
                    cosine(reference, p)
                        .map(|c| c.clamp(-1.0, 1.0))
                        .ok_or(Error::ZeroVector("activation map"))
                }
                MapMode::L2norm => Ok(l2_norm(p)),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(&[side, side], values)
}

pub fn write_map_csv(path: &Path, map: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..map.rows() {
        w.write_record(map.row(i).iter().map(|v| format!("{v:.6}")))?;
    }
    w.flush().at(path)
}

/// Grayscale rendering, each cell drawn as a `cell × cell` block. Cosine maps
/// use `[−1, 1] → [0, 255]`; magnitude maps are scaled by their maximum.
pub fn write_map_png(path: &Path, map: &Tensor, mode: MapMode, cell: usize) -> Result<()> {
    let (h, w) = (map.rows(), map.cols());
    let cell = cell.max(1);
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    let level = |v: f64| -> u8 {
        let x = match mode {
            MapMode::Cosine => (v + 1.0) / 2.0,
            MapMode::L2norm if max > 0.0 => v / max,
            MapMode::L2norm => 0.0,
        };
        (x.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let mut buf = vec![0u8; h * cell * w * cell];
    for y in 0..h * cell {
        for x in 0..w * cell {
            buf[y * w * cell + x] = level(map.row(y / cell)[x / cell]);
        }
    }
    image::save_buffer_with_format(
        path,
        &buf,
        (w * cell) as u32,
        (h * cell) as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TrainableSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Tiny explicit-loop attention used as the oracle for [`CrossAttention`].
    fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                let r = x.row(i);
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j])
                    .collect()
            })
            .collect()
    }

    fn affine(x: &[Vec<f64>], store: &ParamStore, l: &Linear) -> Vec<Vec<f64>> {
        let w = store.get(l.weight);
        let b = l.bias.map(|b| store.get(b).clone());
        x.iter()
            .map(|r| {
                (0..l.out_dim)
                    .map(|j| {
                        let mut acc = b.as_ref().map_or(0.0, |b| b.data()[j]);
                        for (k, v) in r.iter().enumerate() {
                            acc += v * w.row(k)[j];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    pub(crate) fn cross_attention_oracle(store: &ParamStore, ca: &CrossAttention, q: &Tensor, kv: &Tensor) -> Tensor {
        let qn = layer_norm_rows(q, store.get(ca.norm_q.gamma), store.get(ca.norm_q.beta));
        let kn = layer_norm_rows(kv, store.get(ca.norm_kv.gamma), store.get(ca.norm_kv.beta));
        let qq = affine(&qn, store, &ca.attn.q);
        let kk = affine(&kn, store, &ca.attn.k);
        let vv = affine(&kn, store, &ca.attn.v);
        let heads = ca.attn.heads;
        let dh = ca.attn.dim / heads;
        let mut concat = vec![vec![0.0; ca.attn.dim]; q.rows()];
        for h in 0..heads {
            for i in 0..q.rows() {
                let scores: Vec<f64> = (0..kv.rows())
                    .map(|j| (0..dh).map(|d| qq[i][h * dh + d] * kk[j][h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..dh {
                    concat[i][h * dh + d] = (0..kv.rows()).map(|j| e[j] / z * vv[j][h * dh + d]).sum();
                }
            }
        }
        let o = affine(&concat, store, &ca.attn.o);
        let data = (0..q.rows())
            .flat_map(|i| (0..ca.attn.dim).map(move |d| (i, d)))
            .map(|(i, d)| q.row(i)[d] + o[i][d])
            .collect();
        Tensor::new(q.shape(), data).unwrap()
    }

    fn contrastive_oracle(cls: &[Vec<f64>], reason: &[Vec<f64>], tau: f64) -> f64 {
        let z: Vec<&Vec<f64>> = cls.iter().chain(reason).collect();
        let n = z.len();
        let b = cls.len();
        let mut total = 0.0;
        for i in 0..n {
            let pos = (i + b) % n;
            let num = (cosine(z[i], z[pos]).unwrap() / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += (cosine(z[i], z[j]).unwrap() / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / n as f64
    }

    fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).ends_with(".bias") || store.name(id).ends_with(".beta") {
                let s = store.get(id).shape().to_vec();
                store.set(id, Tensor::randn(&s, 0.3, rng));
            }
            if store.name(id).ends_with(".gamma") {
                let s = store.get(id).shape().to_vec();
                let mut t = Tensor::randn(&s, 0.2, rng);
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
                store.set(id, t);
            }
        }
    }

    fn loss_value(cls: &[Vec<f64>], reason: &[Vec<f64>], tau: f64) -> f64 {
        let store = ParamStore::new();
        let g = Graph::inference(&store);
        let c = g.constant(Tensor::from_rows(cls).unwrap());
        let r = g.constant(Tensor::from_rows(reason).unwrap());
        let l = contrastive_loss(&g, c, r, tau).unwrap();
        let v = g.value(l).item();
        v
    }

    #[test]
    fn cross_attention_matches_loop_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ca = CrossAttention::new(&mut store, "ca", 4, 1, GROUP, &mut rng).unwrap();
            randomize_biases(&mut store, &mut rng);
            let q = Tensor::randn(&[2, 4], 1.0, &mut rng);
            let kv = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let g = Graph::inference(&store);
            let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
            let out = ca.forward(&g, qv, kvv, "test").unwrap();
            let oracle = cross_attention_oracle(&store, &ca, &q, &kv);
            assert!(g.value(out.output).max_abs_diff(&oracle) < 1e-6);
        }
    }

    #[test]
    fn single_context_token_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", 8, 2, GROUP, &mut rng).unwrap();
        let g = Graph::inference(&store);
        let q = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let kv = g.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let out = ca.forward(&g, q, kv, "test").unwrap();
        for w in out.weights {
            assert!(g.value(w).data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn identical_context_rows_make_weights_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", 8, 2, GROUP, &mut rng).unwrap();
        let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let kv3 = Tensor::from_rows(&vec![row.data().to_vec(); 3]).unwrap();
        let g = Graph::inference(&store);
        let q = g.constant(Tensor::randn(&[2, 8], 1.0, &mut rng));
        let a = ca.forward(&g, q, g.constant(kv3), "t").unwrap().output;
        let b = ca.forward(&g, q, g.constant(row), "t").unwrap().output;
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-12);
    }

    fn build(l: usize) -> (ParamStore, Uml, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let uml = Uml::new(&mut store, &UmlConfig::default(), 32, 16, 24, &mut rng).unwrap();
        let reasoning = Tensor::randn(&[1, 32], 1.0, &mut rng);
        let visual = Tensor::randn(&[l, 16], 1.0, &mut rng);
        let h_st = Tensor::randn(&[3, 24], 1.0, &mut rng);
        (store, uml, reasoning, visual, h_st)
    }

    #[test]
    fn fusion_shapes_and_single_key_weights() {
        let (store, uml, r, v, h) = build(17);
        let g = Graph::inference(&store);
        let out = uml.forward(&g, g.constant(r), g.constant(v), g.constant(h)).unwrap();
        assert_eq!(g.shape(out.cls), vec![1, 16]);
        assert_eq!(g.shape(out.patches), vec![16, 16]);
        assert_eq!(g.shape(out.refined), vec![1, 64]);
        assert_eq!(g.shape(out.tokens), vec![3, 64]);
        assert_eq!(g.shape(out.pooled), vec![1, 64]);
        for w in &out.fuse_weights {
            assert!(g.value(*w).data().iter().all(|&x| x == 1.0));
        }
        let tokens = g.value(out.tokens).clone();
        let pooled = g.value(out.pooled).clone();
        for d in 0..64 {
            let m = (0..3).map(|i| tokens.row(i)[d]).sum::<f64>() / 3.0;
            assert!((pooled.data()[d] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_output_projection_keeps_visual_tokens() {
        let (mut store, uml, r, v, _) = build(5);
        store.set(uml.augment.attn.o.weight, Tensor::zeros(&[16, 16]));
        let g = Graph::inference(&store);
        let rv = uml.project_reasoning(&g, g.constant(r));
        let (cls, patches, _) = uml.augment(&g, g.constant(v.clone()), rv).unwrap();
        assert_eq!(g.value(cls).data(), v.row(0));
        assert_eq!(g.value(patches).data(), &v.data()[16..]);
    }

    #[test]
    fn chained_fusion_matches_oracle() {
        let (mut store, uml, _, v, h) = build(5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        randomize_biases(&mut store, &mut rng);
        let g = Graph::inference(&store);
        let cls = g.constant(Tensor::from_rows(&[v.row(0).to_vec()]).unwrap());
        let patches = g.constant(Tensor::new(&[4, 16], v.data()[16..].to_vec()).unwrap());
        let (refined, tokens, _) = uml.fuse(&g, cls, patches, g.constant(h.clone())).unwrap();

        let to_t = |rows: Vec<Vec<f64>>| Tensor::from_rows(&rows).unwrap();
        let cls_f = to_t(affine(&[v.row(0).to_vec()], &store, &uml.visual_adapter));
        let patch_rows: Vec<Vec<f64>> = (1..5).map(|i| v.row(i).to_vec()).collect();
        let patches_f = to_t(affine(&patch_rows, &store, &uml.visual_adapter));
        let refined_o = cross_attention_oracle(&store, &uml.refine, &cls_f, &patches_f);
        let st_rows: Vec<Vec<f64>> = (0..3).map(|i| h.row(i).to_vec()).collect();
        let st_f = to_t(affine(&st_rows, &store, &uml.st_adapter));
        let tokens_o = cross_attention_oracle(&store, &uml.fuse, &st_f, &refined_o);
        assert!(g.value(refined).max_abs_diff(&refined_o) < 1e-6);
        assert!(g.value(tokens).max_abs_diff(&tokens_o) < 1e-6);
    }

    #[test]
    fn reasoning_projection_matches_matvec() {
        let (mut store, uml, r, _, _) = build(5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        store.set(uml.reasoning_proj.bias.unwrap(), Tensor::randn(&[16], 1.0, &mut rng));
        let g = Graph::inference(&store);
        let out = uml.project_reasoning(&g, g.constant(r.clone()));
        let oracle = Tensor::from_rows(&affine(&[r.data().to_vec()], &store, &uml.reasoning_proj)).unwrap();
        assert!(g.value(out).max_abs_diff(&oracle) < 1e-6);
        let mut zs = store.clone();
        zs.set(uml.reasoning_proj.bias.unwrap(), Tensor::zeros(&[16]));
        let g = Graph::inference(&zs);
        let out = uml.project_reasoning(&g, g.constant(Tensor::zeros(&[1, 32])));
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_head() {
        let (mut store, uml, _, _, _) = build(5);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[1, 64], 1.0, &mut rng);
        let g = Graph::inference(&store);
        let logit = g.value(uml.classify(&g, g.constant(x.clone()))).item();
        let w = store.get(uml.head.weight);
        let b = store.get(uml.head.bias.unwrap()).data()[0];
        let direct = (0..64).map(|k| x.data()[k] * w.data()[k]).sum::<f64>() + b;
        assert!((sigmoid(logit) - 1.0 / (1.0 + (-direct).exp())).abs() < 1e-9);
        store.set(uml.head.weight, Tensor::zeros(&[64, 1]));
        let g = Graph::inference(&store);
        assert_eq!(sigmoid(g.value(uml.classify(&g, g.constant(x))).item()), 0.5);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn contrastive_closed_forms() {
        let v = vec![vec![0.3, -1.2, 2.0]; 6];
        assert!((loss_value(&v, &v, 0.5) - 11f64.ln()).abs() < 1e-6);

        // positives aligned, all negatives orthogonal; B = 6 in 12 dims
        let basis = |i: usize| (0..12).map(|d| if d == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let cls: Vec<Vec<f64>> = (0..6).map(basis).collect();
        let reason: Vec<Vec<f64>> = (0..6).map(|i| basis(i).iter().map(|x| 2.0 * x).collect()).collect();
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 10.0)).ln();
        assert!((loss_value(&cls, &reason, 0.5) - expected).abs() < 1e-9);
        assert!((expected - 0.855_84).abs() < 1e-5);
        assert!((contrastive_oracle(&cls, &reason, 0.5) - expected).abs() < 1e-9);
    }

    #[test]
    fn contrastive_matches_loop_oracle() {
        let cls = vec![vec![1.0, 0.5], vec![-0.3, 2.0]];
        let reason = vec![vec![0.2, -1.0], vec![1.5, 1.5]];
        assert!((loss_value(&cls, &reason, 0.5) - contrastive_oracle(&cls, &reason, 0.5)).abs() < 1e-9);
    }

    #[test]
    fn contrastive_rejects_zero_vectors_and_tiny_batches() {
        let store = ParamStore::new();
        let g = Graph::inference(&store);
        let c = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let r = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
        assert!(matches!(contrastive_loss(&g, c, r, 0.5), Err(Error::ZeroVector(_))));
        let one = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(contrastive_loss(&g, one, one, 0.5).is_err());
    }

    #[test]
    fn activation_map_cases() {
        let reference = vec![1.0, 2.0, 0.5];
        let same = Tensor::from_rows(&vec![reference.clone(); 4]).unwrap();
        let m = activation_map(&reference, &same, MapMode::Cosine).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert!(m.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let orth = Tensor::from_rows(&vec![vec![2.0, -1.0, 0.0]; 4]).unwrap();
        let m = activation_map(&reference, &orth, MapMode::Cosine).unwrap();
        assert!(m.data().iter().all(|&v| v.abs() < 1e-12));

        let mut hot = Tensor::zeros(&[9, 3]);
        hot.data_mut()[4 * 3 + 1] = 1.0;
        let m = activation_map(&reference, &hot, MapMode::L2norm).unwrap();
        assert_eq!(m.row(1)[1], 1.0);
        assert!(activation_map(&reference, &hot, MapMode::Cosine).is_err());
        assert!(activation_map(&reference, &Tensor::zeros(&[3, 3]), MapMode::L2norm).is_err());
    }

    #[test]
    fn activation_map_exports() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.5]]).unwrap();
        write_map_csv(&dir.path().join("m.csv"), &m).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(text, "1.000000,-1.000000\n0.000000,0.500000\n");
        write_map_png(&dir.path().join("m.png"), &m, MapMode::Cosine, 4).unwrap();
        let img = image::open(dir.path().join("m.png")).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (8, 8));
        assert_eq!(img.get_pixel(0, 0).0[0], 255);
        assert_eq!(img.get_pixel(7, 0).0[0], 0);
    }

    #[test]
    fn uml_gradients_flow_to_its_groups_only() {
        let (store, uml, r, v, h) = build(5);
        let g = Graph::new(&store, TrainableSet::of(&[ParamGroup::Uml, ParamGroup::Head]));
        let out = uml.forward(&g, g.constant(r), g.constant(v), g.constant(h)).unwrap();
        let grads = g.param_grads(&g.backward(g.sum(out.logit)));
        assert!(!grads.is_empty());
        assert!(grads.iter().any(|(id, _)| store.group(*id) == ParamGroup::Head));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(cls: &Tensor, reason: &Tensor, tau: f64) -> f64 {
        let g = Tape::new();
        let (a, b) = (g.constant(cls.clone()), g.constant(reason.clone()));
        let l = contrastive_loss(&g, a, b, tau).unwrap();
        let v = g.value(l).item();
        v
    }

    fn rescale(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let s = rng.random_range(0.05..20.0);
            row.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    proptest! {
        #[test]
        fn contrastive_is_scale_and_order_invariant(b in 2usize..8, s in 2usize..10, tau in 0.05f64..2.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cls = Tensor::randn(&[b, s], 1.0, &mut rng);
            let reason = Tensor::randn(&[b, s], 1.0, &mut rng);
            let base = loss(&cls, &reason, tau);
            prop_assert!(base >= 0.0 && base.is_finite());
            prop_assert!((loss(&rescale(&cls, &mut rng), &rescale(&reason, &mut rng), tau) - base).abs() <= 1e-9);
            prop_assert!((loss(&reason, &cls, tau) - base).abs() <= 1e-9);
            let flip = |t: &Tensor| Tensor::from_rows(&(0..b).rev().map(|i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            prop_assert!((loss(&flip(&cls), &flip(&reason), tau) - base).abs() <= 1e-9);
        }

        #[test]
        fn identical_batches_give_log_of_negatives(b in 2usize..10, s in 1usize..8, tau in 0.05f64..2.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Tensor::randn(&[1, s], 1.0, &mut rng);
            prop_assume!(l2_norm(v.data()) > 1e-6);
            let same = Tensor::from_rows(&vec![v.row(0).to_vec(); b]).unwrap();
            prop_assert!((loss(&same, &same, tau) - ((2 * b - 1) as f64).ln()).abs() < 1e-6);
        }
    }
}
