//! Multimodal branch: frozen visual encoder, visual-to-text projector, and a
//! causal language model that reads `[prompt; projected visual tokens;
//! reasoning token]` and returns the hidden state at the reasoning token.

pub mod lm;
pub mod probe;
pub mod visual;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use lm::{tokenize, LanguageModel, LmTrace, Templates, TextTokens, VOCAB_SIZE};
pub use visual::VisualEncoder;

use crate::autograd::{Mask, Tape, Var};
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::nn::{FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmConfig {
    pub image_side: usize,
    pub channels: usize,
    pub visual_patch: usize,
    /// Visual token width `S`.
    pub visual_dim: usize,
    pub visual_layers: usize,
    pub visual_heads: usize,
    /// Text embedding width `D`.
    pub text_dim: usize,
    pub max_text_len: usize,
    pub context_len: usize,
    pub n_lm_layers: usize,
    pub n_lm_heads: usize,
    pub lora_rank: usize,
    /// 1-based LM layer supplying the reasoning representation; last when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_layer: Option<usize>,
}

impl Default for MmConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            channels: 3,
            visual_patch: 8,
            visual_dim: 64,
            visual_layers: 2,
            visual_heads: 4,
            text_dim: 64,
            max_text_len: 64,
            context_len: 128,
            n_lm_layers: 4,
            n_lm_heads: 4,
            lora_rank: 4,
            reasoning_layer: None,
        }
    }
}

impl MmConfig {
    /// Full-size shapes: 336-pixel frames in 14-pixel patches (577 tokens of
    /// width 1024), a 4096-wide decoder probed at 33 points.
    pub fn full_scale() -> Self {
        Self {
            image_side: 336,
            channels: 3,
            visual_patch: 14,
            visual_dim: 1024,
            visual_layers: 24,
            visual_heads: 16,
            text_dim: 4096,
            max_text_len: 1024,
            context_len: 2048,
            n_lm_layers: 33,
            n_lm_heads: 32,
            lora_rank: 128,
            reasoning_layer: None,
        }
    }

    /// `L`: one class token plus one token per patch.
    pub fn visual_seq_len(&self) -> usize {
        (self.image_side / self.visual_patch).pow(2) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_patch == 0 || !self.image_side.is_multiple_of(self.visual_patch) {
            return Err(Error::Config(format!(
                "mm: image side {} not divisible by patch {}",
                self.image_side, self.visual_patch
            )));
        }
        if self.visual_seq_len() < 2 {
            return Err(Error::Config("mm: need at least one visual patch".into()));
        }
        if self.visual_layers < 2 {
            return Err(Error::Config("mm: visual encoder needs >= 2 layers".into()));
        }
        if self.n_lm_layers == 0 {
            return Err(Error::Config("mm: need >= 1 LM layer".into()));
        }
        if let Some(l) = self.reasoning_layer {
            if l == 0 || l > self.n_lm_layers {
                return Err(Error::Config(format!(
                    "mm: reasoning_layer {l} outside 1..={}",
                    self.n_lm_layers
                )));
            }
        }
        if self.max_text_len + self.visual_seq_len() + 1 > self.context_len {
            return Err(Error::Config(format!(
                "mm: max_text_len {} + {} visual tokens + 1 exceeds context {}",
                self.max_text_len,
                self.visual_seq_len(),
                self.context_len
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer block shared by the visual encoder and the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, group),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, group, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, group),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4, group, rng),
        })
    }

    pub fn forward(&self, g: &Graph, x: Var, mask: Option<Arc<Mask>>, site: &'static str) -> Result<(Var, Vec<Var>)> {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h, mask, site)?;
        let x = g.add(x, a.output);
        let h = self.norm2.forward(g, x);
        let h = self.ffn.forward(g, h);
        Ok((g.add(x, h), a.weights))
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        let [q, k, v, o] = self.attn.linears_mut();
        [q, k, v, o, &mut self.ffn.fc1, &mut self.ffn.fc2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    LmLinearLayers,
    Projector,
}

/// Reasoning and visual halves of the branch output.
pub struct MmOutput {
    /// `[1, D]` hidden state at the reasoning token.
    pub reasoning: Var,
    /// `[L, S]` visual tokens.
    pub visual: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmBranch {
    pub cfg: MmConfig,
    pub encoder: VisualEncoder,
    pub projector: Linear,
    pub lm: LanguageModel,
    /// `[1, D]` reasoning token embedding.
    pub reasoning_token: ParamId,
    pub templates: Templates,
}

impl MmBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &MmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = VisualEncoder::new(store, cfg, rng)?;
        let projector = Linear::new(
            store,
            "mm.projector",
            cfg.visual_dim,
            cfg.text_dim,
            true,
            ParamGroup::Projector,
            rng,
        );
        let lm = LanguageModel::new(store, cfg, rng)?;
        let reasoning_token = store.add(
            "mm.reasoning_token",
            ParamGroup::ReasoningToken,
            Tensor::randn(&[1, cfg.text_dim], 0.02, rng),
        );
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            projector,
            lm,
            reasoning_token,
            templates: Templates::default(),
        })
    }

    pub fn encode_visual(&self, g: &Graph, frame: &Frame) -> Result<Var> {
        self.encoder.encode(g, frame)
    }

    /// `[L, S] -> [L, D]`.
    pub fn align_visual(&self, g: &Graph, visual: Var) -> Var {
        self.projector.forward(g, visual)
    }

    pub fn tokenize(&self, text: &str) -> Result<TextTokens> {
        tokenize(text, self.cfg.max_text_len)
    }

    fn sequence(
        &self,
        g: &Graph,
        text: &TextTokens,
        aligned: Var,
        lr: Var,
        suffix: Option<Var>,
    ) -> Result<(Var, usize)> {
        let l = g.shape(aligned)[0];
        let pos = text.len() + l;
        let total = pos + 1 + suffix.map_or(0, |s| g.shape(s)[0]);
        if total > self.lm.context_len {
            return Err(Error::ContextOverflow {
                len: total,
                max: self.lm.context_len,
            });
        }
        let mut parts = Vec::with_capacity(4);
        if !text.is_empty() {
            parts.push(self.lm.embed(g, text));
        }
        parts.push(aligned);
        parts.push(lr);
        parts.extend(suffix);
        Ok((g.concat_rows(&parts), pos))
    }

    /// Hidden state at the reasoning position after every LM layer, each `[1, D]`.
    pub fn lm_forward_all_layers(&self, g: &Graph, text: &TextTokens, aligned: Var, lr: Var) -> Result<Vec<Var>> {
        self.layers_at_reasoning(g, text, aligned, lr, None)
    }

    fn layers_at_reasoning(
        &self,
        g: &Graph,
        text: &TextTokens,
        aligned: Var,
        lr: Var,
        suffix: Option<Var>,
    ) -> Result<Vec<Var>> {
        let (seq, pos) = self.sequence(g, text, aligned, lr, suffix)?;
        let trace = self.lm.run(g, seq)?;
        Ok(trace.layers.iter().map(|&h| g.slice_rows(h, pos, 1)).collect())
    }

    fn reasoning_index(&self) -> usize {
        self.cfg.reasoning_layer.unwrap_or(self.cfg.n_lm_layers) - 1
    }

    /// `H'_lr` as `[1, D]`.
    pub fn reason(&self, g: &Graph, text: &TextTokens, aligned: Var, lr: Var) -> Result<Var> {
        let layers = self.lm_forward_all_layers(g, text, aligned, lr)?;
        Ok(layers[self.reasoning_index()])
    }

    /// Same as [`reason`](Self::reason) with extra embedded rows placed after
    /// the reasoning token; used to check causality.
    pub fn reason_with_suffix(&self, g: &Graph, text: &TextTokens, aligned: Var, lr: Var, suffix: Var) -> Result<Var> {
        let layers = self.layers_at_reasoning(g, text, aligned, lr, Some(suffix))?;
        Ok(layers[self.reasoning_index()])
    }

    /// Per-layer attention weights of the full reasoning sequence.
    pub fn reasoning_attention(&self, g: &Graph, text: &TextTokens, aligned: Var, lr: Var) -> Result<Vec<Vec<Var>>> {
        let (seq, _) = self.sequence(g, text, aligned, lr, None)?;
        Ok(self.lm.run(g, seq)?.weights)
    }

    pub fn forward(&self, g: &Graph, key_frame: &Frame) -> Result<MmOutput> {
        let visual = self.encode_visual(g, key_frame)?;
        let aligned = self.align_visual(g, visual);
        let text = self.tokenize(self.templates.inference_prompt())?;
        let lr = g.param(self.reasoning_token);
        let reasoning = self.reason(g, &text, aligned, lr)?;
        Ok(MmOutput { reasoning, visual })
    }

    /// Next-symbol logits `[T, V]` over `[prompt; visual; answer]` and the
    /// position whose logits predict the first answer symbol.
    pub fn instruction_logits(
        &self,
        g: &Graph,
        key_frame: &Frame,
        prompt: &TextTokens,
        answer: &TextTokens,
    ) -> Result<(Var, usize)> {
        let visual = self.encode_visual(g, key_frame)?;
        let aligned = self.align_visual(g, visual);
        let mut parts = Vec::with_capacity(3);
        if !prompt.is_empty() {
            parts.push(self.lm.embed(g, prompt));
        }
        parts.push(aligned);
        parts.push(self.lm.embed(g, answer));
        let seq = g.concat_rows(&parts);
        let trace = self.lm.run(g, seq)?;
        let logits = self.lm.logits(g, *trace.layers.last().unwrap())?;
        Ok((logits, prompt.len() + g.shape(aligned)[0] - 1))
    }

    /// Summed negative log-likelihood of `answer` given `[prompt; visual]`,
    /// teacher-forced in one pass.
    pub fn instruction_loss(&self, g: &Graph, key_frame: &Frame, prompt: &str, answer: &str) -> Result<Var> {
        let prompt = self.tokenize(prompt)?;
        let answer = self.tokenize(answer)?;
        let (logits, first) = self.instruction_logits(g, key_frame, &prompt, &answer)?;
        answer_nll(g, logits, first, &answer.ids)
    }

    /// Wraps the targeted linear maps with zero-initialized adapters
    /// (`alpha = rank`). Returns the number of adapter scalars added.
    pub fn apply_lora<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        target: LoraTarget,
        rng: &mut R,
    ) -> Result<usize> {
        let alpha = rank as f64;
        match target {
            LoraTarget::Projector => self.projector.attach_lora(store, rank, alpha, rng),
            LoraTarget::LmLinearLayers => {
                let mut added = 0;
                for l in self.lm.linears_mut() {
                    added += l.attach_lora(store, rank, alpha, rng)?;
                }
                Ok(added)
            }
        }
    }

    pub fn has_lora(&self) -> bool {
        self.projector.lora.is_some() || self.lm.blocks.iter().any(|b| b.attn.q.lora.is_some())
    }

    /// Reasoning-position states at every LM layer, one vector per layer.
    pub fn layer_representations(&self, store: &ParamStore, frame: &Frame) -> Result<Vec<Vec<f64>>> {
        let g = Graph::inference(store);
        let visual = self.encode_visual(&g, frame)?;
        let aligned = self.align_visual(&g, visual);
        let text = self.tokenize(self.templates.inference_prompt())?;
        let lr = g.param(self.reasoning_token);
        let layers = self.lm_forward_all_layers(&g, &text, aligned, lr)?;
        Ok(layers.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    /// Probe accuracy for every LM layer (index 0 is layer 1).
    pub fn probe_all_layers(
        &self,
        store: &ParamStore,
        real: &[Frame],
        fake: &[Frame],
        mode: ExecMode,
    ) -> Result<Vec<f64>> {
        let reps_real = exec::try_map(mode, real, |f| self.layer_representations(store, f))?;
        let reps_fake = exec::try_map(mode, fake, |f| self.layer_representations(store, f))?;
        (0..self.cfg.n_lm_layers)
            .map(|l| {
                let r: Vec<Vec<f64>> = reps_real.iter().map(|x| x[l].clone()).collect();
                let f: Vec<Vec<f64>> = reps_fake.iter().map(|x| x[l].clone()).collect();
                probe::separability(&r, &f)
            })
            .collect()
    }

    /// Probe accuracy at a 1-based LM layer.
    pub fn probe_layer_separability(
        &self,
        store: &ParamStore,
        real: &[Frame],
        fake: &[Frame],
        layer: usize,
        mode: ExecMode,
    ) -> Result<f64> {
        if layer == 0 || layer > self.cfg.n_lm_layers {
            return Err(Error::Config(format!(
                "layer {layer} outside 1..={}",
                self.cfg.n_lm_layers
            )));
        }
        let reps_real = exec::try_map(mode, real, |f| self.layer_representations(store, f))?;
        let reps_fake = exec::try_map(mode, fake, |f| self.layer_representations(store, f))?;
        let r: Vec<Vec<f64>> = reps_real.into_iter().map(|mut x| x.swap_remove(layer - 1)).collect();
        let f: Vec<Vec<f64>> = reps_fake.into_iter().map(|mut x| x.swap_remove(layer - 1)).collect();
        probe::separability(&r, &f)
    }
}

/// `−Σ_t log p(targets[t])` where row `first + t` of `logits` predicts
/// `targets[t]`. Rows outside the answer receive no gradient.
pub fn answer_nll(g: &Tape, logits: Var, first: usize, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if targets.is_empty() {
        return Err(Error::EmptyDataset("answer has no tokens".into()));
    }
    if shape.len() != 2 || first + targets.len() > shape[0] || targets.iter().any(|&t| t >= shape[1]) {
        return Err(Error::Shape(format!(
            "{} targets from row {first} do not fit logits {shape:?}",
            targets.len()
        )));
    }
    let v = shape[1];
    let logp = g.log_softmax(logits, None);
    let idx: Vec<Option<usize>> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| Some((first + i) * v + t))
        .collect();
    let picked = g.gather(logp, Arc::new(idx), &[targets.len()]);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TrainableSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (ParamStore, MmBranch) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mm = MmBranch::new(&mut store, &MmConfig::default(), &mut rng).unwrap();
        (store, mm)
    }

    fn frame(seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn visual_tokens_shape_and_determinism() {
        let (store, mm) = build();
        let f = frame(1);
        let g = Graph::inference(&store);
        let a = mm.encode_visual(&g, &f).unwrap();
        let b = mm.encode_visual(&g, &f).unwrap();
        assert_eq!(g.shape(a), vec![17, 64]);
        assert_eq!(bits(&g.value(a)), bits(&g.value(b)));
        assert!(mm.encode_visual(&g, &Frame::constant(3, 16, 16, 0.0)).is_err());
    }

    #[test]
    fn visual_tokens_come_from_second_to_last_layer() {
        let (store, mm) = build();
        let f = frame(2);
        let g = Graph::inference(&store);
        let all = mm.encoder.hidden_states(&g, &f, 2).unwrap();
        let enc = mm.encode_visual(&g, &f).unwrap();
        assert_eq!(bits(&g.value(all[1])), bits(&g.value(enc)));
        assert_ne!(bits(&g.value(all[2])), bits(&g.value(enc)));
    }

    #[test]
    fn projector_matches_explicit_matvec() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::new(&mut store, "p", 4, 5, true, ParamGroup::Projector, &mut rng);
        store.set(lin.bias.unwrap(), Tensor::randn(&[5], 1.0, &mut rng));
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let y = g.value(lin.forward(&g, xv)).clone();
        let w = store.get(lin.weight);
        let b = store.get(lin.bias.unwrap());
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += x.row(i)[k] * w.row(k)[j];
                }
                assert!((y.row(i)[j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_projector_is_passthrough() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::new(&mut store, "p", 6, 6, true, ParamGroup::Projector, &mut rng);
        store.set(lin.weight, Tensor::identity(6));
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        assert_eq!(*g.value(lin.forward(&g, xv)), x);
        // zero input with zero bias maps to zero
        let z = g.constant(Tensor::zeros(&[4, 6]));
        assert!(g.value(lin.forward(&g, z)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reasoning_is_last_layer_and_sensitive_to_visual_tokens() {
        let (store, mm) = build();
        let f = frame(6);
        let g = Graph::inference(&store);
        let out = mm.forward(&g, &f).unwrap();
        assert_eq!(g.shape(out.reasoning), vec![1, 64]);

        let aligned = mm.align_visual(&g, out.visual);
        let text = mm.tokenize(mm.templates.inference_prompt()).unwrap();
        let lr = g.param(mm.reasoning_token);
        let layers = mm.lm_forward_all_layers(&g, &text, aligned, lr).unwrap();
        assert_eq!(layers.len(), 4);
        assert_eq!(bits(&g.value(*layers.last().unwrap())), bits(&g.value(out.reasoning)));

        let mut bumped = g.value(out.visual).clone();
        bumped.data_mut()[5 * 64 + 3] += 0.5;
        let bv = g.constant(bumped);
        let ba = mm.align_visual(&g, bv);
        let r2 = mm.reason(&g, &text, ba, lr).unwrap();
        assert!(g.value(r2).max_abs_diff(&g.value(out.reasoning)) > 0.0);
    }

    #[test]
    fn suffix_after_reasoning_token_is_invisible() {
        let (store, mm) = build();
        let g = Graph::inference(&store);
        let v = mm.encode_visual(&g, &frame(7)).unwrap();
        let a = mm.align_visual(&g, v);
        let text = mm.tokenize("Is it?").unwrap();
        let lr = g.param(mm.reasoning_token);
        let base = mm.reason(&g, &text, a, lr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let suffix = g.constant(Tensor::randn(&[5, 64], 1.0, &mut rng));
        let with = mm.reason_with_suffix(&g, &text, a, lr, suffix).unwrap();
        assert_eq!(bits(&g.value(base)), bits(&g.value(with)));
        for layer in mm.reasoning_attention(&g, &text, a, lr).unwrap() {
            for w in layer {
                let w = g.value(w);
                for i in 0..w.rows() {
                    for j in i + 1..w.cols() {
                        assert_eq!(w.row(i)[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn context_overflow_is_reported() {
        let (store, mm) = build();
        assert!(matches!(
            mm.tokenize(&"x".repeat(65)),
            Err(Error::ContextOverflow { .. })
        ));
        let g = Graph::inference(&store);
        let v = mm.encode_visual(&g, &frame(9)).unwrap();
        let a = mm.align_visual(&g, v);
        let text = TextTokens { ids: vec![1; 111] };
        let lr = g.param(mm.reasoning_token);
        assert!(matches!(
            mm.reason(&g, &text, a, lr),
            Err(Error::ContextOverflow { len: 129, max: 128 })
        ));
    }

    #[test]
    fn zero_init_lora_is_bit_identical_and_counts_scalars() {
        let (mut store, mut mm) = build();
        let f = frame(10);
        let before = {
            let g = Graph::inference(&store);
            let v = g.value(mm.forward(&g, &f).unwrap().reasoning).clone();
            v
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let added = mm
            .apply_lora(&mut store, 4, LoraTarget::LmLinearLayers, &mut rng)
            .unwrap();
        // per block: q,k,v,o are 64x64, fc1 64x256, fc2 256x64
        assert_eq!(added, 4 * (4 * 2 * 4 * 64 + 2 * 4 * (64 + 256)));
        assert_eq!(store.count_in(ParamGroup::Lora), added);
        assert_eq!(store.ids_in(ParamGroup::Lora).len(), 4 * 6 * 2);
        let after = {
            let g = Graph::inference(&store);
            let v = g.value(mm.forward(&g, &f).unwrap().reasoning).clone();
            v
        };
        assert_eq!(bits(&before), bits(&after));
        let added = mm.apply_lora(&mut store, 4, LoraTarget::Projector, &mut rng).unwrap();
        assert_eq!(added, 4 * (64 + 64));
        assert!(matches!(
            mm.apply_lora(&mut store, 65, LoraTarget::Projector, &mut rng),
            Err(Error::RankTooLarge { .. }) | Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_step_changes_only_adapters_and_reasoning_token() {
        let (mut store, mut mm) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        mm.apply_lora(&mut store, 2, LoraTarget::LmLinearLayers, &mut rng)
            .unwrap();
        let snapshot = store.clone();
        let grads = {
            let g = Graph::new(
                &store,
                TrainableSet::of(&[ParamGroup::Lora, ParamGroup::ReasoningToken]),
            );
            let out = mm.forward(&g, &frame(13)).unwrap();
            let sq = g.mul(out.reasoning, out.reasoning);
            let loss = g.sum(sq);
            g.param_grads(&g.backward(loss))
        };
        for (id, grad) in grads {
            let mut t = store.get(id).clone();
            for (v, d) in t.data_mut().iter_mut().zip(grad.data()) {
                *v -= 0.1 * d;
            }
            store.set(id, t);
        }
        let mut changed_lora = false;
        for id in store.ids() {
            let differs = store.get(id) != snapshot.get(id);
            match store.group(id) {
                ParamGroup::Lora => changed_lora |= differs,
                ParamGroup::ReasoningToken => assert!(differs),
                _ => assert!(!differs, "{} changed", store.name(id)),
            }
        }
        assert!(changed_lora);
    }

    #[test]
    fn instruction_loss_is_positive_and_finite() {
        let (store, mm) = build();
        let g = Graph::inference(&store);
        let loss = mm
            .instruction_loss(&g, &frame(14), mm.templates.prompt(0), mm.templates.answer(true))
            .unwrap();
        let v = g.value(loss).item();
        let n = mm.templates.answer(true).len() as f64;
        assert!(v > 0.0 && v.is_finite());
        // an untrained head is roughly uniform over the 256 symbols
        assert!(v / n > 0.5 * (256f64).ln() && v / n < 2.0 * (256f64).ln(), "{v}");
    }

    #[test]
    fn full_scale_shapes() {
        let cfg = MmConfig::full_scale();
        assert_eq!(cfg.visual_seq_len(), 577);
        assert_eq!(cfg.n_lm_layers, 33);
        assert_eq!(cfg.text_dim, 4096);
    }

    #[test]
    fn templates_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prompts.txt");
        let t = Templates::default();
        std::fs::write(&p, t.to_text()).unwrap();
        assert_eq!(Templates::from_file(&p).unwrap(), t);
    }

    #[test]
    fn answer_nll_closed_forms() {
        let store = ParamStore::new();
        let g = Graph::inference(&store);
        let mut sure = Tensor::zeros(&[4, VOCAB_SIZE]);
        for (r, t) in [(1usize, 7usize), (2, 9)] {
            sure.data_mut()[r * VOCAB_SIZE + t] = 1000.0;
        }
        let l = answer_nll(&g, g.constant(sure), 1, &[7, 9]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let uniform = g.constant(Tensor::zeros(&[5, VOCAB_SIZE]));
        let l = answer_nll(&g, uniform, 2, &[1, 2, 3]).unwrap();
        let per = g.value(l).item() / 3.0;
        assert!((per - 5.545).abs() < 1e-3);
        assert!((per - (256f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn answer_nll_matches_token_loop_and_masks_prompt() {
        let (store, mm) = build();
        let prompt = mm.tokenize("Real?").unwrap();
        let answer = mm.tokenize("yes").unwrap();
        let g = Graph::new(&store, TrainableSet::of(&[ParamGroup::Projector]));
        let (logits, first) = mm.instruction_logits(&g, &frame(15), &prompt, &answer).unwrap();
        let loss = answer_nll(&g, logits, first, &answer.ids).unwrap();
        let lv = g.value(logits).clone();
        let mut oracle = 0.0;
        for (t, &id) in answer.ids.iter().enumerate() {
            let row = lv.row(first + t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            oracle += lse - row[id];
        }
        assert!((g.value(loss).item() - oracle).abs() < 1e-9);

        let grads = g.backward(loss);
        let gl = grads.get(logits).unwrap();
        for r in 0..gl.rows() {
            let zero = gl.row(r).iter().all(|&x| x == 0.0);
            let in_answer = (first..first + answer.len()).contains(&r);
            assert_eq!(zero, !in_answer, "row {r}");
        }
    }
}
