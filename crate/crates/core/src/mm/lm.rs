//! Byte-level tokenizer, instruction templates, and the causal decoder.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use super::{Block, MmConfig};
use crate::autograd::{Mask, Var};
use crate::error::{Error, IoContext, Result};
use crate::nn::{Graph, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

const GROUP: ParamGroup = ParamGroup::LmBase;

/// Every byte is its own symbol, so the vocabulary has exactly 256 entries.
pub const VOCAB_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<usize>,
}

impl TextTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, max_len: usize) -> Result<TextTokens> {
    let ids: Vec<usize> = text.bytes().map(usize::from).collect();
    if ids.len() > max_len {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max: max_len,
        });
    }
    Ok(TextTokens { ids })
}

/// Prompts plus the two templated answers used for instruction tuning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templates {
    pub prompts: Vec<String>,
    pub real_answer: String,
    pub fake_answer: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            prompts: vec![
                "Is this frame real or AI-generated?".into(),
                "Was this frame produced by a generative model?".into(),
                "Does this frame show forgery traces?".into(),
            ],
            real_answer: "Real.".into(),
            fake_answer: "AI-generated.".into(),
        }
    }
}

impl Templates {
    /// Reads one prompt per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let prompts: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if prompts.is_empty() {
            return Err(Error::Config(format!("{}: no prompts", path.display())));
        }
        Ok(Self {
            prompts,
            ..Self::default()
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = self.prompts.join("\n");
        s.push('\n');
        s
    }

    /// The prompt used at inference.
    pub fn inference_prompt(&self) -> &str {
        &self.prompts[0]
    }

    pub fn prompt(&self, i: usize) -> &str {
        &self.prompts[i % self.prompts.len()]
    }

    pub fn answer(&self, fake: bool) -> &str {
        if fake {
            &self.fake_answer
        } else {
            &self.real_answer
        }
    }
}

pub struct LmTrace {
    /// Output of each block, `[T, D]`.
    pub layers: Vec<Var>,
    /// Per block, per head `[T, T]` attention weights.
    pub weights: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub context_len: usize,
    pub dim: usize,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &MmConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.text_dim;
        Ok(Self {
            token_embed: store.add("mm.lm.token_embed", GROUP, Tensor::randn(&[VOCAB_SIZE, d], 0.02, rng)),
            pos_embed: store.add(
                "mm.lm.pos_embed",
                GROUP,
                Tensor::randn(&[cfg.context_len, d], 0.02, rng),
            ),
            blocks: (0..cfg.n_lm_layers)
                .map(|i| Block::new(store, &format!("mm.lm.block{i}"), d, cfg.n_lm_heads, GROUP, rng))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new(store, "mm.lm.final_norm", d, GROUP),
            head: Linear::new(store, "mm.lm.head", d, VOCAB_SIZE, false, GROUP, rng),
            context_len: cfg.context_len,
            dim: d,
        })
    }

    pub fn embed(&self, g: &Graph, text: &TextTokens) -> Var {
        let table = g.param(self.token_embed);
        g.gather_rows(table, Arc::new(text.ids.clone()))
    }

    /// Runs the causal stack over an already embedded `[T, D]` sequence.
    pub fn run(&self, g: &Graph, seq: Var) -> Result<LmTrace> {
        let t = g.shape(seq)[0];
        if t > self.context_len {
            return Err(Error::ContextOverflow {
                len: t,
                max: self.context_len,
            });
        }
        let pos = g.param(self.pos_embed);
        let pos = g.slice_rows(pos, 0, t);
        let mut x = g.add(seq, pos);
        let mask = Arc::new(Mask::causal(t));
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut weights = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, w) = b.forward(g, x, Some(mask.clone()), "lm attention")?;
            x = y;
            layers.push(y);
            weights.push(w);
        }
        Ok(LmTrace { layers, weights })
    }

    /// Next-symbol logits `[rows, V]` for hidden states `[rows, D]`.
    pub fn logits(&self, g: &Graph, hidden: Var) -> Result<Var> {
        let h = self.final_norm.forward(g, hidden);
        let logits = self.head.forward(g, h);
        if !g.value(logits).is_finite() {
            return Err(Error::NonFiniteLogits("lm head"));
        }
        Ok(logits)
    }

    /// Every linear map inside the decoder blocks (the output head excluded).
    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.blocks.iter_mut().flat_map(Block::linears_mut)
    }
}
