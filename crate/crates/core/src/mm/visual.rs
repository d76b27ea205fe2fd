//! Frozen patch-embedding vision transformer.

use rand::Rng;

use super::{Block, MmConfig};
use crate::autograd::Var;
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

const GROUP: ParamGroup = ParamGroup::VisualEncoder;

#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    image_side: usize,
    patch_side: usize,
    channels: usize,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &MmConfig, rng: &mut R) -> Result<Self> {
        let s = cfg.visual_dim;
        let patch_len = cfg.channels * cfg.visual_patch * cfg.visual_patch;
        let patch_embed = Linear::new(store, "mm.visual.patch_embed", patch_len, s, true, GROUP, rng);
        let cls = store.add("mm.visual.cls", GROUP, Tensor::randn(&[1, s], 0.02, rng));
        let pos = store.add(
            "mm.visual.pos",
            GROUP,
            Tensor::randn(&[cfg.visual_seq_len(), s], 0.02, rng),
        );
        let blocks = (0..cfg.visual_layers)
            .map(|i| Block::new(store, &format!("mm.visual.block{i}"), s, cfg.visual_heads, GROUP, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed,
            cls,
            pos,
            blocks,
            image_side: cfg.image_side,
            patch_side: cfg.visual_patch,
            channels: cfg.channels,
        })
    }

    /// `[L−1, C·p·p]` flattened patches, row-major over the grid.
    fn patches(&self, g: &Graph, frame: &Frame) -> Result<Var> {
        if frame.channels() != self.channels || frame.height() != self.image_side || frame.width() != self.image_side {
            return Err(Error::Shape(format!(
                "visual encoder expects {}x{}x{} frames, got {}x{}x{}",
                self.channels,
                self.image_side,
                self.image_side,
                frame.channels(),
                frame.height(),
                frame.width()
            )));
        }
        let p = self.patch_side;
        let grid = self.image_side / p;
        let mut data = Vec::with_capacity(grid * grid * self.channels * p * p);
        for py in 0..grid {
            for px in 0..grid {
                for c in 0..self.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            data.push(frame.get(c, py * p + dy, px * p + dx) as f64);
                        }
                    }
                }
            }
        }
        Ok(g.constant(Tensor::new(&[grid * grid, self.channels * p * p], data)?))
    }

    /// Hidden states after each of the first `depth` blocks; entry 0 is the
    /// embedding layer.
    pub fn hidden_states(&self, g: &Graph, frame: &Frame, depth: usize) -> Result<Vec<Var>> {
        let patches = self.patches(g, frame)?;
        let emb = self.patch_embed.forward(g, patches);
        let cls = g.param(self.cls);
        let x = g.concat_rows(&[cls, emb]);
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos);
        let mut states = vec![x];
        for b in self.blocks.iter().take(depth) {
            x = b.forward(g, x, None, "visual attention")?.0;
            states.push(x);
        }
        Ok(states)
    }

    /// `[L, S]` visual tokens from the second-to-last layer; row 0 is the
    /// class token.
    pub fn encode(&self, g: &Graph, frame: &Frame) -> Result<Var> {
        let depth = self.blocks.len().saturating_sub(1);
        let states = self.hidden_states(g, frame, depth)?;
        Ok(*states.last().unwrap())
    }
}
