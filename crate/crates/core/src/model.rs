//! The full detector: spatio-temporal branch over the window, multimodal
//! branch over its key frame, and the fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::data::{select_key_frame, Frame, VideoClip};
use crate::error::{Error, Result};
use crate::mm::{LoraTarget, MmBranch, MmConfig, MmOutput};
use crate::nn::{Graph, ParamStore};
use crate::st::{StBranch, StConfig, StOutput};
use crate::uml::{sigmoid, Uml, UmlConfig, UmlOutput};

/// Architecture sections; their hash identifies compatible checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub st: StConfig,
    pub mm: MmConfig,
    pub uml: UmlConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.st.validate()?;
        self.mm.validate()?;
        self.uml.validate()?;
        if self.st.input_side != self.mm.image_side || self.st.in_channels != self.mm.channels {
            return Err(Error::Config(format!(
                "st input {}x{} and mm input {}x{} must agree",
                self.st.in_channels, self.st.input_side, self.mm.channels, self.mm.image_side
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("model config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

pub struct DetectorOutput {
    pub st: StOutput,
    pub mm: MmOutput,
    pub uml: UmlOutput,
}

impl DetectorOutput {
    pub fn logit(&self) -> Var {
        self.uml.logit
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub st: StBranch,
    pub mm: MmBranch,
    pub uml: Uml,
}

impl Detector {
    /// Fresh weights drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let st = StBranch::new(&mut store, &cfg.st, &mut rng)?;
        let mm = MmBranch::new(&mut store, &cfg.mm, &mut rng)?;
        let uml = Uml::new(
            &mut store,
            &cfg.uml,
            cfg.mm.text_dim,
            cfg.mm.visual_dim,
            cfg.st.token_dim,
            &mut rng,
        )?;
        Ok((
            Self {
                cfg: cfg.clone(),
                st,
                mm,
                uml,
            },
            store,
        ))
    }

    /// Attaches LM adapters of the configured rank, seeded by `seed`.
    pub fn apply_lora(&mut self, store: &mut ParamStore, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4C6F_5241);
        self.mm
            .apply_lora(store, self.cfg.mm.lora_rank, LoraTarget::LmLinearLayers, &mut rng)
    }

    pub fn forward(&self, g: &Graph, window: &VideoClip) -> Result<DetectorOutput> {
        let st = self.st.forward(g, window)?;
        let mm = self.mm.forward(g, select_key_frame(window))?;
        let uml = self.uml.forward(g, mm.reasoning, mm.visual, st.h_st)?;
        Ok(DetectorOutput { st, mm, uml })
    }

    /// Fake probability for one prepared window.
    pub fn score(&self, store: &ParamStore, window: &VideoClip) -> Result<f64> {
        let g = Graph::inference(store);
        let out = self.forward(&g, window)?;
        let logit = g.value(out.logit()).item();
        Ok(sigmoid(logit))
    }

    /// Scores a single frame as a static window (the frame repeated).
    pub fn score_frame(&self, store: &ParamStore, frame: &Frame) -> Result<f64> {
        let clip = VideoClip::new(
            vec![frame.clone(); self.cfg.st.n_frames],
            crate::data::Label::Real,
            "",
            "",
        )?;
        self.score(store, &clip)
    }
}
