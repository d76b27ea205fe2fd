//! The run configuration file.
//!
//! A TOML document with the sections `[data]`, `[st]`, `[mm]`, `[uml]`,
//! `[train]` (with `[train.stage1]` and `[train.stage2]`) and `[eval]`
//! (with `[eval.attacks]`). Every key is optional and falls back to its
//! documented default; unknown keys are rejected. When no path is given,
//! the `MMFORGE_CONFIG` environment variable is consulted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, IoContext, Result};
use crate::eval::EvalConfig;
use crate::mm::MmConfig;
use crate::model::ModelConfig;
use crate::st::StConfig;
use crate::train::TrainConfig;
use crate::uml::UmlConfig;

pub const CONFIG_ENV: &str = "MMFORGE_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub data: SynthConfig,
    pub st: StConfig,
    pub mm: MmConfig,
    pub uml: UmlConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl GlobalConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The file named by `explicit`, else by `MMFORGE_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match Self::source(explicit) {
            Some(path) => Self::load(&path),
            None => Ok(Self::default()),
        }
    }

    pub fn source(explicit: Option<&Path>) -> Option<PathBuf> {
        explicit.map(Path::to_path_buf).or_else(|| {
            std::env::var_os(CONFIG_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            st: self.st.clone(),
            mm: self.mm.clone(),
            uml: self.uml.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model().validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = GlobalConfig::default();
        let text = cfg.to_toml();
        assert_eq!(GlobalConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[train.stage2]"));
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = GlobalConfig::from_toml("[train.stage2]\nlambda = 0.5\n[data]\nseed = 3\n").unwrap();
        assert_eq!(cfg.train.stage2.lambda, 0.5);
        assert_eq!(cfg.train.stage2.lr, 1e-4);
        assert_eq!(cfg.data.seed, 3);
        assert_eq!(cfg.st, StConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nlearning_rate = 1.0\n", "[nope]\n", "[st]\ntoken_dims = 4\n"] {
            assert!(matches!(GlobalConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn explicit_path_beats_environment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.toml");
        fs::write(&p, "[eval]\nwindow_seed = 9\n").unwrap();
        assert_eq!(GlobalConfig::resolve(Some(&p)).unwrap().eval.window_seed, 9);
        assert_eq!(GlobalConfig::source(Some(&p)), Some(p));
    }
}
