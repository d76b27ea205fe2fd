//! Checkpoint directories.
//!
//! ```text
//! <dir>/meta.json          format version, config hash, stage, step, rng, early stop
//! <dir>/config.toml        full configuration snapshot
//! <dir>/params/<group>.bin parameters of one ownership group
//! <dir>/optimizer.bin      Adam moments (`m/<name>`, `v/<name>`)
//! <dir>/loss.csv           step,l_ce,l_cont,total,val_auc
//! ```
//!
//! Tensor files start with the magic `MMFP` and a `u32` version, then a
//! `u32` tensor count; each tensor is a `u32`-length UTF-8 name, a `u32`
//! rank, `u64` dims and little-endian `f64` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::GlobalConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::{Detector, ModelConfig};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::train::{read_loss_csv, write_loss_csv, Adam, EarlyStop, Stage, TrainState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MMFP";
const TENSOR_FILE_VERSION: u32 = 1;

pub const META_FILE: &str = "meta.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const PARAMS_DIR: &str = "params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Hash of the architecture sections of the configuration.
    pub config_hash: String,
    pub stage: Stage,
    pub step: usize,
    pub optimizer_step: u64,
    pub rng: ChaCha8Rng,
    pub early_stop: EarlyStop,
    pub lora: bool,
    pub groups: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GlobalConfig,
    pub detector: Detector,
    pub store: ParamStore,
    pub state: TrainState,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_tensors(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let truncated = || bad(path, "truncated tensor file");
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad(path, "not a tensor file"));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != TENSOR_FILE_VERSION {
        return Err(bad(
            path,
            format!("tensor file version {version}, expected {TENSOR_FILE_VERSION}"),
        ));
    }
    let count = c.u32().ok_or_else(truncated)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(truncated)?)
            .map_err(|_| bad(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad(path, format!("{name}: shape {shape:?} overflows")))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.at != bytes.len() {
        return Err(bad(path, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

fn group_file(dir: &Path, group: ParamGroup) -> PathBuf {
    dir.join(PARAMS_DIR).join(format!("{}.bin", group.name()))
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        let groups = ParamGroup::ALL
            .into_iter()
            .filter(|&g| !self.store.ids_in(g).is_empty())
            .map(|g| g.name().to_string())
            .collect();
        CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: self.config.model().hash(),
            stage: self.state.stage,
            step: self.state.step,
            optimizer_step: self.state.optimizer.t,
            rng: self.state.rng.clone(),
            early_stop: self.state.early_stop.clone(),
            lora: self.detector.mm.has_lora(),
            groups,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(PARAMS_DIR)).at(dir)?;
        for group in ParamGroup::ALL {
            let ids = self.store.ids_in(group);
            if ids.is_empty() {
                continue;
            }
            let tensors: Vec<(&str, &Tensor)> = ids
                .iter()
                .map(|&id| (self.store.name(id), self.store.get(id)))
                .collect();
            let path = group_file(dir, group);
            fs::write(&path, encode_tensors(&tensors)).at(&path)?;
        }
        let names: Vec<(String, &Tensor)> = self
            .state
            .optimizer
            .moments
            .iter()
            .flat_map(|(name, (m, v))| [(format!("m/{name}"), m), (format!("v/{name}"), v)])
            .collect();
        let tensors: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let path = dir.join(OPTIMIZER_FILE);
        fs::write(&path, encode_tensors(&tensors)).at(&path)?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.config.to_toml()).at(&path)?;
        write_loss_csv(&dir.join(LOSS_FILE), &self.state.trace)?;
        let path = dir.join(META_FILE);
        let mut meta = serde_json::to_string_pretty(&self.meta())?;
        meta.push('\n');
        fs::write(&path, meta).at(&path)?;
        Ok(())
    }

    /// Loads `dir`. With `expected`, a checkpoint built for a different
    /// architecture is refused before anything else is read.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.is_file() {
            return Err(bad(dir, "no checkpoint here (meta.json missing)"));
        }
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path).at(&meta_path)?)
            .map_err(|e| bad(&meta_path, e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(
                &meta_path,
                format!(
                    "format version {}, expected {CHECKPOINT_FORMAT_VERSION}",
                    meta.format_version
                ),
            ));
        }
        if let Some(cfg) = expected {
            let want = cfg.hash();
            if want != meta.config_hash {
                return Err(Error::ConfigMismatch {
                    expected: want,
                    found: meta.config_hash,
                });
            }
        }
        let config_path = dir.join(CONFIG_FILE);
        let config = GlobalConfig::load(&config_path)?;
        if config.model().hash() != meta.config_hash {
            return Err(bad(&config_path, "config snapshot does not match the recorded hash"));
        }

        let (mut detector, mut store) = Detector::new(&config.model(), 0)?;
        if meta.lora {
            detector.apply_lora(&mut store, 0)?;
        }
        let mut staged: BTreeMap<String, Tensor> = BTreeMap::new();
        for name in &meta.groups {
            let group = ParamGroup::ALL
                .into_iter()
                .find(|g| g.name() == name)
                .ok_or_else(|| bad(&meta_path, format!("unknown group `{name}`")))?;
            let path = group_file(dir, group);
            let bytes = fs::read(&path).at(&path)?;
            for (pname, t) in decode_tensors(&bytes, &path)? {
                let id = store
                    .id(&pname)
                    .ok_or_else(|| bad(&path, format!("unexpected parameter `{pname}`")))?;
                if store.group(id) != group {
                    return Err(bad(&path, format!("`{pname}` stored under the wrong group")));
                }
                if store.get(id).shape() != t.shape() {
                    return Err(bad(
                        &path,
                        format!(
                            "`{pname}` has shape {:?}, expected {:?}",
                            t.shape(),
                            store.get(id).shape()
                        ),
                    ));
                }
                staged.insert(pname, t);
            }
        }
        if let Some(missing) = store.entries().iter().find(|e| !staged.contains_key(&e.name)) {
            return Err(bad(dir, format!("parameter `{}` missing", missing.name)));
        }

        let opt_path = dir.join(OPTIMIZER_FILE);
        let bytes = fs::read(&opt_path).at(&opt_path)?;
        let mut firsts: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut seconds: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in decode_tensors(&bytes, &opt_path)? {
            let (slot, pname) = match name.split_once('/') {
                Some(("m", p)) => (&mut firsts, p),
                Some(("v", p)) => (&mut seconds, p),
                _ => return Err(bad(&opt_path, format!("unexpected entry `{name}`"))),
            };
            let id = store
                .id(pname)
                .ok_or_else(|| bad(&opt_path, format!("moment for unknown parameter `{pname}`")))?;
            if store.get(id).shape() != t.shape() {
                return Err(bad(&opt_path, format!("moment `{name}` has the wrong shape")));
            }
            slot.insert(pname.to_string(), t);
        }
        if firsts.len() != seconds.len() || firsts.keys().any(|k| !seconds.contains_key(k)) {
            return Err(bad(&opt_path, "first and second moments do not pair up"));
        }
        let moments = firsts
            .into_iter()
            .map(|(k, m)| {
                let v = seconds.remove(&k).unwrap();
                (k, (m, v))
            })
            .collect();
        let trace = read_loss_csv(&dir.join(LOSS_FILE))?;

        for (name, t) in staged {
            let id = store.id(&name).unwrap();
            store.set(id, t);
        }
        Ok(Self {
            config,
            detector,
            store,
            state: TrainState {
                stage: meta.stage,
                step: meta.step,
                rng: meta.rng,
                optimizer: Adam {
                    t: meta.optimizer_step,
                    moments,
                },
                trace,
                early_stop: meta.early_stop,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Frame, Label, VideoClip};
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let config = GlobalConfig::default();
        let (mut detector, mut store) = Detector::new(&config.model(), 3).unwrap();
        detector.apply_lora(&mut store, 3).unwrap();
        let mut state = TrainState::fresh(Stage::EndToEnd, 3);
        let id = store.ids_in(ParamGroup::Head)[0];
        state.optimizer.moments.insert(
            store.name(id).to_string(),
            (
                Tensor::full(store.get(id).shape(), 0.25),
                Tensor::full(store.get(id).shape(), 1e-9),
            ),
        );
        state.optimizer.t = 4;
        state.step = 4;
        rand::RngCore::next_u64(&mut state.rng);
        Checkpoint {
            config,
            detector,
            store,
            state,
        }
    }

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for sub in [dir.to_path_buf(), dir.join(PARAMS_DIR)] {
            for e in fs::read_dir(&sub).unwrap() {
                let p = e.unwrap().path();
                if p.is_file() {
                    out.insert(
                        p.strip_prefix(dir).unwrap().display().to_string(),
                        fs::read(&p).unwrap(),
                    );
                }
            }
        }
        out
    }

    #[test]
    fn tensor_files_round_trip_and_reject_damage() {
        let a = Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap();
        let b = Tensor::scalar(0.1);
        let bytes = encode_tensors(&[("a", &a), ("b.c", &b)]);
        let p = Path::new("x.bin");
        let back = decode_tensors(&bytes, p).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.c".to_string(), b)]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_tensors(&extra, p).is_err());
        assert!(decode_tensors(b"NOPE", p).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        ck.save(d1.path()).unwrap();
        let back = Checkpoint::load(d1.path(), Some(&ck.config.model())).unwrap();
        assert_eq!(back, ck);
        back.save(d2.path()).unwrap();
        assert_eq!(dir_bytes(d1.path()), dir_bytes(d2.path()));
    }

    #[test]
    fn forward_is_bit_identical_after_reload() {
        let ck = sample();
        let d = tempfile::tempdir().unwrap();
        ck.save(d.path()).unwrap();
        let back = Checkpoint::load(d.path(), None).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let frames = (0..4)
            .map(|_| {
                let v = (0..3 * 32 * 32).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
                Frame::new(3, 32, 32, v).unwrap()
            })
            .collect();
        let clip = VideoClip::new(frames, Label::Fake, "g", "c").unwrap();
        let a = ck.detector.score(&ck.store, &clip).unwrap();
        let b = back.detector.score(&back.store, &clip).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mismatched_config_is_refused() {
        let ck = sample();
        let d = tempfile::tempdir().unwrap();
        ck.save(d.path()).unwrap();
        let mut other = ck.config.model();
        other.uml.fusion_dim = 32;
        assert!(matches!(
            Checkpoint::load(d.path(), Some(&other)),
            Err(Error::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn missing_or_damaged_checkpoints_name_the_path() {
        let d = tempfile::tempdir().unwrap();
        let gone = d.path().join("nothing");
        let err = Checkpoint::load(&gone, None).unwrap_err();
        assert!(err.to_string().contains("nothing"), "{err}");

        let ck = sample();
        ck.save(d.path()).unwrap();
        let head = group_file(d.path(), ParamGroup::Head);
        let bytes = fs::read(&head).unwrap();
        fs::write(&head, &bytes[..bytes.len() - 8]).unwrap();
        let err = Checkpoint::load(d.path(), None).unwrap_err();
        assert!(err.to_string().contains("head.bin"), "{err}");
    }
}
