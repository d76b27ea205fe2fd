//! JSON-lines dataset manifest and on-disk clip storage.
//!
//! Each manifest line is exactly `{path, label, generator_tag, split}`.
//! A clip is a directory of lossless `frame_NNNN.png` files; `path` is
//! relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attack::{from_bytes, to_bytes};
use super::video::{Frame, Label, VideoClip};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub generator_tag: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub format_version: u32,
    /// Directory clip paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            format_version: MANIFEST_FORMAT_VERSION,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Manifest(format!("duplicate path {}", e.path)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn clip_dir(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_clip(&self, entry: &ManifestEntry) -> Result<VideoClip> {
        let frames = read_frames(&self.clip_dir(entry))?;
        VideoClip::new(frames, entry.label, entry.generator_tag.clone(), entry.path.clone())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes()).at(path)?;
        w.flush().at(path)
    }

    /// Reads a manifest file, or `manifest.jsonl` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let file = fs::File::open(&file_path).at(&file_path)?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.at(&file_path)?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Manifest(format!("{}:{}: {err}", file_path.display(), lineno + 1)))?;
            entries.push(e);
        }
        let root = file_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::new(entries, root)
    }

    /// Fake generator tags seen in training.
    pub fn seen_tags(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| e.split == Split::Train && e.label.is_fake())
            .map(|e| e.generator_tag.clone())
            .collect()
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        let color = match f.channels() {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(Error::InvalidClip(format!("cannot store {n}-channel frame"))),
        };
        image::save_buffer_with_format(
            &path,
            &to_bytes(f),
            f.width() as u32,
            f.height() as u32,
            color,
            image::ImageFormat::Png,
        )?;
    }
    Ok(())
}

pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        let img = image::open(&path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let frame = match img.color().channel_count() {
            1 => from_bytes(&img.to_luma8().into_raw(), 1, h, w),
            _ => from_bytes(&img.to_rgb8().into_raw(), 3, h, w),
        };
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::InvalidClip(format!("no frames found in {}", dir.display())));
    }
    Ok(frames)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn split(k: u8) -> Split {
        match k % 3 {
            0 => Split::Train,
            1 => Split::Val,
            _ => Split::Test,
        }
    }

    proptest! {
        #[test]
        fn manifest_round_trips_through_jsonl(rows in prop::collection::vec((any::<bool>(), "[a-z]{1,8}", any::<u8>()), 1..20)) {
            let entries: Vec<ManifestEntry> = rows
                .iter()
                .enumerate()
                .map(|(i, (fake, tag, k))| ManifestEntry {
                    path: format!("clips/v_{i:04}"),
                    label: if *fake { Label::Fake } else { Label::Real },
                    generator_tag: tag.clone(),
                    split: split(*k),
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let m = DatasetManifest::new(entries.clone(), dir.path()).unwrap();
            let path = dir.path().join(MANIFEST_FILE);
            m.write(&path).unwrap();
            let back = DatasetManifest::read(&path).unwrap();
            prop_assert_eq!(back.entries, entries);
            prop_assert_eq!(back.root, dir.path().to_path_buf());
        }
    }
}
