//! Video-level scoring, AUC, per-subset and robustness reports, the
//! frame-averaging baseline, and embedding/activation exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_attack, derive_seed, fit_to_side, sample_window, AttackKind, AttackParams, AttackSpec, DatasetManifest,
    Frame, Label, Split, VideoClip,
};
use crate::error::{Error, IoContext, Result};
use crate::exec::{self, ExecMode};
use crate::model::Detector;
use crate::nn::{Graph, ParamStore};
use crate::tensor::Tensor;
use crate::uml::{activation_map, MapMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds the single window drawn from each video.
    pub window_seed: u64,
    pub sample_per_subset: usize,
    pub attacks: AttackParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_seed: 0,
            sample_per_subset: 100,
            attacks: AttackParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    pub tags: Vec<String>,
}

impl ScoredSet {
    pub fn auc(&self) -> Result<f64> {
        compute_auc(&self.scores, &self.labels)
    }
}

/// Probability that a fake outranks a real, ties counting one half, from
/// mid-ranks. Computed as the integer `2U` over `2·n_fake·n_real`.
pub fn compute_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Degenerate(format!("score {bad} is not a number")));
    }
    let pos = labels.iter().filter(|l| l.is_fake()).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos as usize,
            negatives: neg as usize,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, with 1-based mid-ranks
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        let in_group = order[i..=j].iter().filter(|&&k| labels[k].is_fake()).count() as u64;
        rank2_sum += mid2 * in_group;
        i = j + 1;
    }
    let u2 = rank2_sum - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// One seeded window of `n` frames cropped to `side`, then the attack, then
/// a resize back to `side` if the attack changed the frame size.
pub fn prepare_window(
    clip: &VideoClip,
    n: usize,
    side: usize,
    window_seed: u64,
    attack: &AttackSpec,
) -> Result<VideoClip> {
    let (_, h, w) = clip.dims();
    let base = if h < side || w < side {
        fit_to_side(clip, side)?
    } else {
        clip.clone()
    };
    let window = sample_window(&base, n, side, derive_seed(window_seed, &clip.source_id))?;
    let attacked = apply_attack(&window, attack)?;
    fit_to_side(&attacked, side)
}

pub fn score_clips(
    model: &Detector,
    store: &ParamStore,
    clips: &[VideoClip],
    window_seed: u64,
    attack: &AttackSpec,
    mode: ExecMode,
) -> Result<Vec<f64>> {
    let n = model.cfg.st.n_frames;
    let side = model.cfg.st.input_side;
    exec::try_map(mode, clips, |c| {
        let w = prepare_window(c, n, side, window_seed, attack)?;
        model.score(store, &w)
    })
}

pub fn scored_set(clips: &[VideoClip], scores: Vec<f64>) -> ScoredSet {
    ScoredSet {
        scores,
        labels: clips.iter().map(|c| c.label).collect(),
        tags: clips.iter().map(|c| c.generator_tag.clone()).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fake generator tag → AUC of that tag's fakes against every real.
    pub per_subset_auc: BTreeMap<String, f64>,
    /// Unweighted mean over subsets.
    pub overall_auc: f64,
    /// Mean over subsets whose tag never appeared in training.
    pub unseen_auc: Option<f64>,
    pub seen_tags: Vec<String>,
    /// Attack kind → overall AUC under that attack.
    pub attack_aucs: BTreeMap<String, f64>,
    pub n_videos: usize,
    pub warnings: Vec<String>,
}

/// Groups a scored set by generator tag.
pub fn subset_report(set: &ScoredSet, seen: &BTreeSet<String>, expected: &BTreeSet<String>) -> Result<EvalReport> {
    let reals: Vec<usize> = (0..set.labels.len()).filter(|&i| !set.labels[i].is_fake()).collect();
    let tags: BTreeSet<&String> = (0..set.labels.len())
        .filter(|&i| set.labels[i].is_fake())
        .map(|i| &set.tags[i])
        .collect();
    if tags.is_empty() || reals.is_empty() {
        return Err(Error::SingleClass {
            positives: set.labels.len() - reals.len(),
            negatives: reals.len(),
        });
    }
    let mut per_subset = BTreeMap::new();
    for tag in &tags {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..set.labels.len() {
            if !set.labels[i].is_fake() || &&set.tags[i] == tag {
                scores.push(set.scores[i]);
                labels.push(set.labels[i]);
            }
        }
        per_subset.insert((*tag).clone(), compute_auc(&scores, &labels)?);
    }
    let overall = per_subset.values().sum::<f64>() / per_subset.len() as f64;
    let unseen: Vec<f64> = per_subset
        .iter()
        .filter(|(t, _)| !seen.contains(*t))
        .map(|(_, a)| *a)
        .collect();
    let warnings = expected
        .iter()
        .filter(|t| !per_subset.contains_key(*t))
        .map(|t| format!("subset `{t}` has no videos in this split"))
        .collect();
    Ok(EvalReport {
        per_subset_auc: per_subset,
        overall_auc: overall,
        unseen_auc: (!unseen.is_empty()).then(|| unseen.iter().sum::<f64>() / unseen.len() as f64),
        seen_tags: seen.iter().cloned().collect(),
        attack_aucs: BTreeMap::new(),
        n_videos: set.scores.len(),
        warnings,
    })
}

fn fake_tags(manifest: &DatasetManifest) -> BTreeSet<String> {
    manifest
        .entries
        .iter()
        .filter(|e| e.label.is_fake())
        .map(|e| e.generator_tag.clone())
        .collect()
}

pub fn load_split(manifest: &DatasetManifest, split: Split, mode: ExecMode) -> Result<Vec<VideoClip>> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!("no `{split}` videos in manifest")));
    }
    exec::try_map(mode, &entries, |e| manifest.load_clip(e))
}

/// Scores one window per video of `split` and reports AUC per generator.
pub fn evaluate(
    manifest: &DatasetManifest,
    split: Split,
    model: &Detector,
    store: &ParamStore,
    cfg: &EvalConfig,
    mode: ExecMode,
) -> Result<EvalReport> {
    let clips = load_split(manifest, split, mode)?;
    evaluate_clips(
        &clips,
        &manifest.seen_tags(),
        &fake_tags(manifest),
        model,
        store,
        cfg,
        &AttackSpec::None,
        mode,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_clips(
    clips: &[VideoClip],
    seen: &BTreeSet<String>,
    expected: &BTreeSet<String>,
    model: &Detector,
    store: &ParamStore,
    cfg: &EvalConfig,
    attack: &AttackSpec,
    mode: ExecMode,
) -> Result<EvalReport> {
    let scores = score_clips(model, store, clips, cfg.window_seed, attack, mode)?;
    subset_report(&scored_set(clips, scores), seen, expected)
}

/// Clean report plus the overall AUC under each attack.
pub fn robustness_eval(
    manifest: &DatasetManifest,
    split: Split,
    model: &Detector,
    store: &ParamStore,
    cfg: &EvalConfig,
    specs: &[AttackSpec],
    mode: ExecMode,
) -> Result<EvalReport> {
    let clips = load_split(manifest, split, mode)?;
    let seen = manifest.seen_tags();
    let expected = fake_tags(manifest);
    let mut report = evaluate_clips(&clips, &seen, &expected, model, store, cfg, &AttackSpec::None, mode)?;
    for spec in specs {
        let r = evaluate_clips(&clips, &seen, &expected, model, store, cfg, spec, mode)?;
        report.attack_aucs.insert(spec.kind().to_string(), r.overall_auc);
    }
    Ok(report)
}

/// Parses a comma-separated attack list (`all` expands to every single
/// attack plus `mixed`; `none` contributes nothing).
pub fn parse_attacks(list: &str, params: &AttackParams) -> Result<Vec<AttackSpec>> {
    let mut kinds = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "all" {
            kinds.extend(AttackKind::SINGLE);
            kinds.push(AttackKind::Mixed);
        } else {
            kinds.push(item.parse::<AttackKind>()?);
        }
    }
    kinds
        .into_iter()
        .filter(|k| *k != AttackKind::None)
        .map(|k| AttackSpec::from_kind(k, params))
        .collect()
}

/// Video score = mean of per-frame scores over the sampled window.
pub fn frame_average_scores<F>(
    clips: &[VideoClip],
    n: usize,
    side: usize,
    window_seed: u64,
    scorer: F,
    mode: ExecMode,
) -> Result<Vec<f64>>
where
    F: Fn(&Frame) -> Result<f64> + Sync + Send,
{
    exec::try_map(mode, clips, |c| {
        let w = prepare_window(c, n.min(c.len()), side, window_seed, &AttackSpec::None)?;
        let mut total = 0.0;
        for f in w.frames() {
            total += scorer(f)?;
        }
        Ok(total / w.len() as f64)
    })
}

pub fn frame_average_baseline<F>(
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    side: usize,
    cfg: &EvalConfig,
    scorer: F,
    mode: ExecMode,
) -> Result<EvalReport>
where
    F: Fn(&Frame) -> Result<f64> + Sync + Send,
{
    let clips = load_split(manifest, split, mode)?;
    let scores = frame_average_scores(&clips, n, side, cfg.window_seed, scorer, mode)?;
    subset_report(&scored_set(&clips, scores), &manifest.seen_tags(), &fake_tags(manifest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    St,
    Multimodal,
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" => Ok(Self::St),
            "multimodal" => Ok(Self::Multimodal),
            other => Err(Error::Config(format!(
                "unknown embedding kind `{other}` (st|multimodal)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub label: Label,
    pub generator_tag: String,
    pub source_id: String,
    pub values: Vec<f64>,
}

/// Up to `per_subset` clips from each generator tag (reals included),
/// chosen with a seeded draw and kept in input order.
pub fn sample_per_subset(clips: &[VideoClip], per_subset: usize, seed: u64) -> Vec<VideoClip> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        groups.entry(c.generator_tag.as_str()).or_default().push(i);
    }
    let mut keep = BTreeSet::new();
    for (tag, idx) in groups {
        if idx.len() <= per_subset {
            keep.extend(idx);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
            keep.extend(sample(&mut rng, idx.len(), per_subset).into_iter().map(|k| idx[k]));
        }
    }
    keep.into_iter().map(|i| clips[i].clone()).collect()
}

/// Pooled `H_ST` (width `M`) or `[H'_lr ; class token of H_v]` (width `D + S`).
pub fn export_embeddings(
    model: &Detector,
    store: &ParamStore,
    clips: &[VideoClip],
    which: EmbeddingKind,
    window_seed: u64,
    mode: ExecMode,
) -> Result<Vec<EmbeddingRow>> {
    let n = model.cfg.st.n_frames;
    let side = model.cfg.st.input_side;
    exec::try_map(mode, clips, |c| {
        let w = prepare_window(c, n, side, window_seed, &AttackSpec::None)?;
        let g = Graph::inference(store);
        let values = match which {
            EmbeddingKind::St => {
                let st = model.st.forward(&g, &w)?;
                let pooled = g.mean_rows(st.h_st);
                let v = g.value(pooled).data().to_vec();
                v
            }
            EmbeddingKind::Multimodal => {
                let mm = model.mm.forward(&g, crate::data::select_key_frame(&w))?;
                let mut v = g.value(mm.reasoning).data().to_vec();
                v.extend_from_slice(g.value(mm.visual).row(0));
                v
            }
        };
        Ok(EmbeddingRow {
            label: c.label,
            generator_tag: c.generator_tag.clone(),
            source_id: c.source_id.clone(),
            values,
        })
    })
}

pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "label".to_string(),
        "generator_tag".to_string(),
        "source_id".to_string(),
    ];
    header.extend((0..width).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.label.as_u8().to_string(),
            r.generator_tag.clone(),
            r.source_id.clone(),
        ];
        rec.extend(r.values.iter().map(|v| format!("{v:.9e}")));
        w.write_record(&rec)?;
    }
    w.flush().at(path)
}

/// Cosine map of the projected reasoning state against the cross-modal
/// patches, and their L2 magnitude map.
pub fn activation_maps(model: &Detector, store: &ParamStore, window: &VideoClip) -> Result<(Tensor, Tensor)> {
    let g = Graph::inference(store);
    let out = model.forward(&g, window)?;
    let reference = g.value(out.uml.reasoning_visual).data().to_vec();
    let patches = g.value(out.uml.patches).clone();
    let cos = activation_map(&reference, &patches, MapMode::Cosine)?;
    if cos.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Degenerate("cosine map outside [-1, 1]".into()));
    }
    let l2 = activation_map(&reference, &patches, MapMode::L2norm)?;
    Ok((cos, l2))
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a))
}

/// Aligned text table: one row per report, columns per subset then the
/// averages with and without seen subsets. AUCs are shown in percent.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut subsets: BTreeSet<&str> = BTreeSet::new();
    let mut attacks: BTreeSet<&str> = BTreeSet::new();
    for (_, r) in rows {
        subsets.extend(r.per_subset_auc.keys().map(String::as_str));
        attacks.extend(r.attack_aucs.keys().map(String::as_str));
    }
    let mut header = vec!["Method".to_string()];
    header.extend(subsets.iter().map(|s| s.to_string()));
    header.push("Average".into());
    header.push("Avg(unseen)".into());
    header.extend(attacks.iter().map(|a| a.to_string()));
    let mut body: Vec<Vec<String>> = Vec::new();
    for (name, r) in rows {
        let mut line = vec![name.to_string()];
        line.extend(subsets.iter().map(|s| fmt_auc(r.per_subset_auc.get(*s).copied())));
        line.push(fmt_auc(Some(r.overall_auc)));
        line.push(fmt_auc(r.unseen_auc));
        line.extend(attacks.iter().map(|a| fmt_auc(r.attack_aucs.get(*a).copied())));
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|l| l[c].len()).chain([header[c].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let mut emit = |cells: &[String]| {
        let line: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    };
    emit(&header);
    emit(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for l in &body {
        emit(l);
    }
    out
}
