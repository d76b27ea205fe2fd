//! Two-stage training. Stage 1 instruction-tunes the multimodal branch on
//! templated prompt/answer pairs; stage 2 trains the spatio-temporal branch,
//! the fusion module, the classifier and the reasoning token with the joint
//! contrastive plus cross-entropy loss.
//!
//! A batch is processed clip by clip: every clip gets its own graph (these
//! run concurrently), the batch losses are computed on a small tape over
//! copies of the per-clip outputs, and their gradients are pushed back into
//! each clip graph. Parameter gradients are summed in batch order, so
//! sequential and parallel runs are bit-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::GlobalConfig;
use crate::data::{
    derive_seed, fit_to_side, sample_window, select_key_frame, AttackSpec, DatasetManifest, Split, VideoClip,
};
use crate::error::{Error, IoContext, Result};
use crate::eval::{compute_auc, score_clips};
use crate::exec::{self, ExecMode};
use crate::model::Detector;
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, TrainableSet};
use crate::tensor::Tensor;
use crate::uml::contrastive_loss;

/// Probabilities are clamped to `[ε, 1−ε]` before the logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    Instruction = 1,
    EndToEnd = 2,
}

impl TryFrom<u8> for Stage {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Instruction),
            2 => Ok(Stage::EndToEnd),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Named trainable sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// LoRA adapters and the visual projector.
    Instruction,
    /// Spatio-temporal branch, fusion module, classifier, reasoning token.
    EndToEnd,
}

impl FreezePolicy {
    pub fn trainable(self) -> TrainableSet {
        match self {
            FreezePolicy::Instruction => TrainableSet::of(&[ParamGroup::Lora, ParamGroup::Projector]),
            FreezePolicy::EndToEnd => TrainableSet::of(&[
                ParamGroup::StBranch,
                ParamGroup::ReasoningToken,
                ParamGroup::Uml,
                ParamGroup::Head,
            ]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub freeze_policy: FreezePolicy,
}

impl Default for InstructionConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 6,
            max_steps: 200,
            freeze_policy: FreezePolicy::Instruction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndToEndConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the contrastive term.
    pub lambda: f64,
    pub max_steps: usize,
    /// Validation AUC is computed every this many steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Share of the training split held out when the manifest has no
    /// validation split.
    pub val_fraction: f64,
    pub freeze_policy: FreezePolicy,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 6,
            lambda: 1.0,
            max_steps: 2000,
            eval_every: 100,
            patience: 5,
            val_fraction: 0.1,
            freeze_policy: FreezePolicy::EndToEnd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct TrainConfig {
    /// Seeds weight initialization and the per-stage sampling streams.
    pub seed: u64,
    pub stage1: InstructionConfig,
    pub stage2: EndToEndConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        for (what, lr) in [("stage1.lr", s1.lr), ("stage2.lr", s2.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{what} must be a positive number, got {lr}")));
            }
        }
        if s1.batch_size == 0 {
            return Err(Error::Config("stage1.batch_size must be >= 1".into()));
        }
        if s2.batch_size < 2 {
            return Err(Error::Config(
                "stage2.batch_size must be >= 2 for the contrastive loss".into(),
            ));
        }
        if !(s2.lambda >= 0.0 && s2.lambda.is_finite()) {
            return Err(Error::Config(format!("stage2.lambda must be >= 0, got {}", s2.lambda)));
        }
        if s2.eval_every == 0 || s2.patience == 0 {
            return Err(Error::Config(
                "stage2.eval_every and stage2.patience must be >= 1".into(),
            ));
        }
        if !(s2.val_fraction > 0.0 && s2.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "stage2.val_fraction {} outside (0,1)",
                s2.val_fraction
            )));
        }
        Ok(())
    }

    fn batch_size(&self, stage: Stage) -> usize {
        match stage {
            Stage::Instruction => self.stage1.batch_size,
            Stage::EndToEnd => self.stage2.batch_size,
        }
    }

    fn max_steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Instruction => self.stage1.max_steps,
            Stage::EndToEnd => self.stage2.max_steps,
        }
    }

    fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Instruction => self.stage1.lr,
            Stage::EndToEnd => self.stage2.lr,
        }
    }

    fn policy(&self, stage: Stage) -> FreezePolicy {
        match stage {
            Stage::Instruction => self.stage1.freeze_policy,
            Stage::EndToEnd => self.stage2.freeze_policy,
        }
    }
}

/// `λ·l_cont − (y·ln ŷ + (1−y)·ln(1−ŷ))` with `ŷ` clamped to `[ε, 1−ε]`.
pub fn compute_total_loss(y_hat: f64, y: u8, l_cont: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&y_hat) {
        return Err(Error::Degenerate(format!("probability {y_hat} outside [0,1]")));
    }
    if y > 1 {
        return Err(Error::Degenerate(format!("label {y} is not 0 or 1")));
    }
    let p = y_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let ce = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
    Ok(lambda * l_cont + ce)
}

/// Mean binary cross-entropy of `logits` (`[B, 1]`) against 0/1 `labels`.
pub fn bce_loss(g: &Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape != [labels.len(), 1] {
        return Err(Error::Shape(format!("{} labels for logits {shape:?}", labels.len())));
    }
    let b = labels.len();
    let p = g.clamp(g.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS);
    // q = p for fakes and 1 − p for reals
    let sign = g.constant(Tensor::new(
        &[b, 1],
        labels.iter().map(|&y| 2.0 * y as f64 - 1.0).collect(),
    )?);
    let offset = g.constant(Tensor::new(&[b, 1], labels.iter().map(|&y| 1.0 - y as f64).collect())?);
    let q = g.add(g.mul(p, sign), offset);
    let mean = g.mean(g.log(q));
    Ok(g.scale(mean, -1.0))
}

/// `λ·l_cont + l_ce` on the tape.
pub fn joint_loss(g: &Tape, l_ce: Var, l_cont: Var, lambda: f64) -> Var {
    g.add(g.scale(l_cont, lambda), l_ce)
}

/// Adam with `(β1, β2) = (0.9, 0.999)`, `ε = 1e-8`, no weight decay.
/// Moments are keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (id, grad) in grads {
            let name = store.name(*id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let p = store.get_mut(*id);
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                md[i] = Self::BETA1 * md[i] + (1.0 - Self::BETA1) * gi;
                vd[i] = Self::BETA2 * vd[i] + (1.0 - Self::BETA2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_ce: f64,
    pub l_cont: f64,
    pub total: f64,
    pub val_auc: Option<f64>,
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Stops after `patience` evaluations without a new best validation AUC.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub best_auc: Option<f64>,
    pub best_step: usize,
    pub bad_evals: usize,
    pub stopped: bool,
}

impl EarlyStop {
    pub fn observe(&mut self, step: usize, auc: f64, patience: usize) {
        if self.best_auc.is_none_or(|b| auc > b) {
            self.best_auc = Some(auc);
            self.best_step = step;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
            if self.bad_evals >= patience {
                self.stopped = true;
            }
        }
    }
}

/// Everything that evolves during one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: Adam,
    pub trace: Vec<LossRecord>,
    pub early_stop: EarlyStop,
}

impl TrainState {
    pub fn fresh(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("stage{stage}"))),
            optimizer: Adam::new(),
            trace: Vec::new(),
            early_stop: EarlyStop::default(),
        }
    }
}

/// Train/validation clips. The manifest's validation split is used when it
/// has both classes; otherwise a seeded share of the training split is held out.
pub fn training_splits(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
    mode: ExecMode,
) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    let mut train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptyDataset("no `train` videos in manifest".into()));
    }
    let mut val = manifest.split(Split::Val);
    let both = |es: &[&crate::data::ManifestEntry]| {
        es.iter().any(|e| e.label.is_fake()) && es.iter().any(|e| !e.label.is_fake())
    };
    if !both(&val) {
        train.sort_by_key(|e| derive_seed(seed, &e.path));
        let k = ((train.len() as f64 * val_fraction).ceil() as usize).clamp(1, train.len() - 1);
        val = train.split_off(train.len() - k);
        train.sort_by(|a, b| a.path.cmp(&b.path));
        val.sort_by(|a, b| a.path.cmp(&b.path));
    }
    let load = |es: &[&crate::data::ManifestEntry]| exec::try_map(mode, es, |e| manifest.load_clip(e));
    Ok((load(&train)?, load(&val)?))
}

/// Random `n`-frame window at the model's input side.
pub fn training_window(clip: &VideoClip, n: usize, side: usize, seed: u64) -> Result<VideoClip> {
    let (_, h, w) = clip.dims();
    if h < side || w < side {
        sample_window(&fit_to_side(clip, side)?, n, side, seed)
    } else {
        sample_window(clip, n, side, seed)
    }
}

struct ClipPass<'a> {
    graph: Graph<'a>,
    /// Per-clip outputs that the batch losses consume.
    outputs: Vec<Var>,
}

/// Sums per-clip parameter gradients in batch order.
fn reduce(per_clip: Vec<Vec<(ParamId, Tensor)>>) -> Vec<(ParamId, Tensor)> {
    let mut acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    for clip in per_clip {
        for (id, g) in clip {
            match acc.get_mut(&id) {
                Some(t) => t.add_assign(&g),
                None => {
                    acc.insert(id, g);
                }
            }
        }
    }
    acc.into_iter().collect()
}

/// Mean answer NLL over a batch of windows (prompt `prompts[i]` for window
/// `i`) and the summed parameter gradients.
pub fn instruction_gradients(
    detector: &Detector,
    store: &ParamStore,
    windows: &[VideoClip],
    prompts: &[usize],
    trainable: TrainableSet,
    mode: ExecMode,
) -> Result<(LossRecord, Vec<(ParamId, Tensor)>)> {
    if windows.is_empty() || windows.len() != prompts.len() {
        return Err(Error::EmptyDataset(format!(
            "{} windows for {} prompts",
            windows.len(),
            prompts.len()
        )));
    }
    let b = windows.len() as f64;
    let items: Vec<(&VideoClip, usize)> = windows.iter().zip(prompts.iter().copied()).collect();
    let per_clip = exec::try_map(mode, &items, |&(w, p)| -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mm = &detector.mm;
        let g = Graph::new(store, trainable);
        let answer = mm.templates.answer(w.label.is_fake());
        let loss = mm.instruction_loss(&g, select_key_frame(w), mm.templates.prompt(p), answer)?;
        let value = g.value(loss).item();
        let grads = g.backward_from(&[(loss, Tensor::scalar(1.0 / b))]);
        Ok((value, g.param_grads(&grads)))
    })?;
    let l_ce = per_clip.iter().map(|(v, _)| v).sum::<f64>() / b;
    let grads = reduce(per_clip.into_iter().map(|(_, g)| g).collect());
    let record = LossRecord {
        step: 0,
        l_ce,
        l_cont: 0.0,
        total: l_ce,
        val_auc: None,
    };
    Ok((record, grads))
}

/// Joint loss `λ·L_cont + L_ce` of a batch of prepared windows and the
/// summed parameter gradients.
pub fn end_to_end_gradients(
    detector: &Detector,
    store: &ParamStore,
    windows: &[VideoClip],
    trainable: TrainableSet,
    lambda: f64,
    temperature: f64,
    mode: ExecMode,
) -> Result<(LossRecord, Vec<(ParamId, Tensor)>)> {
    let passes = exec::try_map(mode, windows, |w| -> Result<ClipPass> {
        let graph = Graph::new(store, trainable);
        let out = detector.forward(&graph, w)?;
        let outputs = vec![out.uml.cls, out.uml.reasoning_visual, out.logit()];
        Ok(ClipPass { graph, outputs })
    })?;

    let tape = Tape::new();
    let stacked: Vec<Var> = (0..3)
        .map(|k| {
            let rows: Vec<Vec<f64>> = passes
                .iter()
                .map(|p| p.graph.value(p.outputs[k]).data().to_vec())
                .collect();
            Ok(tape.leaf(Tensor::from_rows(&rows)?, true))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = windows.iter().map(|w| w.label.as_u8()).collect();
    let l_cont = contrastive_loss(&tape, stacked[0], stacked[1], temperature)?;
    let l_ce = bce_loss(&tape, stacked[2], &labels)?;
    let total = joint_loss(&tape, l_ce, l_cont, lambda);
    let record = LossRecord {
        step: 0,
        l_ce: tape.value(l_ce).item(),
        l_cont: tape.value(l_cont).item(),
        total: tape.value(total).item(),
        val_auc: None,
    };
    if !record.total.is_finite() {
        return Err(Error::Degenerate(format!("non-finite loss {}", record.total)));
    }
    let grads = tape.backward(total);
    let row_grads: Vec<Tensor> = stacked
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&tape.shape(v))))
        .collect();

    let seeded: Vec<(ClipPass, Vec<Tensor>)> = passes
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let seeds = row_grads
                .iter()
                .map(|g| Tensor::new(&[1, g.cols()], g.row(i).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok((p, seeds))
        })
        .collect::<Result<_>>()?;
    let per_clip = exec::map_owned(mode, seeded, |(p, seeds)| {
        let pairs: Vec<(Var, Tensor)> = p
            .outputs
            .iter()
            .copied()
            .zip(seeds)
            .filter(|(v, _)| p.graph.requires_grad(*v))
            .collect();
        if pairs.is_empty() {
            return Vec::new();
        }
        let grads = p.graph.backward_from(&pairs);
        p.graph.param_grads(&grads)
    });
    Ok((record, reduce(per_clip)))
}

pub struct Trainer {
    pub checkpoint: Checkpoint,
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
    pub mode: ExecMode,
}

impl Trainer {
    /// Fresh weights (with LoRA adapters attached) seeded by `train.seed`.
    pub fn new(config: GlobalConfig, stage: Stage, manifest: &DatasetManifest, mode: ExecMode) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let (mut detector, mut store) = Detector::new(&config.model(), seed)?;
        detector.apply_lora(&mut store, seed)?;
        let checkpoint = Checkpoint {
            state: TrainState::fresh(stage, seed),
            config,
            detector,
            store,
        };
        Self::with_checkpoint(checkpoint, manifest, mode)
    }

    /// Continues `checkpoint` under `config`. A checkpoint from the same
    /// stage resumes its optimizer, sampling stream and trace; a stage-1
    /// checkpoint starts stage 2 from its weights.
    pub fn resume(
        mut checkpoint: Checkpoint,
        config: GlobalConfig,
        stage: Stage,
        manifest: &DatasetManifest,
        mode: ExecMode,
    ) -> Result<Self> {
        config.validate()?;
        let (expected, found) = (config.model().hash(), checkpoint.config.model().hash());
        if expected != found {
            return Err(Error::ConfigMismatch { expected, found });
        }
        match (checkpoint.state.stage, stage) {
            (a, b) if a == b => {}
            (Stage::Instruction, Stage::EndToEnd) => {
                checkpoint.state = TrainState::fresh(stage, config.train.seed);
            }
            (a, b) => {
                return Err(Error::Config(format!(
                    "cannot run stage {b} from a stage {a} checkpoint"
                )));
            }
        }
        checkpoint.config = config;
        Self::with_checkpoint(checkpoint, manifest, mode)
    }

    fn with_checkpoint(checkpoint: Checkpoint, manifest: &DatasetManifest, mode: ExecMode) -> Result<Self> {
        let cfg = &checkpoint.config.train;
        let (train, val) = training_splits(manifest, cfg.stage2.val_fraction, cfg.seed, mode)?;
        let b = cfg.batch_size(checkpoint.state.stage);
        if train.len() < b {
            return Err(Error::EmptyDataset(format!(
                "{} training videos cannot fill a batch of {b}",
                train.len()
            )));
        }
        Ok(Self {
            checkpoint,
            train,
            val,
            mode,
        })
    }

    pub fn stage(&self) -> Stage {
        self.checkpoint.state.stage
    }

    pub fn detector(&self) -> &Detector {
        &self.checkpoint.detector
    }

    pub fn store(&self) -> &ParamStore {
        &self.checkpoint.store
    }

    pub fn trace(&self) -> &[LossRecord] {
        &self.checkpoint.state.trace
    }

    pub fn done(&self) -> bool {
        let s = &self.checkpoint.state;
        s.early_stop.stopped || s.step >= self.checkpoint.config.train.max_steps(s.stage)
    }

    /// Batch indices and one window seed per clip, drawn from the stage stream.
    fn draw_batch(&mut self) -> Vec<(usize, u64)> {
        let b = self.checkpoint.config.train.batch_size(self.stage());
        let rng = &mut self.checkpoint.state.rng;
        let picks = sample(rng, self.train.len(), b).into_vec();
        picks.into_iter().map(|i| (i, rng.random::<u64>())).collect()
    }

    /// One optimizer step; returns the logged record.
    pub fn step(&mut self) -> Result<LossRecord> {
        let batch = self.draw_batch();
        let mut record = match self.stage() {
            Stage::Instruction => {
                let prompts: Vec<usize> = {
                    let n = self.checkpoint.detector.mm.templates.prompts.len();
                    let rng = &mut self.checkpoint.state.rng;
                    batch.iter().map(|_| rng.random_range(0..n)).collect()
                };
                self.instruction_step(&batch, &prompts)?
            }
            Stage::EndToEnd => self.end_to_end_step(&batch)?,
        };
        let state = &mut self.checkpoint.state;
        state.step += 1;
        record.step = state.step;
        let s2 = &self.checkpoint.config.train.stage2;
        if state.stage == Stage::EndToEnd && state.step.is_multiple_of(s2.eval_every) {
            let auc = self.validation_auc()?;
            record.val_auc = Some(auc);
            let patience = self.checkpoint.config.train.stage2.patience;
            self.checkpoint.state.early_stop.observe(record.step, auc, patience);
        }
        self.checkpoint.state.trace.push(record.clone());
        Ok(record)
    }

    /// Steps until the step budget is spent or early stopping triggers.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        while !self.done() {
            let r = self.step()?;
            on_step(&r);
        }
        Ok(())
    }

    pub fn validation_auc(&self) -> Result<f64> {
        let ck = &self.checkpoint;
        let scores = score_clips(
            &ck.detector,
            &ck.store,
            &self.val,
            ck.config.eval.window_seed,
            &AttackSpec::None,
            self.mode,
        )?;
        let labels: Vec<_> = self.val.iter().map(|c| c.label).collect();
        compute_auc(&scores, &labels)
    }

    fn windows(&self, batch: &[(usize, u64)]) -> Result<Vec<VideoClip>> {
        let n = self.checkpoint.config.st.n_frames;
        let side = self.checkpoint.config.st.input_side;
        exec::try_map(self.mode, batch, |&(i, seed)| {
            training_window(&self.train[i], n, side, seed)
        })
    }

    fn trainable(&self) -> TrainableSet {
        self.checkpoint.config.train.policy(self.stage()).trainable()
    }

    fn apply(&mut self, grads: Vec<(ParamId, Tensor)>) {
        let lr = self.checkpoint.config.train.lr(self.stage());
        let ck = &mut self.checkpoint;
        ck.state.optimizer.step(&mut ck.store, &grads, lr);
    }

    fn instruction_step(&mut self, batch: &[(usize, u64)], prompts: &[usize]) -> Result<LossRecord> {
        let windows = self.windows(batch)?;
        let ck = &self.checkpoint;
        let (record, grads) =
            instruction_gradients(&ck.detector, &ck.store, &windows, prompts, self.trainable(), self.mode)?;
        self.apply(grads);
        Ok(record)
    }

    fn end_to_end_step(&mut self, batch: &[(usize, u64)]) -> Result<LossRecord> {
        let windows = self.windows(batch)?;
        let ck = &self.checkpoint;
        let (record, grads) = end_to_end_gradients(
            &ck.detector,
            &ck.store,
            &windows,
            self.trainable(),
            ck.config.train.stage2.lambda,
            ck.config.uml.temperature,
            self.mode,
        )?;
        self.apply(grads);
        Ok(record)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint.save(dir)
    }
}

/// Stage 1 from fresh weights.
pub fn stage1_instruction_tune(config: GlobalConfig, manifest: &DatasetManifest, mode: ExecMode) -> Result<Checkpoint> {
    let mut t = Trainer::new(config, Stage::Instruction, manifest, mode)?;
    t.run(|_| {})?;
    Ok(t.checkpoint)
}

/// Stage 2 from `init` (a stage-1 or stage-2 checkpoint) or fresh weights.
pub fn stage2_train(
    config: GlobalConfig,
    manifest: &DatasetManifest,
    init: Option<Checkpoint>,
    mode: ExecMode,
) -> Result<Checkpoint> {
    let mut t = match init {
        Some(ck) => Trainer::resume(ck, config, Stage::EndToEnd, manifest, mode)?,
        None => Trainer::new(config, Stage::EndToEnd, manifest, mode)?,
    };
    t.run(|_| {})?;
    Ok(t.checkpoint)
}
