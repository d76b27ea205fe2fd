//! Parameter storage and the shared layer vocabulary (linear maps, LoRA,
//! normalization, feed-forward, multi-head attention).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Mask, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ownership tag used by freeze policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    StBranch,
    VisualEncoder,
    LmBase,
    Projector,
    Lora,
    ReasoningToken,
    Uml,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::StBranch,
        ParamGroup::VisualEncoder,
        ParamGroup::LmBase,
        ParamGroup::Projector,
        ParamGroup::Lora,
        ParamGroup::ReasoningToken,
        ParamGroup::Uml,
        ParamGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::StBranch => "st",
            ParamGroup::VisualEncoder => "visual",
            ParamGroup::LmBase => "lm",
            ParamGroup::Projector => "projector",
            ParamGroup::Lora => "lora",
            ParamGroup::ReasoningToken => "reasoning_token",
            ParamGroup::Uml => "uml",
            ParamGroup::Head => "head",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

/// Set of parameter groups that receive gradients.
///
/// The visual encoder can never be part of a trainable set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainableSet(u16);

impl TrainableSet {
    pub fn none() -> Self {
        Self(0)
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        let mut s = Self::none();
        for &g in groups {
            if g != ParamGroup::VisualEncoder {
                s.0 |= g.bit();
            }
        }
        s
    }

    /// Everything that may ever be trained.
    pub fn all() -> Self {
        Self::of(&ParamGroup::ALL)
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn groups(self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.contains(*g)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "shape change for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.ids_in(group).iter().map(|&id| self.get(id).len()).sum()
    }
}

/// A tape bound to a parameter store. Each parameter becomes one leaf the
/// first time it is used; trainable groups make that leaf require a gradient.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    trainable: TrainableSet,
    bound: RefCell<BTreeMap<ParamId, Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: TrainableSet) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Inference graph: nothing requires a gradient.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, TrainableSet::none())
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let requires = self.trainable.contains(self.store.group(id));
        let v = self.tape.leaf(self.store.get(id).clone(), requires);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Gradients of every bound trainable parameter, in parameter order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(id, v)| grads.get(*v).map(|g| (*id, g.clone())))
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

pub(crate) fn lecun<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

/// Additive low-rank update `x·A·B·scale` on top of a frozen linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `y = x·W + b`, with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
    pub in_dim: usize,
    pub out_dim: usize,
    name: String,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, lecun(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            lora: None,
            in_dim,
            out_dim,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let mut y = g.matmul(x, w);
        if let Some(b) = self.bias {
            let bv = g.param(b);
            y = g.add_row(y, bv);
        }
        if let Some(lora) = &self.lora {
            let a = g.param(lora.down);
            let b = g.param(lora.up);
            let h = g.matmul(x, a);
            let mut delta = g.matmul(h, b);
            if lora.scale != 1.0 {
                delta = g.scale(delta, lora.scale);
            }
            y = g.add(y, delta);
        }
        y
    }

    /// Wraps this map with a zero-initialized rank-`rank` adapter.
    /// Returns the number of trainable scalars added.
    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<usize> {
        if rank == 0 || rank > self.in_dim.min(self.out_dim) {
            return Err(Error::RankTooLarge {
                rank,
                rows: self.in_dim,
                cols: self.out_dim,
            });
        }
        if self.lora.is_some() {
            return Err(Error::Config(format!("{} already carries an adapter", self.name)));
        }
        let down = store.add(
            format!("{}.lora_down", self.name),
            ParamGroup::Lora,
            lecun(self.in_dim, rank, rng),
        );
        let up = store.add(
            format!("{}.lora_up", self.name),
            ParamGroup::Lora,
            Tensor::zeros(&[rank, self.out_dim]),
        );
        self.lora = Some(LoraAdapter {
            down,
            up,
            rank,
            scale: alpha / rank as f64,
        });
        Ok(rank * (self.in_dim + self.out_dim))
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, true, group, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, true, group, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `[queries, keys]` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with separate Q/K/V/O projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, group, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, group, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, group, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, group, rng),
            heads,
            dim,
        })
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    /// `query: [A, dim]` attends over `context: [B, dim]`.
    pub fn forward(
        &self,
        g: &Graph,
        query: Var,
        context: Var,
        mask: Option<Arc<Mask>>,
        site: &'static str,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let dh = self.dim / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, inv);
            if !g.value(scores).is_finite() {
                return Err(Error::NonFiniteLogits(site));
            }
            let p = g.softmax(scores, mask.clone());
            heads.push(g.matmul(p, vh));
            weights.push(p);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        Ok(AttentionOutput {
            output: self.o.forward(g, merged),
            weights,
        })
    }
}
