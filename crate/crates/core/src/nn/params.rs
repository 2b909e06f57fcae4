use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter groups used by the freeze schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Projector,
    Bridge,
    Lora,
    LmBody,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Encoder,
        Group::Projector,
        Group::Bridge,
        Group::Lora,
        Group::LmBody,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Projector => "projector",
            Group::Bridge => "bridge",
            Group::Lora => "lora",
            Group::LmBody => "lm_body",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(index: usize) -> Self {
        Self(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    /// Whether AdamW weight decay applies (false for norms, biases, embeddings).
    pub decay: bool,
    pub tensor: Tensor,
}

/// How a fresh parameter is initialised.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Identity,
}

/// Owns every tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: IndexMap<String, usize>,
    trainable: BTreeSet<Group>,
    seed: u64,
}

/// FNV-1a; seeds each parameter from its name so adding a parameter never
/// perturbs the initial values of the others.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, group: Group, decay: bool, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                Tensor::randn(shape, std, &mut rng)
            }
            Init::Identity => {
                if shape.len() != 2 {
                    return Err(Error::Config(format!("identity init for `{name}` needs a matrix")));
                }
                let mut t = Tensor::zeros(shape);
                let cols = shape[1];
                for i in 0..shape[0].min(cols) {
                    t.data_mut()[i * cols + i] = 1.0;
                }
                t
            }
        };
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            group,
            decay,
            tensor,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.param(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn count(&self, group: Group) -> usize {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Marks exactly `groups` as trainable. `lm_body` is refused.
    pub fn set_trainable(&mut self, groups: &BTreeSet<Group>) -> Result<()> {
        if groups.contains(&Group::LmBody) {
            return Err(Error::Config("the LM body is never trainable".into()));
        }
        self.trainable = groups.clone();
        for p in &mut self.params {
            let on = groups.contains(&p.group);
            p.tensor.set_requires_grad(on);
        }
        Ok(())
    }

    /// Makes every group trainable, `lm_body` included. Only foundation
    /// pretraining uses this; staged training goes through [`Self::set_trainable`].
    pub fn unfreeze_all(&mut self) {
        self.trainable = Group::ALL.into_iter().collect();
        for p in &mut self.params {
            p.tensor.set_requires_grad(true);
        }
    }

    pub fn trainable_groups(&self) -> &BTreeSet<Group> {
        &self.trainable
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.contains(&self.params[id.0].group)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| self.trainable.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds per-parameter gradients (indexed by [`ParamId`]) into the tensors' grad slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                self.params[i].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies every same-named, same-shaped tensor from `other`; returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.tensor.shape() == p.tensor.shape() {
                    p.tensor.data_mut().copy_from_slice(src.tensor.data());
                    n += 1;
                }
            }
        }
        n
    }

    /// Copies same-named, same-shaped tensors of the given groups from `other`.
    pub fn copy_groups(&mut self, other: &ParamStore, groups: &[Group]) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| groups.contains(&p.group)) {
            if let Some(src) = other.by_name(&p.name) {
                if src.group == p.group && src.tensor.shape() == p.tensor.shape() {
                    p.tensor.data_mut().copy_from_slice(src.tensor.data());
                    n += 1;
                }
            }
        }
        n
    }

    /// Little-endian dump of every parameter whose group satisfies `keep`, in
    /// registration order. Used to check that frozen groups are untouched.
    pub fn serialize_where(&self, keep: impl Fn(Group) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| keep(p.group)) {
            out.extend_from_slice(p.name.as_bytes());
            out.push(0);
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Per-parameter gradient buffers produced by one graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn add(&mut self, other: &Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Vec<f64>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.as_mut().map(|g| (ParamId(i), g)))
    }

    /// Sets the slot for `id`, growing the buffer if needed.
    pub fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(grad);
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|x| *x *= factor));
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }
}

/// A graph bound to a parameter store; each parameter becomes one leaf on first use.
pub struct Session<'p> {
    pub g: Graph<'p>,
    store: &'p ParamStore,
    leaves: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            leaves: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        let v = self.g.leaf(self.store.tensor(id), trainable);
        self.leaves[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `g.backward`.
    pub fn gradients(&self) -> Gradients {
        let mut out = Gradients::new(self.store.len());
        for (i, leaf) in self.leaves.iter().enumerate() {
            if let Some(v) = leaf {
                if let Some(gr) = self.g.grad(*v) {
                    out.slots[i] = Some(gr.to_vec());
                }
            }
        }
        out
    }
}
