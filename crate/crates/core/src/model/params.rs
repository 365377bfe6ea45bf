use std::cell::RefCell;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Gradients, Tape, Var};

/// Named parameter groups; a checkpoint records which ones it holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Trunk,
    Phoneme,
    Viseme,
    Fusion,
    CharEncoder,
    CharDecoder,
    Heads,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Trunk,
        Group::Phoneme,
        Group::Viseme,
        Group::Fusion,
        Group::CharEncoder,
        Group::CharDecoder,
        Group::Heads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Trunk => "trunk",
            Group::Phoneme => "phoneme",
            Group::Viseme => "viseme",
            Group::Fusion => "fusion",
            Group::CharEncoder => "char_encoder",
            Group::CharDecoder => "char_decoder",
            Group::Heads => "heads",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Array,
    /// Excluded from weight decay (biases, norms).
    pub no_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: String, group: Group, value: Array, no_decay: bool) -> ParamId {
        self.params.push(Param {
            name,
            group,
            value,
            no_decay,
        });
        self.params.len() - 1
    }

    /// Normal weights scaled by `1 / sqrt(fan_in)`.
    pub fn add_weight<R: Rng>(&mut self, rng: &mut R, name: String, group: Group, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, group, Array::new(shape, data).expect("sized"), false)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.params.iter().any(|p| p.group == group)
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Parameters placed on a tape on first use, so a forward pass only
/// records the parameters it touches.
pub struct Bound<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Bound<'t, 's> {
    /// Parameters become leaves that receive gradients.
    pub fn trainable(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::make(tape, store, true)
    }

    /// Parameters become constants.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::make(tape, store, false)
    }

    fn make(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id].get_or_insert_with(|| {
            let value = self.store.get(id).value.clone();
            if self.trainable {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Ids of the parameters this pass touched.
    pub fn touched(&self) -> Vec<ParamId> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| i))
            .collect()
    }

    /// Per-parameter gradients; untouched parameters get `None`.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Array>> {
        self.vars.borrow().iter().map(|v| v.map(|v| grads.take(v))).collect()
    }
}
