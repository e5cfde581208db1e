use indexmap::IndexMap;

use crate::attention::AttentionCapture;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as batch-norm running statistics.
    Buffer,
}

/// Named parameter tensors in registration order. Paths are dotted,
/// e.g. `encoder.0.conv1.weight`.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>, ParamKind)>,
    index: IndexMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter path `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor, kind));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].2
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>, ParamKind)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t, k))| (ParamId(i), n.as_str(), t, *k))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.2 == ParamKind::Trainable)
            .map(|e| e.1.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t, k)| (n.clone(), t.cast(), *k))
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape, the parameters bound onto it, and the mode.
///
/// Parameters are copied onto the tape the first time a layer asks for them.
/// Batch-norm layers update their running statistics in the store during
/// train-mode passes.
pub struct Forward<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    capture: Option<AttentionCapture>,
}

impl<'s, T: Real> Forward<'s, T> {
    /// A recording pass; gradients flow to trainable parameters.
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    /// A pass that records no backward rules.
    pub fn inference(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::inference())
    }

    /// Continue on an existing tape (e.g. one supplied by a gradient check).
    pub fn with_tape(store: &'s mut ParamStore<T>, mode: Mode, tape: Tape<T>) -> Self {
        let n = store.len();
        Forward {
            tape,
            store,
            bound: vec![None; n],
            mode,
            capture: None,
        }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.store.kind(id) == ParamKind::Trainable;
        let v = self.tape.leaf(self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn enable_capture(&mut self, max_rows: usize) {
        self.capture = Some(AttentionCapture::new(max_rows));
    }

    pub fn capture_mut(&mut self) -> Option<&mut AttentionCapture> {
        self.capture.as_mut()
    }

    pub fn take_capture(&mut self) -> Option<AttentionCapture> {
        self.capture.take()
    }

    pub(crate) fn record_attention(&mut self, label: &str, v: Var, normalized_over_rows: bool) {
        if let Some(c) = self.capture.as_mut() {
            c.record(label, self.tape.value(v), normalized_over_rows);
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of bound trainable parameters after [`Forward::backward`].
    pub fn param_grads(&mut self) -> Vec<(ParamId, Vec<T>)> {
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            if self.store.kind(ParamId(i)) != ParamKind::Trainable {
                continue;
            }
            if let Some(g) = self.tape.take_grad(v) {
                out.push((ParamId(i), g));
            }
        }
        out
    }
}
