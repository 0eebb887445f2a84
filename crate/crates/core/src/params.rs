//! Central registry of named parameters and buffers. Layers hold `ParamId`s;
//! a forward pass binds every trainable entry onto a fresh tape in store
//! order, and after backward the gradients are pulled back into the entries
//! by the same ordering, so the optimizer and the checkpoint writer see one
//! stable, deterministic sequence.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable weight; `decay` marks it for L2 weight decay (conv/FC
    /// weights yes, biases and batchnorm affine terms no).
    Trainable { decay: bool },
    /// Non-trainable state such as batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: EntryKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor, kind: EntryKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        tensor.requires_grad = matches!(kind, EntryKind::Trainable { .. });
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// Total element count of trainable entries.
    pub fn trainable_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, EntryKind::Trainable { .. }))
            .map(|e| e.tensor.numel() as u64)
            .sum()
    }

    /// Push every trainable entry onto the tape as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            match e.kind {
                EntryKind::Trainable { .. } => {
                    let mut t = e.tensor.clone();
                    t.grad = None;
                    vars.push(Some(tape.leaf(t)));
                }
                EntryKind::Buffer => vars.push(None),
            }
        }
        Bound { vars }
    }

    /// Copy gradients accumulated on the tape back into the store entries
    /// (adding to any gradient already present).
    pub fn pull_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (entry, slot) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(var) = slot {
                if let Some(g) = tape.grad(*var) {
                    entry.tensor.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.tensor.zero_grad();
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for e in &self.entries {
            e.tensor.check_finite(&e.name)?;
        }
        Ok(())
    }
}

/// The tape vars of one binding, indexed by `ParamId`. Buffers have no var.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Result<Var> {
        self.vars[id.0].ok_or_else(|| {
            Error::Config("attempted to use a buffer entry as a tape parameter".into())
        })
    }
}

/// Fan-in-scaled uniform init over (-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_pull_round_trip() {
        let mut store = ParamStore::new();
        let w = store.register(
            "w",
            Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(),
            EntryKind::Trainable { decay: true },
        );
        let _buf = store.register("buf", Tensor::zeros(&[2]), EntryKind::Buffer);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let wv = bound.var(w).unwrap();
        let loss = tape.sum(wv).unwrap();
        tape.backward(loss).unwrap();
        store.pull_grads(&tape, &bound).unwrap();
        assert_eq!(store.get(w).grad.as_deref(), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn buffers_are_not_bound() {
        let mut store = ParamStore::new();
        let b = store.register("buf", Tensor::zeros(&[1]), EntryKind::Buffer);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert!(bound.var(b).is_err());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn fan_in_init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = uniform_fan_in(&[64, 16], 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(t.data().iter().all(|v| v.abs() < bound));
        // A second draw with the same seed is identical.
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let t2 = uniform_fan_in(&[64, 16], 16, &mut rng2);
        assert_eq!(t.data(), t2.data());
    }
}
