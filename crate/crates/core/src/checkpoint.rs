//! Checkpoint persistence: the resolved run configuration, every named
//! parameter and buffer, the optimizer's momentum state, the epoch counter,
//! and both RNG streams, all in one little-endian binary file. Round trips
//! are bit-exact, so a resumed run continues exactly where the original
//! would have been.

use crate::error::{Error, Result};
use crate::params::EntryKind;
use crate::train::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IICK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable ChaCha stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One parameter or buffer with its optimizer state (empty for buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub velocity: Vec<f64>,
}

/// Everything needed to reconstruct a training run mid-flight.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    /// The resolved run configuration in its canonical text form; parsing it
    /// back yields the architecture and training recipe.
    pub config_text: String,
    pub epoch: u64,
    pub shuffle_rng: RngState,
    pub augment_rng: RngState,
    pub params: Vec<ParamRecord>,
}

/// Snapshot a trainer.
pub fn capture(trainer: &Trainer, config_text: &str) -> CheckpointBundle {
    let params = trainer
        .net
        .store
        .entries()
        .iter()
        .zip(trainer.sgd.velocity())
        .map(|(entry, vel)| ParamRecord {
            name: entry.name.clone(),
            kind: entry.kind,
            shape: entry.tensor.shape().to_vec(),
            values: entry.tensor.data().to_vec(),
            velocity: vel.clone(),
        })
        .collect();
    CheckpointBundle {
        config_text: config_text.to_string(),
        epoch: trainer.epoch as u64,
        shuffle_rng: RngState::capture(&trainer.shuffle_rng),
        augment_rng: RngState::capture(&trainer.augment_rng),
        params,
    }
}

/// Load a snapshot into a trainer whose network was built from the same
/// descriptor. Every record must match the store by position, name, kind,
/// and shape.
pub fn restore_into(bundle: &CheckpointBundle, trainer: &mut Trainer) -> Result<()> {
    let store = &mut trainer.net.store;
    if bundle.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameter records but the network has {}",
            bundle.params.len(),
            store.len()
        )));
    }
    for (record, entry) in bundle.params.iter().zip(store.entries_mut().iter_mut()) {
        if record.name != entry.name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: checkpoint has '{}' where the network has '{}'",
                record.name, entry.name
            )));
        }
        if record.kind != entry.kind {
            return Err(Error::Checkpoint(format!(
                "'{}' has a different kind in the checkpoint",
                record.name
            )));
        }
        if record.shape != entry.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "'{}' shape mismatch: checkpoint {:?} vs network {:?}",
                record.name,
                record.shape,
                entry.tensor.shape()
            )));
        }
        entry.tensor.data_mut().copy_from_slice(&record.values);
        entry.tensor.grad = None;
    }
    for (record, vel) in bundle.params.iter().zip(trainer.sgd.velocity_mut()) {
        if record.velocity.len() != vel.len() {
            return Err(Error::Checkpoint(format!(
                "'{}' momentum state length mismatch: checkpoint {} vs optimizer {}",
                record.name,
                record.velocity.len(),
                vel.len()
            )));
        }
        vel.copy_from_slice(&record.velocity);
    }
    trainer.epoch = bundle.epoch as usize;
    trainer.shuffle_rng = bundle.shuffle_rng.restore();
    trainer.augment_rng = bundle.augment_rng.restore();
    Ok(())
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("value {v} exceeds the u32 field limit")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_rng(out: &mut Vec<u8>, state: &RngState) {
    out.extend_from_slice(&state.seed);
    out.extend_from_slice(&state.word_pos.to_le_bytes());
}

fn kind_byte(kind: EntryKind) -> u8 {
    match kind {
        EntryKind::Trainable { decay: true } => 0,
        EntryKind::Trainable { decay: false } => 1,
        EntryKind::Buffer => 2,
    }
}

fn kind_from_byte(b: u8) -> Result<EntryKind> {
    match b {
        0 => Ok(EntryKind::Trainable { decay: true }),
        1 => Ok(EntryKind::Trainable { decay: false }),
        2 => Ok(EntryKind::Buffer),
        other => Err(Error::Checkpoint(format!("unknown parameter kind tag {other}"))),
    }
}

pub fn encode(bundle: &CheckpointBundle) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_u32(&mut out, bundle.config_text.len())?;
    out.extend_from_slice(bundle.config_text.as_bytes());
    out.extend_from_slice(&bundle.epoch.to_le_bytes());
    push_rng(&mut out, &bundle.shuffle_rng);
    push_rng(&mut out, &bundle.augment_rng);
    push_u32(&mut out, bundle.params.len())?;
    for p in &bundle.params {
        push_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(kind_byte(p.kind));
        push_u32(&mut out, p.shape.len())?;
        for &d in &p.shape {
            push_u32(&mut out, d)?;
        }
        let numel: usize = p.shape.iter().product();
        if numel != p.values.len() {
            return Err(Error::Checkpoint(format!(
                "'{}' carries {} values for shape {:?}",
                p.name,
                p.values.len(),
                p.shape
            )));
        }
        push_f64s(&mut out, &p.values);
        push_u32(&mut out, p.velocity.len())?;
        push_f64s(&mut out, &p.velocity);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: {what} needs {} bytes, file has {}",
                self.pos + n,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn rng(&mut self, what: &str) -> Result<RngState> {
        let seed: [u8; 32] = self.take(32, what)?.try_into().unwrap();
        let pos = self.take(16, what)?;
        Ok(RngState { seed, word_pos: u128::from_le_bytes(pos.try_into().unwrap()) })
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointBundle> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let config_text = r.string("config text")?;
    let epoch = r.u64("epoch")?;
    let shuffle_rng = r.rng("shuffle rng state")?;
    let augment_rng = r.rng("augment rng state")?;
    let count = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let kind = kind_from_byte(r.take(1, "parameter kind")?[0])?;
        let rank = r.u32("parameter rank")?;
        let mut shape = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            shape.push(r.u32("parameter dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| {
                Error::Checkpoint(format!("implausible shape {shape:?} for '{name}'"))
            })?;
        let values = r.f64s(numel, "parameter values")?;
        let vel_len = r.u32("velocity length")?;
        let velocity = r.f64s(vel_len, "velocity values")?;
        params.push(ParamRecord { name, kind, shape, values, velocity });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointBundle { config_text, epoch, shuffle_rng, augment_rng, params })
}

pub fn write_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    fs::write(path, encode(bundle)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    decode(&fs::read(path)?)
}
