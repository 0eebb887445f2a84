//! SGD training harness: step-decay learning-rate schedule, Nesterov
//! momentum with selective weight decay, an epoch driver with seeded
//! shuffling/augmentation streams, and deterministic evaluation.

use crate::backbone::Network;
use crate::data::{augment, AugmentPolicy, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tape::Mode;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Optimization recipe. The learning rate starts at `base_lr` and is divided
/// by 10 at each drop fraction of the epoch budget.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Fractions of `epochs` at which the rate drops; strictly increasing,
    /// each inside (0, 1).
    pub lr_drops: Vec<f64>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            lr_drops: vec![0.5, 0.75, 0.9],
            weight_decay: 5e-4,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.base_lr.is_finite() && self.momentum.is_finite() && self.weight_decay.is_finite())
        {
            return Err(Error::Config("optimizer scalars must be finite".into()));
        }
        let mut prev = 0.0;
        for &f in &self.lr_drops {
            if !(f > prev && f < 1.0) {
                return Err(Error::Config(format!(
                    "lr drop fractions must be strictly increasing inside (0,1), got {:?}",
                    self.lr_drops
                )));
            }
            prev = f;
        }
        Ok(())
    }

    /// Learning rate for an epoch: base / 10^k where k counts the drops
    /// already reached (a drop at fraction f fires at epoch floor(f*epochs)).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Train(format!(
                "epoch {epoch} outside the {}-epoch schedule",
                self.epochs
            )));
        }
        let k = self
            .lr_drops
            .iter()
            .filter(|&&f| epoch >= (f * self.epochs as f64).floor() as usize)
            .count();
        Ok(self.base_lr * 10f64.powi(-(k as i32)))
    }
}

/// Nesterov-momentum SGD. Per trainable parameter:
/// g = grad (+ weight_decay * w for decayed entries);
/// v = momentum * v + g; step direction = g + momentum * v
/// (plain v when momentum is 0, i.e. vanilla SGD).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Sgd {
        let velocity = store
            .entries()
            .iter()
            .map(|e| match e.kind {
                EntryKind::Trainable { .. } => vec![0.0; e.tensor.numel()],
                EntryKind::Buffer => Vec::new(),
            })
            .collect();
        Sgd { momentum, weight_decay, velocity }
    }

    /// Apply one update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (idx, entry) in store.entries_mut().iter_mut().enumerate() {
            let EntryKind::Trainable { decay } = entry.kind else { continue };
            let Some(grad) = entry.tensor.grad.take() else { continue };
            let v = &mut self.velocity[idx];
            let data = entry.tensor.data_mut();
            for ((w, g0), vel) in data.iter_mut().zip(&grad).zip(v.iter_mut()) {
                let mut g = *g0;
                if decay {
                    g += self.weight_decay * *w;
                }
                let d = if self.momentum != 0.0 {
                    *vel = self.momentum * *vel + g;
                    g + self.momentum * *vel
                } else {
                    *vel = g;
                    g
                };
                *w -= lr * d;
            }
            entry.tensor.grad = Some(grad);
        }
        store.check_finite()?;
        Ok(())
    }

    /// Momentum buffers in store order (empty slots for buffers).
    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.velocity
    }
}

/// One optimization step on a prepared batch; returns the loss.
pub fn train_step(
    net: &mut Network,
    sgd: &mut Sgd,
    images: &crate::tensor::Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let mut out = net.run(images, Mode::Train)?;
    let loss = out.tape.softmax_cross_entropy(out.logits, labels)?;
    let loss_val = out.tape.value(loss).scalar_value();
    if !loss_val.is_finite() {
        return Err(Error::Train(format!("non-finite training loss {loss_val}")));
    }
    net.store.zero_grads();
    out.tape.backward(loss)?;
    net.store.pull_grads(&out.tape, &out.bound)?;
    sgd.step(&mut net.store, lr)?;
    Ok(loss_val)
}

/// Deterministic evaluation metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Lowest-index argmax, so exact logit ties resolve to the smaller class.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and mean cross-entropy over the dataset, in a fixed order.
pub fn evaluate(
    net: &mut Network,
    dataset: &Dataset,
    normalizer: Option<&Normalizer>,
    batch_size: usize,
) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let n = dataset.len();
    let classes = dataset.classes;
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (mut images, labels) = dataset.gather(&indices)?;
        if let Some(norm) = normalizer {
            norm.apply(&mut images);
        }
        let mut out = net.run(&images, Mode::Eval)?;
        let logits = out.tape.value(out.logits).data().to_vec();
        for (row, &label) in logits.chunks_exact(classes).zip(&labels) {
            if argmax_lowest(row) == label {
                correct += 1;
            }
        }
        let loss = out.tape.softmax_cross_entropy(out.logits, &labels)?;
        loss_sum += out.tape.value(loss).scalar_value() * labels.len() as f64;
        start = end;
    }
    Ok(EvalMetrics { accuracy: correct as f64 / n as f64, loss: loss_sum / n as f64 })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// Machine-readable record; float fields use shortest round-trip form.
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"epoch\":{},\"lr\":{:?},\"train_loss\":{:?},\"train_acc\":{:?},\"val_loss\":{:?},\"val_acc\":{:?},\"wall_ms\":{}}}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.wall_ms
        )
    }
}

/// Drop the wall-clock field from a metrics line so seeded twin runs can be
/// compared bit-for-bit (wall time is the one legitimately nondeterministic
/// field).
pub fn strip_wall_ms(line: &str) -> String {
    match line.find(",\"wall_ms\":") {
        Some(i) => format!("{}}}", &line[..i]),
        None => line.to_string(),
    }
}

/// Epoch driver: owns the model, optimizer state, and the two RNG streams
/// (batch shuffling and augmentation) whose states checkpoints capture.
pub struct Trainer {
    pub net: Network,
    pub sgd: Sgd,
    pub config: TrainConfig,
    /// Next epoch to run (also: number of epochs already completed).
    pub epoch: usize,
    pub shuffle_rng: ChaCha8Rng,
    pub augment_rng: ChaCha8Rng,
}

/// Offset between the shuffle and augmentation seed streams.
const AUGMENT_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let sgd = Sgd::new(&net.store, config.momentum, config.weight_decay);
        let shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let augment_rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(AUGMENT_SEED_OFFSET));
        Ok(Trainer { net, sgd, config, epoch: 0, shuffle_rng, augment_rng })
    }

    /// Train one epoch and evaluate; `val` falls back to `train` when absent.
    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        normalizer: Option<&Normalizer>,
        policy: AugmentPolicy,
    ) -> Result<EpochRecord> {
        let started = std::time::Instant::now();
        let lr = self.config.lr_at(self.epoch)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let classes = train.classes;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let (raw, labels) = train.gather(chunk)?;
            let mut images = augment(&raw, policy, &mut self.augment_rng)?;
            if let Some(norm) = normalizer {
                norm.apply(&mut images);
            }
            let mut out = self.net.run(&images, Mode::Train)?;
            let logits = out.tape.value(out.logits).data().to_vec();
            for (row, &label) in logits.chunks_exact(classes).zip(&labels) {
                if argmax_lowest(row) == label {
                    correct += 1;
                }
            }
            let loss = out.tape.softmax_cross_entropy(out.logits, &labels)?;
            let loss_val = out.tape.value(loss).scalar_value();
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite training loss {loss_val} in epoch {}",
                    self.epoch
                )));
            }
            loss_sum += loss_val * labels.len() as f64;
            self.net.store.zero_grads();
            out.tape.backward(loss)?;
            self.net.store.pull_grads(&out.tape, &out.bound)?;
            self.sgd.step(&mut self.net.store, lr)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_acc = correct as f64 / train.len() as f64;

        let eval_set = val.unwrap_or(train);
        let metrics = evaluate(&mut self.net, eval_set, normalizer, self.config.batch_size)?;

        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss,
            train_acc,
            val_loss: metrics.loss,
            val_acc: metrics.accuracy,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        self.epoch += 1;
        Ok(record)
    }
}
