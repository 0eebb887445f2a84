//! Shared layer building blocks: convolution, linear, batchnorm, and the
//! plain squeeze-excite gate used as the comparison attention variant.

use crate::error::Result;
use crate::params::{Bound, EntryKind, ParamId, ParamStore, uniform_fan_in};
use crate::tape::{Mode, RunningStats, Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Everything one forward pass threads through the layers. The tape records
/// operations, `bound` maps parameter ids to their tape leaves, and the store
/// is mutable so train-mode batchnorm can fold running statistics.
pub struct FwdCtx<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a Bound,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> FwdCtx<'a> {
    pub fn param(&self, id: ParamId) -> Result<Var> {
        self.bound.var(id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = store.register(
            format!("{name}.weight"),
            uniform_fan_in(&[out_channels, in_channels, kernel.0, kernel.1], fan_in, rng),
            EntryKind::Trainable { decay: true },
        );
        Conv2d { weight, stride, padding, dilation: 1 }
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        ctx.tape.conv2d(x, w, self.stride, self.dilation, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            uniform_fan_in(&[out_features, in_features], in_features, rng),
            EntryKind::Trainable { decay: true },
        );
        let bias = store.register(
            format!("{name}.bias"),
            Tensor::zeros(&[out_features]),
            EntryKind::Trainable { decay: false },
        );
        Linear { weight, bias }
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.register(
            format!("{name}.gamma"),
            Tensor::ones(&[channels]),
            EntryKind::Trainable { decay: false },
        );
        let beta = store.register(
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            EntryKind::Trainable { decay: false },
        );
        let run_mean = store.register(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            EntryKind::Buffer,
        );
        let run_var = store.register(
            format!("{name}.running_var"),
            Tensor::ones(&[channels]),
            EntryKind::Buffer,
        );
        BatchNorm { gamma, beta, run_mean, run_var, momentum: 0.9, eps: 1e-5 }
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma)?;
        let beta = ctx.param(self.beta)?;
        let mut stats = RunningStats {
            mean: ctx.store.get(self.run_mean).data().to_vec(),
            var: ctx.store.get(self.run_var).data().to_vec(),
        };
        let out = ctx.tape.batchnorm(
            x,
            gamma,
            beta,
            ctx.mode,
            Some(&mut stats),
            self.momentum,
            self.eps,
        )?;
        if matches!(ctx.mode, Mode::Train) {
            ctx.store
                .get_mut(self.run_mean)
                .data_mut()
                .copy_from_slice(&stats.mean);
            ctx.store
                .get_mut(self.run_var)
                .data_mut()
                .copy_from_slice(&stats.var);
        }
        Ok(out)
    }
}

/// Directly-coded squeeze-excite gate: global average pool, bottleneck FC,
/// ReLU, expand FC, sigmoid, per-channel rescale. Serves as the comparison
/// attention variant and as the reference for the single-1x1-filter
/// equivalence check.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl SeBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        let w1 = store.register(
            format!("{name}.w1"),
            uniform_fan_in(&[hidden, channels], channels, rng),
            EntryKind::Trainable { decay: true },
        );
        let b1 = store.register(
            format!("{name}.b1"),
            Tensor::zeros(&[hidden]),
            EntryKind::Trainable { decay: false },
        );
        let w2 = store.register(
            format!("{name}.w2"),
            uniform_fan_in(&[channels, hidden], hidden, rng),
            EntryKind::Trainable { decay: true },
        );
        let b2 = store.register(
            format!("{name}.b2"),
            Tensor::zeros(&[channels]),
            EntryKind::Trainable { decay: false },
        );
        SeBlock { w1, b1, w2, b2, channels, hidden }
    }

    /// Gate vector in (0,1), shape [B,C].
    pub fn gates(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let squeezed = ctx.tape.global_avg_pool(u)?;
        self.gates_from_signals(ctx, squeezed)
    }

    /// Encoder applied to an already-squeezed [B,C] signal vector.
    pub fn gates_from_signals(&self, ctx: &mut FwdCtx, signals: Var) -> Result<Var> {
        let w1 = ctx.param(self.w1)?;
        let b1 = ctx.param(self.b1)?;
        let w2 = ctx.param(self.w2)?;
        let b2 = ctx.param(self.b2)?;
        let h = ctx.tape.linear(signals, w1, b1)?;
        let h = ctx.tape.relu(h)?;
        let z = ctx.tape.linear(h, w2, b2)?;
        ctx.tape.sigmoid(z)
    }

    pub fn forward(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let s = self.gates(ctx, u)?;
        ctx.tape.scale_channels(u, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn se_gates_are_half_with_zero_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let se = SeBlock::new(&mut store, &mut rng, "se", 4, 2);
        for id in [se.w1, se.w2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let u = ctx.tape.leaf(Tensor::ones(&[2, 4, 3, 3]));
        let s = se.gates(&mut ctx, u).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batchnorm_updates_running_stats_only_in_train() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let run_mean_before = store.by_name("bn.running_mean").unwrap().tensor.clone();

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let x = ctx.tape.leaf(Tensor::from_vec(&[1, 1, 1, 4], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
        bn.forward(&mut ctx, x).unwrap();
        assert_eq!(
            store.by_name("bn.running_mean").unwrap().tensor,
            run_mean_before
        );

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Train };
        let x = ctx.tape.leaf(Tensor::from_vec(&[1, 1, 1, 4], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
        bn.forward(&mut ctx, x).unwrap();
        let updated = &store.by_name("bn.running_mean").unwrap().tensor;
        // running = 0.9 * 0 + 0.1 * 5
        assert!((updated.data()[0] - 0.5).abs() < 1e-12);
    }
}
