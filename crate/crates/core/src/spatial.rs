//! Per-position attention computed over channel blocks.
//!
//! The channel axis is split into `tau` equal blocks. Each block is pooled
//! down to a mean map and a max map, the two are stacked and passed through
//! a 7x7 convolution (independent parameters per block), and a sigmoid turns
//! the result into one multiplicative map per block. Every channel is scaled
//! by the map of the block it belongs to; channel gating is then computed on
//! the spatially modulated activations.

use crate::error::{Error, Result};
use crate::nn::FwdCtx;
use crate::params::{EntryKind, ParamId, ParamStore, uniform_fan_in};
use crate::tape::Var;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const SPATIAL_KERNEL: usize = 7;
pub const SPATIAL_PADDING: usize = 3;

/// One sigmoid map per block of `channels / tau` consecutive channels.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub channels: usize,
    pub tau: usize,
    pub block_size: usize,
    /// (weight [1,2,7,7], bias [1]) per block.
    convs: Vec<(ParamId, ParamId)>,
}

impl SpatialAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        tau: usize,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(Error::Config("spatial attention needs tau >= 1".into()));
        }
        if channels == 0 || channels % tau != 0 {
            return Err(Error::Config(format!(
                "tau = {tau} must evenly divide the {channels} channels"
            )));
        }
        let fan_in = 2 * SPATIAL_KERNEL * SPATIAL_KERNEL;
        let convs = (0..tau)
            .map(|g| {
                let w = store.register(
                    format!("{name}.block{g}.weight"),
                    uniform_fan_in(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], fan_in, rng),
                    EntryKind::Trainable { decay: true },
                );
                let b = store.register(
                    format!("{name}.block{g}.bias"),
                    Tensor::zeros(&[1]),
                    EntryKind::Trainable { decay: false },
                );
                (w, b)
            })
            .collect();
        Ok(SpatialAttention { channels, tau, block_size: channels / tau, convs })
    }

    /// Block index a channel belongs to: floor(c * tau / channels).
    pub fn block_of(&self, channel: usize) -> usize {
        channel * self.tau / self.channels
    }

    /// Sigmoid maps [B, tau, H, W] for activations u [B, C, H, W].
    pub fn maps(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let shape = ctx.tape.shape(u).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                context: "spatial attention input".into(),
                expected: vec![shape.first().copied().unwrap_or(0), self.channels],
                got: shape,
            });
        }
        let mut maps = Vec::with_capacity(self.tau);
        for (g, &(w, b)) in self.convs.iter().enumerate() {
            let block = ctx
                .tape
                .slice_channels(u, g * self.block_size, self.block_size)?;
            let mean = ctx.tape.mean_channels(block)?;
            let max = ctx.tape.max_channels(block)?;
            let pooled = ctx.tape.concat(&[mean, max], 1)?; // [B,2,H,W]
            let wv = ctx.param(w)?;
            let bv = ctx.param(b)?;
            let conv = ctx.tape.conv2d(pooled, wv, 1, 1, SPATIAL_PADDING)?;
            let conv = ctx.tape.add_channel_bias(conv, bv)?;
            maps.push(ctx.tape.sigmoid(conv)?);
        }
        if maps.len() == 1 {
            Ok(maps[0])
        } else {
            ctx.tape.concat(&maps, 1)
        }
    }

    /// u' = maps ∘ u with each map broadcast over its channel block.
    pub fn apply(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let maps = self.maps(ctx, u)?;
        self.apply_maps(ctx, u, maps)
    }

    /// Scale u by precomputed maps [B, tau, H, W].
    pub fn apply_maps(&self, ctx: &mut FwdCtx, u: Var, maps: Var) -> Result<Var> {
        let expanded = ctx.tape.repeat_channels(maps, self.block_size)?;
        ctx.tape.mul(u, expanded)
    }
}
