//! Joint modeling for residual networks: the gate encoder sees the squeezed
//! signals of both the residual branch and the identity path, arranged either
//! as a two-row stacked map or interleaved into a taller alternating fold,
//! and the resulting gates scale only the residual branch before the sum.

use crate::error::{Error, Result};
use crate::gfilter::GFilterSpec;
use crate::ini::{
    aggregate_multi_shape, average_over_filters, default_fold_shape, gfilter_scan, register_banks,
    squeeze, FilterBank, FoldFamily, IniBlock,
};
use crate::nn::{BatchNorm, Conv2d, FwdCtx, SeBlock};
use crate::params::{EntryKind, ParamId, ParamStore, uniform_fan_in};
use crate::spatial::SpatialAttention;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Layout of the joint signal map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointMapMode {
    /// Two rows: residual signals above identity signals, no folding.
    Stacked,
    /// rows x cols = 2C with rows even; even rows hold identity chunks,
    /// odd rows the residual chunks of the same channels.
    AltFolded { rows: usize, cols: usize },
}

impl JointMapMode {
    pub fn map_shape(&self, channels: usize) -> (usize, usize) {
        match *self {
            JointMapMode::Stacked => (2, channels),
            JointMapMode::AltFolded { rows, cols } => (rows, cols),
        }
    }
}

/// Two-row map [B,1,2,C]: row 0 carries the residual-branch signals, row 1
/// the identity-path signals.
pub fn stack_signals(tape: &mut Tape, residual: Var, identity: Var) -> Result<Var> {
    let rs = tape.shape(residual).to_vec();
    let is = tape.shape(identity).to_vec();
    if rs.len() != 2 || rs != is {
        return Err(Error::ShapeMismatch {
            context: "stack_signals expects two [B,C] vectors".into(),
            expected: rs,
            got: is,
        });
    }
    let (b, c) = (rs[0], rs[1]);
    let r4 = tape.reshape(residual, &[b, 1, 1, c])?;
    let i4 = tape.reshape(identity, &[b, 1, 1, c])?;
    tape.concat(&[r4, i4], 2)
}

/// Alternating fold [B,1,rows,cols] with rows*cols = 2C and rows even: row 2k
/// holds identity channels [k*cols, (k+1)*cols), row 2k+1 the residual
/// channels of the same range, so each column pairs the two signals of one
/// channel.
pub fn alt_fold(
    tape: &mut Tape,
    residual: Var,
    identity: Var,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let rs = tape.shape(residual).to_vec();
    let is = tape.shape(identity).to_vec();
    if rs.len() != 2 || rs != is {
        return Err(Error::ShapeMismatch {
            context: "alt_fold expects two [B,C] vectors".into(),
            expected: rs,
            got: is,
        });
    }
    let (b, c) = (rs[0], rs[1]);
    if rows % 2 != 0 || rows * cols != 2 * c {
        return Err(Error::Config(format!(
            "alternating fold {rows}x{cols} cannot interleave 2x{c} signals (rows must be even, rows*cols = 2C)"
        )));
    }
    let chunks = rows / 2;
    // [B, chunks, 1, cols] per source, interleaved along the row axis.
    let r3 = tape.reshape(residual, &[b, chunks, 1, cols])?;
    let i3 = tape.reshape(identity, &[b, chunks, 1, cols])?;
    let paired = tape.concat(&[i3, r3], 2)?; // [B, chunks, 2, cols]
    tape.reshape(paired, &[b, 1, rows, cols])
}

/// Flattened signal count for a stacked-map scan: every shape's scan result
/// is flattened to one row and the rows are concatenated side by side.
pub fn stacked_signal_count(specs: &[GFilterSpec], channels: usize) -> usize {
    specs
        .iter()
        .filter_map(|s| s.scan_extent(2, channels))
        .map(|(n, m)| n * m)
        .sum()
}

/// Configuration for the joint gate.
#[derive(Clone, Debug, PartialEq)]
pub struct JointConfig {
    pub channels: usize,
    pub mode: JointMapMode,
    pub t: usize,
    pub preset: String,
    pub aggregation: bool,
    pub dilated: bool,
}

impl JointConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn resolve(
        channels: usize,
        preset: &str,
        t: usize,
        stacked: bool,
        fold_shape: Option<(usize, usize)>,
        family: FoldFamily,
        aggregation: bool,
        dilated: bool,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("joint gate needs at least one channel".into()));
        }
        if t == 0 {
            return Err(Error::Config("reduction ratio t must be >= 1".into()));
        }
        let mode = if stacked {
            if fold_shape.is_some() {
                return Err(Error::Config(
                    "stacked joint maps have the fixed shape 2xC; fold shape applies to alt_folded only".into(),
                ));
            }
            JointMapMode::Stacked
        } else {
            let (rows, cols) = match fold_shape {
                Some((r, c)) => (r, c),
                None => default_fold_shape(2 * channels, family, true)?,
            };
            if rows % 2 != 0 || rows * cols != 2 * channels {
                return Err(Error::Config(format!(
                    "joint fold {rows}x{cols} must have even rows and hold {} signals",
                    2 * channels
                )));
            }
            JointMapMode::AltFolded { rows, cols }
        };
        let cfg = JointConfig {
            channels,
            mode,
            t,
            preset: preset.to_string(),
            aggregation,
            dilated,
        };
        let set = cfg.filter_set(1)?;
        if stacked {
            let tall: Vec<String> = set
                .specs
                .iter()
                .filter(|s| s.effective_extent().0 > 2)
                .map(|s| s.label())
                .collect();
            if !tall.is_empty() {
                return Err(Error::Config(format!(
                    "stacked joint maps only admit filters at most 2 rows tall; offending shapes: {}",
                    tall.join(", ")
                )));
            }
        }
        if !cfg.aggregation && set.specs.len() > 1 {
            return Err(Error::Config(format!(
                "preset '{}' has {} filter shapes; enable aggregation or pick a single-shape preset",
                cfg.preset,
                set.specs.len()
            )));
        }
        Ok(cfg)
    }

    pub fn instances(&self) -> usize {
        (self.channels / self.t).max(1)
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.t).max(1)
    }

    pub fn filter_set(&self, count: usize) -> Result<crate::gfilter::GFilterSet> {
        let mut set = crate::gfilter::GFilterSet::preset(&self.preset, count)?;
        if self.dilated && !self.preset.ends_with("-d") {
            let (r, c, d) = crate::gfilter::DILATED_ADDON;
            set.specs.push(GFilterSpec::new(r, c, d, count)?);
            set.name = format!("{}-d", set.name);
        }
        Ok(set)
    }
}

/// Gate encoder over the joint residual/identity signal map. Output gates
/// have length C and scale the residual branch only.
#[derive(Clone, Debug)]
pub struct JointGate {
    pub config: JointConfig,
    pub effective: Vec<GFilterSpec>,
    pub banks: Vec<FilterBank>,
    pub norm: BatchNorm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub group_signals: usize,
    force_identity: bool,
}

impl JointGate {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: JointConfig,
    ) -> Result<Self> {
        let count = config.instances();
        let set = config.filter_set(count)?;
        let (rows, cols) = config.mode.map_shape(config.channels);
        let effective = set.effective_specs(rows, cols)?;
        let banks = register_banks(store, rng, name, &effective)?;
        let norm = BatchNorm::new(store, &format!("{name}.norm"), 1);
        let group_signals = match config.mode {
            JointMapMode::Stacked => stacked_signal_count(&effective, config.channels),
            JointMapMode::AltFolded { rows, cols } => {
                crate::ini::grouped_signal_count(&effective, rows, cols)
            }
        };
        let hidden = config.hidden();
        let w1 = store.register(
            format!("{name}.encode.w1"),
            uniform_fan_in(&[hidden, group_signals], group_signals, rng),
            EntryKind::Trainable { decay: true },
        );
        let b1 = store.register(
            format!("{name}.encode.b1"),
            Tensor::zeros(&[hidden]),
            EntryKind::Trainable { decay: false },
        );
        let w2 = store.register(
            format!("{name}.encode.w2"),
            uniform_fan_in(&[config.channels, hidden], hidden, rng),
            EntryKind::Trainable { decay: true },
        );
        let b2 = store.register(
            format!("{name}.encode.b2"),
            Tensor::zeros(&[config.channels]),
            EntryKind::Trainable { decay: false },
        );
        Ok(JointGate {
            config,
            effective,
            banks,
            norm,
            w1,
            b1,
            w2,
            b2,
            group_signals,
            force_identity: false,
        })
    }

    /// Test-only identity hook; see `IniBlock::force_identity_gate`.
    pub fn force_identity_gate(&mut self, on: bool) {
        self.force_identity = on;
    }

    /// Joint map for [B,C] residual/identity signal vectors.
    pub fn build_map(&self, tape: &mut Tape, residual: Var, identity: Var) -> Result<Var> {
        match self.config.mode {
            JointMapMode::Stacked => stack_signals(tape, residual, identity),
            JointMapMode::AltFolded { rows, cols } => {
                alt_fold(tape, residual, identity, rows, cols)
            }
        }
    }

    /// Scan + aggregate + instance-average, before normalization, flattened
    /// to [B, group_signals] semantics but kept as a 4-D map [B,1,h,w].
    pub fn group_map(&self, ctx: &mut FwdCtx, map: Var) -> Result<Var> {
        match self.config.mode {
            JointMapMode::Stacked => {
                // Each shape's scan is flattened to a single row first; the
                // rows concatenate side by side with nothing to zero-fill.
                let mut rows = Vec::with_capacity(self.banks.len());
                for bank in &self.banks {
                    let w = ctx.param(bank.weight)?;
                    let b = ctx.param(bank.bias)?;
                    let scan = gfilter_scan(ctx.tape, map, w, Some(b), bank.spec.dilation)?;
                    let s = ctx.tape.shape(scan).to_vec();
                    let flat_row = ctx
                        .tape
                        .reshape(scan, &[s[0], s[1], 1, s[2] * s[3]])?;
                    rows.push(flat_row);
                }
                let stacked = if rows.len() == 1 {
                    rows[0]
                } else {
                    aggregate_multi_shape(ctx.tape, &rows)?
                };
                average_over_filters(ctx.tape, stacked)
            }
            JointMapMode::AltFolded { .. } => {
                let mut scans = Vec::with_capacity(self.banks.len());
                for bank in &self.banks {
                    let w = ctx.param(bank.weight)?;
                    let b = ctx.param(bank.bias)?;
                    scans.push(gfilter_scan(ctx.tape, map, w, Some(b), bank.spec.dilation)?);
                }
                let stacked = if scans.len() == 1 {
                    scans[0]
                } else {
                    aggregate_multi_shape(ctx.tape, &scans)?
                };
                average_over_filters(ctx.tape, stacked)
            }
        }
    }

    /// Gates from squeezed signals; both inputs are [B,C].
    pub fn gates(&self, ctx: &mut FwdCtx, residual: Var, identity: Var) -> Result<Var> {
        let b = ctx.tape.shape(residual)[0];
        if self.force_identity {
            let ones = Tensor::ones(&[b, self.config.channels]);
            return Ok(ctx.tape.constant(ones));
        }
        let map = self.build_map(ctx.tape, residual, identity)?;
        let grouped = self.group_map(ctx, map)?;
        let normed = self.norm.forward(ctx, grouped)?;
        let flat = ctx.tape.reshape(normed, &[b, self.group_signals])?;
        let w1 = ctx.param(self.w1)?;
        let b1 = ctx.param(self.b1)?;
        let w2 = ctx.param(self.w2)?;
        let b2 = ctx.param(self.b2)?;
        let h = ctx.tape.linear(flat, w1, b1)?;
        let h = ctx.tape.relu(h)?;
        let z = ctx.tape.linear(h, w2, b2)?;
        ctx.tape.sigmoid(z)
    }
}

/// Attention wiring of one residual unit.
#[derive(Clone, Debug)]
pub enum UnitAttention {
    /// Plain sum, no gating.
    None,
    /// Squeeze-excite on the residual branch.
    Se(SeBlock),
    /// Folded-map channel attention on the residual branch only.
    Plain(IniBlock),
    /// Joint gate over residual and identity signals.
    Joint(JointGate),
}

impl UnitAttention {
    pub fn force_identity_gate(&mut self, on: bool) {
        match self {
            UnitAttention::Plain(b) => b.force_identity_gate(on),
            UnitAttention::Joint(j) => j.force_identity_gate(on),
            _ => {}
        }
    }
}

/// Pre-activation residual unit (BN-ReLU-conv twice) with optional gating of
/// the residual branch. Downsampling units project the pre-activated input
/// with a strided 1x1 convolution so the identity path matches the branch in
/// both shape and channel alignment.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub bn1: BatchNorm,
    pub conv1: Conv2d,
    pub bn2: BatchNorm,
    pub conv2: Conv2d,
    pub projection: Option<Conv2d>,
    pub attention: UnitAttention,
    /// When present, the residual branch is scaled by per-position maps
    /// before any channel gating, and the gates see the modulated branch.
    pub spatial: Option<SpatialAttention>,
    pub out_channels: usize,
}

impl ResidualUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        attention: UnitAttention,
    ) -> Self {
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), in_channels);
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            (3, 3),
            stride,
            1,
        );
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), out_channels);
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            (3, 3),
            1,
            1,
        );
        let projection = (in_channels != out_channels || stride != 1).then(|| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.proj"),
                in_channels,
                out_channels,
                (1, 1),
                stride,
                0,
            )
        });
        ResidualUnit { bn1, conv1, bn2, conv2, projection, attention, spatial: None, out_channels }
    }

    pub fn with_spatial(mut self, spatial: SpatialAttention) -> Self {
        self.spatial = Some(spatial);
        self
    }

    /// Identity path and residual branch for input x.
    fn split_paths(&self, ctx: &mut FwdCtx, x: Var) -> Result<(Var, Var)> {
        let pre = self.bn1.forward(ctx, x)?;
        let pre = ctx.tape.relu(pre)?;
        let identity = match &self.projection {
            Some(p) => p.forward(ctx, pre)?,
            None => x,
        };
        let h = self.conv1.forward(ctx, pre)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let u = self.conv2.forward(ctx, h)?;
        Ok((identity, u))
    }

    /// Gate vector for a given identity/branch pair, or None when ungated.
    pub fn gate_vector(&self, ctx: &mut FwdCtx, identity: Var, u: Var) -> Result<Option<Var>> {
        match &self.attention {
            UnitAttention::None => Ok(None),
            UnitAttention::Se(se) => se.gates(ctx, u).map(Some),
            UnitAttention::Plain(block) => block.gates(ctx, u).map(Some),
            UnitAttention::Joint(joint) => {
                let u_sig = squeeze(ctx.tape, u)?;
                let x_sig = squeeze(ctx.tape, identity)?;
                joint.gates(ctx, u_sig, x_sig).map(Some)
            }
        }
    }

    fn combine(&self, ctx: &mut FwdCtx, identity: Var, u: Var) -> Result<Var> {
        let u = match &self.spatial {
            Some(sp) => sp.apply(ctx, u)?,
            None => u,
        };
        match self.gate_vector(ctx, identity, u)? {
            Some(s) => {
                let gated = ctx.tape.scale_channels(u, s)?;
                ctx.tape.add(identity, gated)
            }
            None => ctx.tape.add(identity, u),
        }
    }

    pub fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let (identity, u) = self.split_paths(ctx, x)?;
        self.combine(ctx, identity, u)
    }

    /// Forward with the residual branch replaced by a caller-supplied map;
    /// severs the branch's dependence on x so gradient-path analyses can
    /// isolate how gates react to the identity signals alone.
    pub fn forward_with_residual(&self, ctx: &mut FwdCtx, x: Var, u: Var) -> Result<Var> {
        let pre = self.bn1.forward(ctx, x)?;
        let pre = ctx.tape.relu(pre)?;
        let identity = match &self.projection {
            Some(p) => p.forward(ctx, pre)?,
            None => x,
        };
        self.combine(ctx, identity, u)
    }

    /// Gates as seen for input x with a caller-supplied residual branch.
    pub fn gates_with_residual(
        &self,
        ctx: &mut FwdCtx,
        x: Var,
        u: Var,
    ) -> Result<Option<Var>> {
        let pre = self.bn1.forward(ctx, x)?;
        let pre = ctx.tape.relu(pre)?;
        let identity = match &self.projection {
            Some(p) => p.forward(ctx, pre)?,
            None => x,
        };
        self.gate_vector(ctx, identity, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ini::InnerImageConfig;
    use crate::params::Bound;
    use crate::tape::Mode;
    use rand::SeedableRng;

    fn ctx_parts(store: &ParamStore) -> (Tape, Bound) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        (tape, bound)
    }

    #[test]
    fn stacked_map_puts_residual_above_identity() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::from_vec(&[1, 3], vec![1., 2., 3.]).unwrap());
        let i = tape.leaf(Tensor::from_vec(&[1, 3], vec![7., 8., 9.]).unwrap());
        let m = stack_signals(&mut tape, r, i).unwrap();
        assert_eq!(tape.shape(m), &[1, 1, 2, 3]);
        assert_eq!(tape.value(m).data(), &[1., 2., 3., 7., 8., 9.]);
    }

    #[test]
    fn alt_fold_interleaves_identity_then_residual() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::from_vec(&[1, 4], vec![1., 2., 3., 4.]).unwrap());
        let i = tape.leaf(Tensor::from_vec(&[1, 4], vec![5., 6., 7., 8.]).unwrap());
        // 2C = 8 folded 4x2: chunks of 2 columns.
        let m = alt_fold(&mut tape, r, i, 4, 2).unwrap();
        assert_eq!(tape.shape(m), &[1, 1, 4, 2]);
        #[rustfmt::skip]
        let expected = vec![
            5., 6.,   // identity chunk 0
            1., 2.,   // residual chunk 0
            7., 8.,   // identity chunk 1
            3., 4.,   // residual chunk 1
        ];
        assert_eq!(tape.value(m).data(), &expected[..]);
    }

    #[test]
    fn alt_fold_rejects_odd_rows_and_bad_cell_counts() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::zeros(&[1, 4]));
        let i = tape.leaf(Tensor::zeros(&[1, 4]));
        assert!(alt_fold(&mut tape, r, i, 3, 3).is_err());
        assert!(alt_fold(&mut tape, r, i, 2, 3).is_err());
    }

    #[test]
    fn alt_fold_is_a_permutation_of_the_signals() {
        let mut tape = Tape::new();
        let rv: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let iv: Vec<f64> = (100..108).map(|v| v as f64).collect();
        let r = tape.leaf(Tensor::from_vec(&[1, 8], rv.clone()).unwrap());
        let i = tape.leaf(Tensor::from_vec(&[1, 8], iv.clone()).unwrap());
        let m = alt_fold(&mut tape, r, i, 4, 4).unwrap();
        let mut got: Vec<f64> = tape.value(m).data().to_vec();
        let mut want: Vec<f64> = rv.into_iter().chain(iv).collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
    }

    #[test]
    fn stacked_signal_counts_follow_case_split() {
        let c = 16;
        let simple1 = crate::gfilter::GFilterSet::preset("simple-1", 1).unwrap();
        assert_eq!(stacked_signal_count(&simple1.specs, c), c);
        let simple3 = crate::gfilter::GFilterSet::preset("simple-3", 1).unwrap();
        // 1x1 -> 2*C, 2x1 -> C, 2x2 -> C-1
        assert_eq!(stacked_signal_count(&simple3.specs, c), 2 * c + c + (c - 1));
    }

    #[test]
    fn stacked_mode_rejects_tall_filters() {
        let err = JointConfig::resolve(
            16,
            "square-1",
            16,
            true,
            None,
            FoldFamily::Generic,
            true,
            false,
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("3x3"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(JointConfig::resolve(
            16,
            "simple-3",
            16,
            true,
            None,
            FoldFamily::Generic,
            true,
            false,
        )
        .is_ok());
    }

    fn joint_unit(channels: usize, stacked: bool) -> (ParamStore, ResidualUnit) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preset = if stacked { "simple-3" } else { "square-2" };
        let cfg = JointConfig::resolve(
            channels,
            preset,
            8,
            stacked,
            None,
            FoldFamily::Generic,
            true,
            false,
        )
        .unwrap();
        let gate = JointGate::new(&mut store, &mut rng, "unit.att", cfg).unwrap();
        let unit = ResidualUnit::new(
            &mut store,
            &mut rng,
            "unit",
            channels,
            channels,
            1,
            UnitAttention::Joint(gate),
        );
        (store, unit)
    }

    #[test]
    fn zero_residual_branch_passes_input_through() {
        let (store, unit) = joint_unit(8, true);
        let mut store = store;
        let (mut tape, bound) = ctx_parts(&store);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let data: Vec<f64> = (0..8 * 9).map(|v| (v as f64) * 0.1 - 3.0).collect();
        let x = ctx.tape.leaf(Tensor::from_vec(&[1, 8, 3, 3], data.clone()).unwrap());
        let u = ctx.tape.leaf(Tensor::zeros(&[1, 8, 3, 3]));
        let y = unit.forward_with_residual(&mut ctx, x, u).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn forced_identity_gate_reduces_to_plain_sum() {
        let (store, mut unit) = joint_unit(8, false);
        unit.attention.force_identity_gate(true);
        let mut store = store;
        let (mut tape, bound) = ctx_parts(&store);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let xd: Vec<f64> = (0..8 * 4).map(|v| (v as f64) * 0.05).collect();
        let ud: Vec<f64> = (0..8 * 4).map(|v| 1.0 - (v as f64) * 0.01).collect();
        let x = ctx.tape.leaf(Tensor::from_vec(&[1, 8, 2, 2], xd.clone()).unwrap());
        let u = ctx.tape.leaf(Tensor::from_vec(&[1, 8, 2, 2], ud.clone()).unwrap());
        let y = unit.forward_with_residual(&mut ctx, x, u).unwrap();
        let want: Vec<f64> = xd.iter().zip(&ud).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(y).data(), &want[..]);
    }

    #[test]
    fn joint_gates_react_to_identity_but_plain_gates_do_not() {
        // With the residual branch pinned to a constant, only the joint gate
        // can see x at all.
        let channels = 8;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = InnerImageConfig::resolve(
            channels,
            "simple-3",
            8,
            Some((2, 4)),
            FoldFamily::Generic,
            true,
            false,
        )
        .unwrap();
        let block = IniBlock::new(&mut store, &mut rng, "plain", cfg).unwrap();
        let plain_unit = ResidualUnit::new(
            &mut store,
            &mut rng,
            "plainunit",
            channels,
            channels,
            1,
            UnitAttention::Plain(block),
        );
        let (joint_store, joint_unit) = joint_unit(channels, true);

        let probe = |store: &mut ParamStore, unit: &ResidualUnit, xval: f64| -> Vec<f64> {
            let (mut tape, bound) = ctx_parts(store);
            let mut ctx =
                FwdCtx { tape: &mut tape, bound: &bound, store, mode: Mode::Eval };
            let x = ctx
                .tape
                .leaf(Tensor::full(&[1, channels, 2, 2], xval));
            let u = ctx.tape.leaf(Tensor::full(&[1, channels, 2, 2], 0.7));
            let s = unit.gates_with_residual(&mut ctx, x, u).unwrap().unwrap();
            tape.value(s).data().to_vec()
        };

        let mut store = store;
        let p1 = probe(&mut store, &plain_unit, 0.3);
        let p2 = probe(&mut store, &plain_unit, 1.1);
        assert_eq!(p1, p2, "ungated-by-x path must not react to x");

        let mut joint_store = joint_store;
        let j1 = probe(&mut joint_store, &joint_unit, 0.3);
        let j2 = probe(&mut joint_store, &joint_unit, 1.1);
        assert_ne!(j1, j2, "joint path must react to x");
    }

    #[test]
    fn downsampling_unit_halves_extent_and_widens() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let unit = ResidualUnit::new(
            &mut store,
            &mut rng,
            "down",
            4,
            8,
            2,
            UnitAttention::None,
        );
        let (mut tape, bound) = ctx_parts(&store);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let x = ctx.tape.leaf(Tensor::ones(&[2, 4, 8, 8]));
        let y = unit.forward(&mut ctx, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 4, 4]);
    }
}
