//! The folded-map channel attention block. Channel signals are squeezed to a
//! vector, folded row-major into a small 2-D map, scanned by a bank of
//! grouping filters (each shape learning several instances), averaged across
//! instances, normalized, flattened, and passed through a two-layer encoder
//! whose sigmoid output re-weights the original channels.

use crate::error::{Error, Result};
use crate::gfilter::{GFilterSet, GFilterSpec};
use crate::nn::{BatchNorm, FwdCtx};
use crate::params::{EntryKind, ParamId, ParamStore, uniform_fan_in};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Which family's folding default applies when no explicit shape is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldFamily {
    /// rows = total/16, cols = 16
    Generic,
    /// rows = 8, cols = total/8
    AllCnn,
    /// rows = 20, cols = total/20
    Wrn,
}

/// Fold shape for `total` signals: the family default when it divides evenly
/// (and satisfies the evenness constraint), otherwise the most-square
/// factorization.
pub fn default_fold_shape(
    total: usize,
    family: FoldFamily,
    require_even_rows: bool,
) -> Result<(usize, usize)> {
    let preferred: Option<(usize, usize)> = match family {
        FoldFamily::Generic => (total % 16 == 0 && total >= 16).then(|| (total / 16, 16)),
        FoldFamily::AllCnn => (total % 8 == 0 && total >= 8).then(|| (8, total / 8)),
        FoldFamily::Wrn => (total % 20 == 0 && total >= 20).then(|| (20, total / 20)),
    };
    if let Some((r, c)) = preferred {
        if !require_even_rows || r % 2 == 0 {
            return Ok((r, c));
        }
    }
    most_square_shape(total, require_even_rows)
}

/// Divisor pair (r, c) with r*c = total minimizing |r - c|; ties prefer the
/// wide orientation (r <= c).
pub fn most_square_shape(total: usize, require_even_rows: bool) -> Result<(usize, usize)> {
    if total == 0 {
        return Err(Error::Config("cannot fold zero signals".into()));
    }
    let mut best: Option<(usize, usize)> = None;
    for r in 1..=total {
        if total % r != 0 {
            continue;
        }
        if require_even_rows && r % 2 != 0 {
            continue;
        }
        let c = total / r;
        let better = match best {
            None => true,
            Some((br, bc)) => {
                let d = (r as i64 - c as i64).abs();
                let bd = (br as i64 - bc as i64).abs();
                d < bd || (d == bd && r <= c && br > bc)
            }
        };
        if better {
            best = Some((r, c));
        }
    }
    best.ok_or_else(|| {
        Error::Config(format!(
            "no factorization of {total} signals with even rows exists"
        ))
    })
}

/// Global average pool: per-channel mean over the spatial extent, [B,C,H,W]
/// down to [B,C].
pub fn squeeze(tape: &mut Tape, u: Var) -> Result<Var> {
    tape.global_avg_pool(u)
}

/// Row-major fold of [B,C] signals into a [B,1,rows,cols] map; rows*cols must
/// equal C. Channel c lands at (c / cols, c % cols).
pub fn fold(tape: &mut Tape, signals: Var, rows: usize, cols: usize) -> Result<Var> {
    let shape = tape.shape(signals).to_vec();
    if shape.len() != 2 || rows * cols != shape[1] {
        return Err(Error::ShapeMismatch {
            context: format!("fold to {rows}x{cols}"),
            expected: vec![shape.first().copied().unwrap_or(0), rows * cols],
            got: shape,
        });
    }
    tape.reshape(signals, &[shape[0], 1, rows, cols])
}

/// Valid stride-1 scan of a folded map by all instances of one filter shape:
/// map [B,1,N,M] against weights [count,1,a,b] gives [B,count,n,m]. The
/// per-instance scalar bias is optional so verification paths can scan with
/// bare weights.
pub fn gfilter_scan(
    tape: &mut Tape,
    map: Var,
    weights: Var,
    bias: Option<Var>,
    dilation: usize,
) -> Result<Var> {
    let scanned = tape.conv2d(map, weights, 1, dilation, 0)?;
    match bias {
        Some(b) => tape.add_channel_bias(scanned, b),
        None => Ok(scanned),
    }
}

/// Mean over the instance axis: [B,count,n,m] -> [B,1,n,m].
pub fn average_over_filters(tape: &mut Tape, scanned: Var) -> Result<Var> {
    tape.mean_channels(scanned)
}

/// Side-by-side concatenation of per-shape scan stacks with zero fill under
/// the shorter blocks; instance axes must agree.
pub fn aggregate_multi_shape(tape: &mut Tape, scans: &[Var]) -> Result<Var> {
    tape.concat_zero_fill(scans)
}

/// Resolved configuration of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerImageConfig {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// Reduction ratio: both the filter instance count and the encoder
    /// bottleneck are max(1, channels / t).
    pub t: usize,
    pub preset: String,
    pub aggregation: bool,
    pub dilated: bool,
}

impl InnerImageConfig {
    /// Validate and fill defaults. `fold_shape` of None picks the family
    /// default for `channels` signals.
    pub fn resolve(
        channels: usize,
        preset: &str,
        t: usize,
        fold_shape: Option<(usize, usize)>,
        family: FoldFamily,
        aggregation: bool,
        dilated: bool,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("attention block needs at least one channel".into()));
        }
        if t == 0 {
            return Err(Error::Config("reduction ratio t must be >= 1".into()));
        }
        let (rows, cols) = match fold_shape {
            Some((r, c)) => {
                if r * c != channels {
                    return Err(Error::Config(format!(
                        "fold shape {r}x{c} does not hold {channels} channel signals"
                    )));
                }
                (r, c)
            }
            None => default_fold_shape(channels, family, false)?,
        };
        let cfg = InnerImageConfig {
            channels,
            rows,
            cols,
            t,
            preset: preset.to_string(),
            aggregation,
            dilated,
        };
        // Surface preset/aggregation problems at resolve time.
        let set = cfg.filter_set(1)?;
        if !cfg.aggregation && set.specs.len() > 1 {
            return Err(Error::Config(format!(
                "preset '{}' has {} filter shapes; enable aggregation or pick a single-shape preset",
                cfg.preset,
                set.specs.len()
            )));
        }
        Ok(cfg)
    }

    /// Instances per filter shape and encoder bottleneck width.
    pub fn instances(&self) -> usize {
        (self.channels / self.t).max(1)
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.t).max(1)
    }

    pub fn filter_set(&self, count: usize) -> Result<GFilterSet> {
        let mut set = GFilterSet::preset(&self.preset, count)?;
        if self.dilated && !self.preset.ends_with("-d") {
            let (r, c, d) = crate::gfilter::DILATED_ADDON;
            set.specs.push(GFilterSpec::new(r, c, d, count)?);
            set.name = format!("{}-d", set.name);
        }
        Ok(set)
    }
}

/// Flattened signal count produced by scanning a rows x cols map with the
/// given shapes and aggregating with the zero-fill law.
pub fn grouped_signal_count(specs: &[GFilterSpec], rows: usize, cols: usize) -> usize {
    let mut max_n = 0;
    let mut sum_m = 0;
    for s in specs {
        if let Some((n, m)) = s.scan_extent(rows, cols) {
            max_n = max_n.max(n);
            sum_m += m;
        }
    }
    max_n * sum_m
}

/// One learned filter bank: all instances of one shape plus their biases.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub spec: GFilterSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// The channel attention block for ordinary (non-residual) feature maps.
#[derive(Clone, Debug)]
pub struct IniBlock {
    pub config: InnerImageConfig,
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

impl IniBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: InnerImageConfig,
    ) -> Result<Self> {
        let count = config.instances();
        let set = config.filter_set(count)?;
        let effective = set.effective_specs(config.rows, config.cols)?;
        Self::from_shapes(store, rng, name, config, effective)
    }

    /// Build a block over an explicit shape list instead of a named preset.
    /// The equivalence and proportionality checks construct their single-
    /// 1x1-filter blocks this way. Shapes keep their own instance counts and
    /// remain subject to the fit rule.
    pub fn with_specs(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: InnerImageConfig,
        specs: Vec<GFilterSpec>,
    ) -> Result<Self> {
        let set = GFilterSet { name: format!("{name}-custom"), specs };
        let effective = set.effective_specs(config.rows, config.cols)?;
        Self::from_shapes(store, rng, name, config, effective)
    }

    fn from_shapes(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: InnerImageConfig,
        effective: Vec<GFilterSpec>,
    ) -> Result<Self> {
        let banks = register_banks(store, rng, name, &effective)?;
        let norm = BatchNorm::new(store, &format!("{name}.norm"), 1);
        let group_signals = grouped_signal_count(&effective, config.rows, config.cols);
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
        Ok(IniBlock {
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

    /// Test-only identity hook: forces the gate vector to all ones so the
    /// block passes features through unchanged. Not reachable from any
    /// configuration key.
    pub fn force_identity_gate(&mut self, on: bool) {
        self.force_identity = on;
    }

    /// Scan + aggregate + instance-average on a folded [B,1,N,M] map,
    /// before normalization: the raw grouping map [B,1,n,m].
    pub fn group_map(&self, ctx: &mut FwdCtx, folded: Var) -> Result<Var> {
        let mut scans = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            let w = ctx.param(bank.weight)?;
            let b = ctx.param(bank.bias)?;
            scans.push(gfilter_scan(ctx.tape, folded, w, Some(b), bank.spec.dilation)?);
        }
        let stacked = if scans.len() == 1 {
            scans[0]
        } else {
            aggregate_multi_shape(ctx.tape, &scans)?
        };
        average_over_filters(ctx.tape, stacked)
    }

    /// Flattened group signals with no normalization — the quantity the
    /// linear-proportionality and encoder-equivalence checks reason about.
    pub fn raw_group_signals(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let signals = squeeze(ctx.tape, u)?;
        let folded = fold(ctx.tape, signals, self.config.rows, self.config.cols)?;
        let map = self.group_map(ctx, folded)?;
        let b = ctx.tape.shape(map)[0];
        ctx.tape.reshape(map, &[b, self.group_signals])
    }

    /// Encoder over flattened group signals: sigmoid(w2 * relu(w1 * v + b1) + b2).
    pub fn encode_attention(&self, ctx: &mut FwdCtx, flat: Var) -> Result<Var> {
        let w1 = ctx.param(self.w1)?;
        let b1 = ctx.param(self.b1)?;
        let w2 = ctx.param(self.w2)?;
        let b2 = ctx.param(self.b2)?;
        let h = ctx.tape.linear(flat, w1, b1)?;
        let h = ctx.tape.relu(h)?;
        let z = ctx.tape.linear(h, w2, b2)?;
        ctx.tape.sigmoid(z)
    }

    /// Full gate path: squeeze, fold, scan, normalize, flatten, encode.
    /// Output [B,C], every entry strictly inside (0,1).
    pub fn gates(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let b = ctx.tape.shape(u)[0];
        if self.force_identity {
            let ones = Tensor::ones(&[b, self.config.channels]);
            return Ok(ctx.tape.constant(ones));
        }
        let signals = squeeze(ctx.tape, u)?;
        let folded = fold(ctx.tape, signals, self.config.rows, self.config.cols)?;
        let map = self.group_map(ctx, folded)?;
        let normed = self.norm.forward(ctx, map)?;
        let flat = ctx.tape.reshape(normed, &[b, self.group_signals])?;
        self.encode_attention(ctx, flat)
    }

    /// Gate path skipping batch normalization; used by the equivalence
    /// checks, which compare against encoders that have no normalizer.
    pub fn gates_without_norm(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let flat = self.raw_group_signals(ctx, u)?;
        self.encode_attention(ctx, flat)
    }

    /// Re-weight: out[b,c,:,:] = s[b,c] * u[b,c,:,:].
    pub fn apply_attention(&self, ctx: &mut FwdCtx, u: Var, s: Var) -> Result<Var> {
        ctx.tape.scale_channels(u, s)
    }

    /// The whole block: same shape out as in.
    pub fn forward(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        let s = self.gates(ctx, u)?;
        self.apply_attention(ctx, u, s)
    }
}

pub(crate) fn register_banks(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    specs: &[GFilterSpec],
) -> Result<Vec<FilterBank>> {
    let mut banks = Vec::with_capacity(specs.len());
    for spec in specs {
        let fan_in = spec.rows * spec.cols;
        let weight = store.register(
            format!("{name}.filter.{}.weight", spec.label()),
            uniform_fan_in(&[spec.count, 1, spec.rows, spec.cols], fan_in, rng),
            EntryKind::Trainable { decay: true },
        );
        let bias = store.register(
            format!("{name}.filter.{}.bias", spec.label()),
            Tensor::zeros(&[spec.count]),
            EntryKind::Trainable { decay: false },
        );
        banks.push(FilterBank { spec: *spec, weight, bias });
    }
    Ok(banks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use rand::SeedableRng;

    fn ctx_parts(store: &ParamStore) -> (Tape, crate::params::Bound) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        (tape, bound)
    }

    fn make_block(channels: usize, preset: &str, shape: (usize, usize), t: usize) -> (ParamStore, IniBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = InnerImageConfig::resolve(
            channels,
            preset,
            t,
            Some(shape),
            FoldFamily::Generic,
            true,
            false,
        )
        .unwrap();
        let block = IniBlock::new(&mut store, &mut rng, "att", cfg).unwrap();
        (store, block)
    }

    #[test]
    fn fold_is_row_major() {
        // 6 channels folded 2x3: channel 3 (0-based) lands at (1,0).
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(&[1, 6], vec![0., 1., 2., 3., 4., 5.]).unwrap());
        let m = fold(&mut tape, s, 2, 3).unwrap();
        assert_eq!(tape.shape(m), &[1, 1, 2, 3]);
        assert_eq!(tape.value(m).at(&[0, 0, 1, 0]), 3.0);
        assert_eq!(tape.value(m).at(&[0, 0, 0, 2]), 2.0);
    }

    #[test]
    fn fold_requires_matching_cell_count() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(&[1, 6]));
        assert!(fold(&mut tape, s, 2, 2).is_err());
    }

    #[test]
    fn fold_shape_defaults() {
        assert_eq!(default_fold_shape(64, FoldFamily::Generic, false).unwrap(), (4, 16));
        assert_eq!(default_fold_shape(64, FoldFamily::AllCnn, false).unwrap(), (8, 8));
        assert_eq!(default_fold_shape(80, FoldFamily::Wrn, false).unwrap(), (20, 4));
        // 40 is not divisible by 16 -> most-square 5x8
        assert_eq!(default_fold_shape(40, FoldFamily::Generic, false).unwrap(), (5, 8));
        // even-rows constraint skips odd preferred rows
        assert_eq!(default_fold_shape(48, FoldFamily::Generic, true).unwrap(), (6, 8));
        assert_eq!(default_fold_shape(6, FoldFamily::Generic, true).unwrap(), (2, 3));
        assert_eq!(default_fold_shape(2, FoldFamily::Generic, true).unwrap(), (2, 1));
    }

    #[test]
    fn most_square_prefers_wide() {
        assert_eq!(most_square_shape(32, false).unwrap(), (4, 8));
        assert_eq!(most_square_shape(36, false).unwrap(), (6, 6));
        assert_eq!(most_square_shape(7, false).unwrap(), (1, 7));
    }

    #[test]
    fn aggregation_shape_law_with_zero_fill() {
        // 4x8 map scanned by {1x1, 3x3}: blocks 4x8 and 2x6 -> 4x14, zeros in
        // rows 2..4 of the second block's columns.
        let (store, block) = make_block(32, "square-2", (4, 8), 16);
        let (mut tape, bound) = ctx_parts(&store);
        let mut store = store;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let u = ctx.tape.leaf(Tensor::ones(&[1, 32, 2, 2]));
        let signals = squeeze(ctx.tape, u).unwrap();
        let folded = fold(ctx.tape, signals, 4, 8).unwrap();
        let map = block.group_map(&mut ctx, folded).unwrap();
        assert_eq!(tape.shape(map), &[1, 1, 4, 14]);
        let v = tape.value(map);
        for r in 2..4 {
            for c in 8..14 {
                assert_eq!(v.at(&[0, 0, r, c]), 0.0, "cell ({r},{c}) must be zero fill");
            }
        }
        assert_eq!(block.group_signals, 4 * 14);
    }

    #[test]
    fn single_shape_skips_aggregation() {
        let (store, block) = make_block(32, "square-1", (4, 8), 16);
        assert_eq!(block.group_signals, 2 * 6);
        let (mut tape, bound) = ctx_parts(&store);
        let mut store = store;
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let u = ctx.tape.leaf(Tensor::ones(&[2, 32, 3, 3]));
        let s = block.gates(&mut ctx, u).unwrap();
        assert_eq!(tape.shape(s), &[2, 32]);
    }

    #[test]
    fn zero_encoder_weights_give_half_gates() {
        let (mut store, block) = make_block(32, "square-3", (4, 8), 16);
        for id in [block.w1, block.w2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let (mut tape, bound) = ctx_parts(&store);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let u = ctx.tape.leaf(Tensor::ones(&[1, 32, 2, 2]));
        let s = block.gates(&mut ctx, u).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let (store, block) = make_block(16, "mix-5", (4, 4), 8);
        let mut store = store;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let (mut tape, bound) = ctx_parts(&store);
            let mut ctx =
                FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
            let data: Vec<f64> = (0..2 * 16 * 3 * 3)
                .map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0))
                .collect();
            let u = ctx.tape.leaf(Tensor::from_vec(&[2, 16, 3, 3], data).unwrap());
            let s = block.gates(&mut ctx, u).unwrap();
            for &v in tape.value(s).data() {
                assert!(v > 0.0 && v < 1.0, "trial {trial}: gate {v} escaped (0,1)");
            }
        }
    }

    #[test]
    fn forced_identity_gate_passes_features_through() {
        let (store, mut block) = make_block(32, "square-3", (4, 8), 16);
        block.force_identity_gate(true);
        let mut store = store;
        let (mut tape, bound) = ctx_parts(&store);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let data: Vec<f64> = (0..32 * 4).map(|v| v as f64 * 0.25 - 3.0).collect();
        let u = ctx.tape.leaf(Tensor::from_vec(&[1, 32, 2, 2], data.clone()).unwrap());
        let y = block.forward(&mut ctx, u).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn block_preserves_shape_across_presets_and_maps() {
        for (preset, shape) in [
            ("square-3", (2usize, 16usize)),
            ("square-5", (4, 8)),
            ("mix-5", (4, 8)),
            ("horizon-4", (2, 16)),
            ("vertical-3", (8, 4)),
            ("square-3-d", (8, 4)),
        ] {
            let (store, block) = make_block(32, preset, shape, 16);
            let mut store = store;
            let (mut tape, bound) = ctx_parts(&store);
            let mut ctx =
                FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
            let u = ctx.tape.leaf(Tensor::ones(&[2, 32, 3, 5]));
            let y = block.forward(&mut ctx, u).unwrap();
            assert_eq!(tape.shape(y), &[2, 32, 3, 5], "preset {preset}");
        }
    }

    #[test]
    fn aggregation_flag_rejects_multi_shape_presets() {
        let err = InnerImageConfig::resolve(
            32,
            "square-3",
            16,
            Some((4, 8)),
            FoldFamily::Generic,
            false,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // Single-shape presets are fine without aggregation.
        assert!(InnerImageConfig::resolve(
            32,
            "square-1",
            16,
            Some((4, 8)),
            FoldFamily::Generic,
            false,
            false,
        )
        .is_ok());
    }

    #[test]
    fn grouped_signal_count_examples() {
        let set = GFilterSet::preset("square-2", 1).unwrap();
        // 4x8: 1x1 -> 4x8, 3x3 -> 2x6; law: 4 * (8 + 6)
        assert_eq!(grouped_signal_count(&set.specs, 4, 8), 4 * 14);
        let single = GFilterSet::preset("square-1", 1).unwrap();
        assert_eq!(grouped_signal_count(&single.specs, 4, 8), 2 * 6);
    }
}
