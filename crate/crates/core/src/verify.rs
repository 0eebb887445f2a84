//! Independent oracles for the test and acceptance suites.
//!
//! - central-difference gradients to cross-check the tape;
//! - a channel-group enumerator built purely from the fold index formulas
//!   (it shares no convolution code with the forward path) plus a
//!   forward-sensitivity probe that extracts the same sets *from* the
//!   forward path, so the two can be compared;
//! - closed-form parameter counting for the attention block;
//! - the algebraic properties of the gate encoder (one-hot proportionality,
//!   equivalence to a plain squeeze-excite encoder, and the channel/group
//!   split of the first encoder layer).
//!
//! Every suite emits machine-readable [`CheckRecord`]s instead of panicking,
//! so callers (CLI, acceptance tests) decide how to react.

use crate::error::{Error, Result};
use crate::gfilter::{GFilterSet, GFilterSpec, DILATED_ADDON};
use crate::ini::{fold, grouped_signal_count, FoldFamily, IniBlock, InnerImageConfig};
use crate::nn::{FwdCtx, SeBlock};
use crate::params::{EntryKind, ParamId, ParamStore};
use crate::residual::{alt_fold, stack_signals, JointConfig, JointGate};
use crate::spatial::SpatialAttention;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FD step for central differences.
pub const FD_EPS: f64 = 1e-5;
/// Relative-error bound for gradient checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Bound for the exact-algebra theory checks.
pub const THEORY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
}

/// One verification result.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    pub status: CheckStatus,
    pub max_err: f64,
    pub tolerance: f64,
}

impl CheckRecord {
    pub fn from_err(name: &str, max_err: f64, tolerance: f64) -> CheckRecord {
        let status = if max_err <= tolerance { CheckStatus::Pass } else { CheckStatus::Fail };
        CheckRecord { name: name.to_string(), status, max_err, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"name\":\"{}\",\"status\":\"{}\",\"max_err\":{:?},\"tolerance\":{:?}}}",
            self.name,
            if self.passed() { "pass" } else { "fail" },
            self.max_err,
            self.tolerance
        )
    }
}

/// Deliberate breakage for exercising the failure path end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultInjection {
    /// Flip the sign of one analytic gradient inside the gradient suite.
    WrongSignGrad,
}

/// Central-difference gradient of a scalar function at x.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                location: format!("finite-difference probe at coordinate {i}"),
                value: if fp.is_finite() { fm } else { fp },
            });
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// |a-b| / max(1, |a|, |b|), the scale-aware error used by gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Group membership oracles
// ---------------------------------------------------------------------------

/// How 1-D channel signals were arranged into the 2-D map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldKind {
    /// C = rows*cols signals, cell (r,c) holds channel r*cols + c.
    RowMajor,
    /// 2 x C: row 0 holds residual signals 0..C, row 1 identity C..2C.
    Stacked,
    /// rows*cols = 2C, even rows identity (ids C..2C), odd rows residual.
    AltFolded,
}

impl FoldKind {
    /// Signal id sitting at map cell (r, c).
    fn channel_at(&self, r: usize, c: usize, rows: usize, cols: usize) -> usize {
        match self {
            FoldKind::RowMajor => r * cols + c,
            FoldKind::Stacked => {
                let channels = cols;
                if r == 0 { c } else { channels + c }
            }
            FoldKind::AltFolded => {
                let channels = rows * cols / 2;
                let chunk = r / 2;
                if r % 2 == 0 { channels + chunk * cols + c } else { chunk * cols + c }
            }
        }
    }

    /// Total number of distinct signal ids on the map.
    pub fn total_channels(&self, rows: usize, cols: usize) -> usize {
        rows * cols
    }
}

/// For one filter shape on one map: the set of signal ids each output cell
/// covers (cells in row-major scan order).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMembership {
    pub out_rows: usize,
    pub out_cols: usize,
    pub cells: Vec<Vec<usize>>,
}

impl GroupMembership {
    /// How many groups each signal id joins.
    pub fn overlap_counts(&self, total_channels: usize) -> Vec<usize> {
        let mut counts = vec![0usize; total_channels];
        for cell in &self.cells {
            for &ch in cell {
                counts[ch] += 1;
            }
        }
        counts
    }
}

/// Enumerate channel groups from the fold's index arithmetic alone.
pub fn enumerate_groups(
    spec: &GFilterSpec,
    rows: usize,
    cols: usize,
    kind: FoldKind,
) -> Result<GroupMembership> {
    let (n, m) = spec.scan_extent(rows, cols).ok_or_else(|| {
        let (er, ec) = spec.effective_extent();
        Error::KernelTooLarge {
            extent_rows: er,
            extent_cols: ec,
            input_rows: rows,
            input_cols: cols,
        }
    })?;
    let d = spec.dilation;
    let mut cells = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let mut members = Vec::with_capacity(spec.rows * spec.cols);
            for u in 0..spec.rows {
                for v in 0..spec.cols {
                    members.push(kind.channel_at(i + d * u, j + d * v, rows, cols));
                }
            }
            members.sort_unstable();
            cells.push(members);
        }
    }
    Ok(GroupMembership { out_rows: n, out_cols: m, cells })
}

/// Extract the same membership sets from the forward path: place a unit
/// bump on each channel signal, scan with an all-ones filter through the
/// real fold and convolution ops, and record which output cells move.
pub fn sensitivity_groups(
    spec: &GFilterSpec,
    rows: usize,
    cols: usize,
    kind: FoldKind,
) -> Result<GroupMembership> {
    let total = kind.total_channels(rows, cols);
    let half = total / 2;
    let build_map = |tape: &mut Tape, bumped: Option<usize>| -> Result<Var> {
        match kind {
            FoldKind::RowMajor => {
                let mut sig = Tensor::zeros(&[1, total]);
                if let Some(k) = bumped {
                    sig.data_mut()[k] = 1.0;
                }
                let leaf = tape.leaf(sig);
                fold(tape, leaf, rows, cols)
            }
            FoldKind::Stacked | FoldKind::AltFolded => {
                let mut residual = Tensor::zeros(&[1, half]);
                let mut identity = Tensor::zeros(&[1, half]);
                if let Some(k) = bumped {
                    if k < half {
                        residual.data_mut()[k] = 1.0;
                    } else {
                        identity.data_mut()[k - half] = 1.0;
                    }
                }
                let r = tape.leaf(residual);
                let i = tape.leaf(identity);
                if kind == FoldKind::Stacked {
                    stack_signals(tape, r, i)
                } else {
                    alt_fold(tape, r, i, rows, cols)
                }
            }
        }
    };
    let scan = |bumped: Option<usize>| -> Result<(Vec<usize>, Vec<f64>)> {
        let mut tape = Tape::new();
        let map = build_map(&mut tape, bumped)?;
        let kernel = tape.leaf(Tensor::ones(&[1, 1, spec.rows, spec.cols]));
        let out = tape.conv2d(map, kernel, 1, spec.dilation, 0)?;
        let shape = tape.shape(out).to_vec();
        Ok((shape, tape.value(out).data().to_vec()))
    };

    let (shape, base) = scan(None)?;
    let (out_rows, out_cols) = (shape[2], shape[3]);
    let mut cells = vec![Vec::new(); out_rows * out_cols];
    for k in 0..total {
        let (_, moved) = scan(Some(k))?;
        for (cell, (&b, &m)) in base.iter().zip(&moved).enumerate() {
            if (m - b).abs() > 0.5 {
                cells[cell].push(k);
            }
        }
    }
    Ok(GroupMembership { out_rows, out_cols, cells })
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

/// Closed-form trainable-parameter count of one channel-attention block,
/// computed from the filter shapes and encoder sizes alone (never from the
/// parameter store): instances*sum(a_j*b_j) filter weights +
/// instances*shape_count biases + group_signals*hidden + hidden +
/// hidden*channels + channels + 2 norm affine terms.
pub fn ini_block_param_formula(
    channels: usize,
    t: usize,
    preset: &str,
    dilated: bool,
    rows: usize,
    cols: usize,
) -> Result<u64> {
    let instances = (channels / t).max(1);
    let hidden = (channels / t).max(1);
    let mut set = GFilterSet::preset(preset, 1)?;
    if dilated && !preset.ends_with("-d") {
        let (r, c, d) = DILATED_ADDON;
        set.specs.push(GFilterSpec::new(r, c, d, 1)?);
    }
    let effective = set.effective_specs(rows, cols)?;
    let filter_weights: usize = effective.iter().map(|s| s.rows * s.cols).sum();
    let group_signals = grouped_signal_count(&effective, rows, cols);
    let total = instances * filter_weights
        + instances * effective.len()
        + group_signals * hidden
        + hidden
        + hidden * channels
        + channels
        + 2;
    Ok(total as u64)
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

fn pseudo(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Sampled parameter coordinates: up to `limit` spread over every trainable.
fn param_probe_coords(store: &ParamStore, limit: usize) -> Vec<(ParamId, usize)> {
    let mut coords = Vec::new();
    let trainables: Vec<(usize, usize)> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.kind, EntryKind::Trainable { .. }))
        .map(|(i, e)| (i, e.tensor.numel()))
        .collect();
    if trainables.is_empty() {
        return coords;
    }
    let per = (limit / trainables.len()).max(1);
    for (idx, numel) in trainables {
        let step = (numel / per).max(1);
        for c in (0..numel).step_by(step).take(per) {
            coords.push((ParamId(idx), c));
        }
    }
    coords
}

/// One gradient check fixture: an input tensor plus the parameters of the
/// piece under test. `run` evaluates the scalar loss and (on request) the
/// analytic input gradient.
struct GradFixture<'a> {
    name: &'a str,
    store: ParamStore,
    input: Tensor,
}

impl GradFixture<'_> {
    fn check<F>(
        mut self,
        mut run: F,
        fault: Option<FaultInjection>,
        fault_here: bool,
    ) -> Result<CheckRecord>
    where
        F: FnMut(&mut ParamStore, &Tensor, bool) -> Result<(f64, Vec<f64>)>,
    {
        // Analytic pass: loss value + gradient w.r.t. the input tensor.
        let (_, mut analytic) = run(&mut self.store, &self.input, true)?;
        if fault == Some(FaultInjection::WrongSignGrad) && fault_here {
            for g in &mut analytic {
                *g = -*g;
            }
        }
        let numeric = fd_gradient(
            |x| run(&mut self.store, x, false).map(|(v, _)| v),
            &self.input,
            FD_EPS,
        )?;
        let mut worst = max_rel_err(&analytic, &numeric);

        // Parameter coordinates: compare pulled gradients against FD.
        let coords = param_probe_coords(&self.store, 48);
        run(&mut self.store, &self.input, true)?; // refresh grads
        let grads: Vec<f64> = coords
            .iter()
            .map(|&(id, c)| self.store.get(id).grad.as_ref().map(|g| g[c]).unwrap_or(0.0))
            .collect();
        for (&(id, c), &g) in coords.iter().zip(&grads) {
            let orig = self.store.get(id).data()[c];
            self.store.get_mut(id).data_mut()[c] = orig + FD_EPS;
            let (fp, _) = run(&mut self.store, &self.input, false)?;
            self.store.get_mut(id).data_mut()[c] = orig - FD_EPS;
            let (fm, _) = run(&mut self.store, &self.input, false)?;
            self.store.get_mut(id).data_mut()[c] = orig;
            let fd = (fp - fm) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(g, fd));
        }
        Ok(CheckRecord::from_err(self.name, worst, GRAD_TOL))
    }
}

/// Loss projection: sum(out * R) for a fixed pseudo-random R.
fn project_loss(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let r = tape.constant(proj.clone());
    let mixed = tape.mul(out, r)?;
    tape.sum(mixed)
}

fn plain_block_check(
    preset: &str,
    fault: Option<FaultInjection>,
    fault_here: bool,
) -> Result<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xABCD);
    let channels = 32;
    let cfg = InnerImageConfig::resolve(
        channels,
        preset,
        16,
        Some((4, 8)),
        FoldFamily::Generic,
        true,
        false,
    )?;
    let mut store = ParamStore::new();
    let block = IniBlock::new(&mut store, &mut rng, "blk", cfg)?;
    // Nudge the encoder biases off zero so the sigmoid sits away from its
    // symmetric point and no hidden unit starts exactly at the ReLU kink.
    for entry in store.entries_mut().iter_mut() {
        if entry.name.ends_with(".b1") || entry.name.ends_with(".b2") {
            for (i, v) in entry.tensor.data_mut().iter_mut().enumerate() {
                *v = 0.05 * ((i % 7) as f64 - 3.0);
            }
        }
    }
    let input = pseudo(&[1, channels, 2, 2], &mut rng);
    let proj = pseudo(&[1, channels, 2, 2], &mut rng);
    let name = format!("grad/plain-{preset}");
    let fixture = GradFixture { name: &name, store, input };
    fixture.check(
        |store, x, want_grad| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store, mode: Mode::Train };
            let u = ctx.tape.leaf(x.clone().with_grad());
            let out = block.forward(&mut ctx, u)?;
            let loss = project_loss(&mut tape, out, &proj)?;
            let value = tape.value(loss).scalar_value();
            if !want_grad {
                return Ok((value, Vec::new()));
            }
            store.zero_grads();
            tape.backward(loss)?;
            store.pull_grads(&tape, &bound)?;
            let g = tape
                .grad(u)
                .ok_or_else(|| Error::Train("missing input gradient".into()))?
                .to_vec();
            Ok((value, g))
        },
        fault,
        fault_here,
    )
}

fn joint_check(preset: &str, stacked: bool) -> Result<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1234);
    let channels = 16;
    let batch = 2;
    let fold_shape = if stacked { None } else { Some((4, 8)) };
    let cfg = JointConfig::resolve(
        channels,
        preset,
        8,
        stacked,
        fold_shape,
        FoldFamily::Generic,
        true,
        false,
    )?;
    let mut store = ParamStore::new();
    let gate = JointGate::new(&mut store, &mut rng, "joint", cfg)?;
    // Both signal vectors form one FD input, packed [1, 2, B, C].
    let input = pseudo(&[1, 2, batch, channels], &mut rng);
    let proj = pseudo(&[batch, channels], &mut rng);
    let label = if stacked { "stacked" } else { "alt" };
    let name = format!("grad/joint-{label}-{preset}");
    let fixture = GradFixture { name: &name, store, input };
    fixture.check(
        |store, x, want_grad| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store, mode: Mode::Train };
            let both = ctx.tape.leaf(x.clone().with_grad());
            let r4 = ctx.tape.slice_channels(both, 0, 1)?;
            let residual = ctx.tape.reshape(r4, &[batch, channels])?;
            let i4 = ctx.tape.slice_channels(both, 1, 1)?;
            let identity = ctx.tape.reshape(i4, &[batch, channels])?;
            let gates = gate.gates(&mut ctx, residual, identity)?;
            let loss = project_loss(&mut tape, gates, &proj)?;
            let value = tape.value(loss).scalar_value();
            if !want_grad {
                return Ok((value, Vec::new()));
            }
            store.zero_grads();
            tape.backward(loss)?;
            store.pull_grads(&tape, &bound)?;
            let g = tape
                .grad(both)
                .ok_or_else(|| Error::Train("missing input gradient".into()))?
                .to_vec();
            Ok((value, g))
        },
        None,
        false,
    )
}

fn spatial_check(tau: usize) -> Result<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x77);
    let channels = 8;
    let mut store = ParamStore::new();
    let sp = SpatialAttention::new(&mut store, &mut rng, "sp", channels, tau)?;
    let input = pseudo(&[1, channels, 5, 4], &mut rng);
    let proj = pseudo(&[1, channels, 5, 4], &mut rng);
    let name = format!("grad/spatial-tau-{tau}");
    let fixture = GradFixture { name: &name, store, input };
    fixture.check(
        |store, x, want_grad| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store, mode: Mode::Train };
            let u = ctx.tape.leaf(x.clone().with_grad());
            let out = sp.apply(&mut ctx, u)?;
            let loss = project_loss(&mut tape, out, &proj)?;
            let value = tape.value(loss).scalar_value();
            if !want_grad {
                return Ok((value, Vec::new()));
            }
            store.zero_grads();
            tape.backward(loss)?;
            store.pull_grads(&tape, &bound)?;
            let g = tape
                .grad(u)
                .ok_or_else(|| Error::Train("missing input gradient".into()))?
                .to_vec();
            Ok((value, g))
        },
        None,
        false,
    )
}

/// Finite-difference gradient checks across the block variants.
pub fn grad_suite(fault: Option<FaultInjection>) -> Result<Vec<CheckRecord>> {
    let mut records = Vec::new();
    for preset in ["square-1", "square-3", "mix-5", "mix-5-d"] {
        let fault_here = preset == "square-3";
        records.push(plain_block_check(preset, fault, fault_here)?);
    }
    records.push(joint_check("simple-1", true)?);
    records.push(joint_check("simple-3", true)?);
    records.push(joint_check("square-3", false)?);
    records.push(spatial_check(1)?);
    records.push(spatial_check(4)?);
    Ok(records)
}

// ---------------------------------------------------------------------------
// Group suite
// ---------------------------------------------------------------------------

/// The complete preset catalog used by the equivalence sweep.
pub fn preset_catalog() -> Vec<&'static str> {
    vec![
        "square-1", "square-2", "square-3", "square-4", "square-5",
        "mix-1", "mix-2", "mix-3", "mix-4", "mix-5",
        "horizon-2", "horizon-3", "horizon-5",
        "vertical-2", "vertical-3", "vertical-5",
        "simple-1", "simple-3",
        "square-3-d", "mix-5-d",
    ]
}

/// Compare enumerator and forward-sensitivity memberships for every preset
/// on the given row-major maps. Shapes that do not fit a map are skipped
/// (the discard rule owns those; it is tested separately).
pub fn groups_suite(maps: &[(usize, usize)]) -> Result<Vec<CheckRecord>> {
    let mut records = Vec::new();
    for preset in preset_catalog() {
        for &(rows, cols) in maps {
            let set = GFilterSet::preset(preset, 1)?;
            let mut mismatches = 0usize;
            let mut compared = 0usize;
            for spec in &set.specs {
                if spec.scan_extent(rows, cols).is_none() {
                    continue;
                }
                compared += 1;
                let enumerated = enumerate_groups(spec, rows, cols, FoldKind::RowMajor)?;
                let probed = sensitivity_groups(spec, rows, cols, FoldKind::RowMajor)?;
                if enumerated != probed {
                    mismatches += 1;
                }
            }
            if compared == 0 {
                continue;
            }
            let name = format!("groups/{preset}@{rows}x{cols}");
            records.push(CheckRecord::from_err(&name, mismatches as f64, 0.0));
        }
    }
    // Joint layouts: the same comparison through the stacked and
    // alternating folds.
    for (preset, kind, rows, cols) in [
        ("simple-1", FoldKind::Stacked, 2, 16),
        ("simple-3", FoldKind::Stacked, 2, 16),
        ("square-3", FoldKind::AltFolded, 4, 8),
        ("simple-3", FoldKind::AltFolded, 4, 8),
    ] {
        let set = GFilterSet::preset(preset, 1)?;
        let mut mismatches = 0usize;
        for spec in &set.specs {
            if spec.scan_extent(rows, cols).is_none() {
                continue;
            }
            let enumerated = enumerate_groups(spec, rows, cols, kind)?;
            let probed = sensitivity_groups(spec, rows, cols, kind)?;
            if enumerated != probed {
                mismatches += 1;
            }
        }
        let label = match kind {
            FoldKind::Stacked => "stacked",
            FoldKind::AltFolded => "alt",
            FoldKind::RowMajor => "row",
        };
        let name = format!("groups/{preset}@{label}-{rows}x{cols}");
        records.push(CheckRecord::from_err(&name, mismatches as f64, 0.0));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Theory suite
// ---------------------------------------------------------------------------

fn one_hot_proportionality(seed: u64) -> Result<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 16;
    let cfg = InnerImageConfig::resolve(
        channels,
        "square-2",
        channels, // t = C: a single filter instance, bottleneck of one
        Some((4, 4)),
        FoldFamily::Generic,
        true,
        false,
    )?;
    let specs = vec![GFilterSpec::new(1, 1, 1, 1)?];
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut store = ParamStore::new();
        let block =
            IniBlock::with_specs(&mut store, &mut rng, "onehot", cfg.clone(), specs.clone())?;
        let alpha: f64 = rng.random_range(-2.0..2.0);
        store
            .by_name_mut("onehot.filter.1x1.weight")
            .unwrap()
            .tensor
            .data_mut()[0] = alpha;
        let u = pseudo(&[1, channels, 3, 3], &mut rng);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx =
            FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let uv = ctx.tape.leaf(u.clone());
        let signals = block.raw_group_signals(&mut ctx, uv)?;
        let got = tape.value(signals).data().to_vec();
        assert_eq!(got.len(), channels);

        // Independent expectation: alpha times each channel's plane average.
        let plane = 9.0;
        for c in 0..channels {
            let avg: f64 = u.data()[c * 9..(c + 1) * 9].iter().sum::<f64>() / plane;
            worst = worst.max((got[c] - alpha * avg).abs());
        }
    }
    Ok(CheckRecord::from_err("theory/one-hot-proportionality", worst, THEORY_TOL))
}

fn se_equivalence(seed: u64) -> Result<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 16;
    let t = 4;
    let cfg = InnerImageConfig::resolve(
        channels,
        "square-2",
        t,
        Some((4, 4)),
        FoldFamily::Generic,
        true,
        false,
    )?;
    // Pipeline restricted to one 1x1 group filter with weight 1 and bias 0.
    let specs = vec![GFilterSpec::new(1, 1, 1, 1)?];
    let mut store = ParamStore::new();
    let block = IniBlock::with_specs(&mut store, &mut rng, "pipe", cfg, specs)?;
    store.by_name_mut("pipe.filter.1x1.weight").unwrap().tensor.data_mut()[0] = 1.0;
    let se = SeBlock::new(&mut store, &mut rng, "se", channels, t);

    // Give the biases non-trivial values, then copy the encoder 1:1.
    for (from, to) in [
        ("pipe.encode.w1", "se.w1"),
        ("pipe.encode.b1", "se.b1"),
        ("pipe.encode.w2", "se.w2"),
        ("pipe.encode.b2", "se.b2"),
    ] {
        if from.ends_with("b1") || from.ends_with("b2") {
            let tensor = &mut store.by_name_mut(from).unwrap().tensor;
            for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                *v = 0.1 * ((i % 5) as f64 - 2.0);
            }
        }
        let values = store.by_name(from).unwrap().tensor.data().to_vec();
        store.by_name_mut(to).unwrap().tensor.data_mut().copy_from_slice(&values);
    }

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let u = pseudo(&[2, channels, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx =
            FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let uv = ctx.tape.leaf(u);
        let through_pipeline = block.gates_without_norm(&mut ctx, uv)?;
        let direct = se.gates(&mut ctx, uv)?;
        let a = tape.value(through_pipeline).data();
        let b = tape.value(direct).data();
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(CheckRecord::from_err("theory/se-equivalence", worst, 0.0))
}

fn channels_groups_split(seed: u64) -> Result<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 32;
    let (rows, cols) = (4, 8);
    let cfg = InnerImageConfig::resolve(
        channels,
        "square-2", // {1x1, 3x3}: a pure-channel part plus a true-group part
        4,
        Some((rows, cols)),
        FoldFamily::Generic,
        true,
        false,
    )?;
    let mut store = ParamStore::new();
    let block = IniBlock::new(&mut store, &mut rng, "split", cfg)?;
    let cg = block.group_signals;
    let hidden = block.config.hidden();
    // Column layout of the zero-filled aggregate (max_n x sum_m): shape j
    // owns columns [offset, offset+m_j), live in its first n_j rows only.
    let spans = aggregate_column_spans(&block.effective, rows, cols);
    let sum_m: usize = spans.iter().map(|s| s.width).sum();
    let channel_span = spans[0];
    assert_eq!(channel_span.width, cols);

    let w1 = pseudo(&[hidden, cg], &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let u = pseudo(&[1, channels, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx =
            FwdCtx { tape: &mut tape, bound: &bound, store: &mut store, mode: Mode::Eval };
        let uv = ctx.tape.leaf(u);
        let signals = block.raw_group_signals(&mut ctx, uv)?;
        let v = tape.value(signals).data().to_vec();

        // Zero-filled cells (below a shape's live rows) must hold exact zeros.
        for (i, &x) in v.iter().enumerate() {
            let (row, col) = (i / sum_m, i % sum_m);
            for span in &spans[1..] {
                if col >= span.offset && col < span.offset + span.width && row >= span.live_rows {
                    worst = worst.max(x.abs());
                }
            }
        }

        // Masked first-layer products: keep only the columns of one part.
        let part = |keep_channels: bool| -> Vec<f64> {
            (0..hidden)
                .map(|h| {
                    let mut acc = 0.0;
                    for (i, &x) in v.iter().enumerate() {
                        let col = i % sum_m;
                        let in_channels = col >= channel_span.offset
                            && col < channel_span.offset + channel_span.width;
                        if in_channels == keep_channels {
                            acc += w1.data()[h * cg + i] * x;
                        }
                    }
                    acc
                })
                .collect()
        };
        let full: Vec<f64> = (0..hidden)
            .map(|h| {
                v.iter()
                    .enumerate()
                    .map(|(i, &x)| w1.data()[h * cg + i] * x)
                    .sum()
            })
            .collect();
        let channel_part = part(true);
        let group_part = part(false);
        for ((f, c), g) in full.iter().zip(&channel_part).zip(&group_part) {
            worst = worst.max((f - (c + g)).abs());
        }
    }
    Ok(CheckRecord::from_err("theory/channels-groups-split", worst, THEORY_TOL))
}

/// Per-shape column placement inside the zero-filled aggregate map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnSpan {
    pub offset: usize,
    pub width: usize,
    pub live_rows: usize,
}

pub fn aggregate_column_spans(
    specs: &[GFilterSpec],
    rows: usize,
    cols: usize,
) -> Vec<ColumnSpan> {
    let mut spans = Vec::with_capacity(specs.len());
    let mut offset = 0;
    for spec in specs {
        if let Some((n, m)) = spec.scan_extent(rows, cols) {
            spans.push(ColumnSpan { offset, width: m, live_rows: n });
            offset += m;
        }
    }
    spans
}

/// The algebraic gate-encoder properties.
pub fn theory_suite(seed: u64) -> Result<Vec<CheckRecord>> {
    Ok(vec![
        one_hot_proportionality(seed)?,
        se_equivalence(seed ^ 0x5151)?,
        channels_groups_split(seed ^ 0xA0A0)?,
    ])
}

/// Every suite back to back.
pub fn all_suites(fault: Option<FaultInjection>) -> Result<Vec<CheckRecord>> {
    let mut records = grad_suite(fault)?;
    records.extend(groups_suite(&[(2, 16), (4, 8), (8, 4)])?);
    records.extend(theory_suite(0xDEED)?);
    Ok(records)
}
