//! Small image classifiers that host the channel-attention blocks: an
//! all-convolutional family and a pre-activation residual family (with a
//! widened variant). Each family decides where attention sits and which
//! default fold shape its channel counts prefer.

use crate::error::{Error, Result};
use crate::ini::{FoldFamily, IniBlock, InnerImageConfig};
use crate::nn::{BatchNorm, Conv2d, FwdCtx, Linear, SeBlock};
use crate::params::{Bound, ParamStore};
use crate::residual::{JointConfig, JointGate, ResidualUnit, UnitAttention};
use crate::spatial::SpatialAttention;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Backbone family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    AllCnn,
    PreactResnet,
    Wrn,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "allcnn" => Ok(Family::AllCnn),
            "preact_resnet" => Ok(Family::PreactResnet),
            "wrn" => Ok(Family::Wrn),
            other => Err(Error::Descriptor(format!(
                "unknown family '{other}' (expected allcnn, preact_resnet, or wrn)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::AllCnn => "allcnn",
            Family::PreactResnet => "preact_resnet",
            Family::Wrn => "wrn",
        }
    }

    pub fn fold_family(&self) -> FoldFamily {
        match self {
            Family::AllCnn => FoldFamily::AllCnn,
            Family::PreactResnet => FoldFamily::Generic,
            Family::Wrn => FoldFamily::Wrn,
        }
    }
}

/// Which gate sits on the activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionChoice {
    None,
    Se,
    Ini,
}

impl AttentionChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionChoice::None),
            "se" => Ok(AttentionChoice::Se),
            "ini" => Ok(AttentionChoice::Ini),
            other => Err(Error::Descriptor(format!(
                "unknown attention '{other}' (expected none, se, or ini)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionChoice::None => "none",
            AttentionChoice::Se => "se",
            AttentionChoice::Ini => "ini",
        }
    }
}

/// Settings for the folded-map gates (ignored when attention is none/se,
/// except `t`, which also sets the squeeze-excite reduction).
#[derive(Clone, Debug, PartialEq)]
pub struct IniSettings {
    pub preset: String,
    pub t: usize,
    pub aggregation: bool,
    pub dilated: bool,
    /// Fold-shape override; used by a block only when rows*cols matches its
    /// channel count (the family default applies elsewhere).
    pub fold_rows: Option<usize>,
    pub fold_cols: Option<usize>,
    /// Gate each residual unit from both branch and identity signals.
    pub joint: bool,
    /// Joint map layout: two stacked rows, or an alternating fold.
    pub joint_stacked: bool,
    pub spatial: bool,
    pub spatial_tau: usize,
}

impl Default for IniSettings {
    fn default() -> Self {
        IniSettings {
            preset: "square-3".into(),
            t: 16,
            aggregation: true,
            dilated: false,
            fold_rows: None,
            fold_cols: None,
            joint: false,
            joint_stacked: true,
            spatial: false,
            spatial_tau: 1,
        }
    }
}

/// Complete architecture description; everything needed to rebuild a network
/// except its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchDescriptor {
    pub family: Family,
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub widen: usize,
    pub attention: AttentionChoice,
    pub ini: IniSettings,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Descriptor("input dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Descriptor("need at least two classes".into()));
        }
        if self.base_width == 0 || self.blocks_per_stage == 0 || self.widen == 0 {
            return Err(Error::Descriptor(
                "base_width, blocks_per_stage, and widen must all be >= 1".into(),
            ));
        }
        if self.ini.t == 0 {
            return Err(Error::Descriptor("reduction t must be >= 1".into()));
        }
        if self.ini.joint && self.family == Family::AllCnn {
            return Err(Error::Descriptor(
                "joint gating needs an identity path; the allcnn family has none".into(),
            ));
        }
        if self.ini.joint && self.attention != AttentionChoice::Ini {
            return Err(Error::Descriptor(
                "joint gating is part of the folded-map attention; set attention = ini".into(),
            ));
        }
        if self.ini.spatial && self.attention == AttentionChoice::None {
            return Err(Error::Descriptor(
                "per-position attention coordinates with channel gates; pick se or ini".into(),
            ));
        }
        if matches!(self.fold_override(), (Some(_), None) | (None, Some(_))) {
            return Err(Error::Descriptor(
                "fold_rows and fold_cols must be set together".into(),
            ));
        }
        Ok(())
    }

    fn fold_override(&self) -> (Option<usize>, Option<usize>) {
        (self.ini.fold_rows, self.ini.fold_cols)
    }

    /// Stage widths, narrow to wide.
    pub fn stage_widths(&self) -> Vec<usize> {
        let w = self.base_width * self.widen;
        match self.family {
            Family::AllCnn => vec![w, 2 * w],
            Family::PreactResnet | Family::Wrn => vec![w, 2 * w, 4 * w],
        }
    }

    /// Fold override for a map of `total` cells, when one is set and fits.
    fn fold_for(&self, total: usize) -> Option<(usize, usize)> {
        match self.fold_override() {
            (Some(r), Some(c)) if r * c == total => Some((r, c)),
            _ => None,
        }
    }
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, (3, 3), stride, 1);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_ch);
        ConvBnRelu { conv, bn }
    }

    fn forward(&self, ctx: &mut FwdCtx, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        ctx.tape.relu(h)
    }
}

enum StageGate {
    None,
    Se(SeBlock),
    Ini(IniBlock),
}

impl StageGate {
    fn apply(&self, ctx: &mut FwdCtx, u: Var) -> Result<Var> {
        match self {
            StageGate::None => Ok(u),
            StageGate::Se(se) => {
                let s = se.gates(ctx, u)?;
                ctx.tape.scale_channels(u, s)
            }
            StageGate::Ini(block) => {
                let s = block.gates(ctx, u)?;
                ctx.tape.scale_channels(u, s)
            }
        }
    }
}

struct AllCnnStage {
    convs: Vec<ConvBnRelu>,
    spatial: Option<SpatialAttention>,
    gate: StageGate,
    down: Option<ConvBnRelu>,
}

enum Body {
    AllCnn {
        stages: Vec<AllCnnStage>,
        classifier: Linear,
    },
    Resnet {
        stem: Conv2d,
        stages: Vec<Vec<ResidualUnit>>,
        final_bn: BatchNorm,
        classifier: Linear,
    },
}

/// A built network: parameters plus the recipe to run them.
pub struct Network {
    pub descriptor: ArchDescriptor,
    pub store: ParamStore,
    body: Body,
}

/// One forward pass: the tape (for backward) and the logits on it.
pub struct RunOutput {
    pub tape: Tape,
    pub bound: Bound,
    pub logits: Var,
}

fn build_stage_gate(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    desc: &ArchDescriptor,
    channels: usize,
) -> Result<StageGate> {
    Ok(match desc.attention {
        AttentionChoice::None => StageGate::None,
        AttentionChoice::Se => StageGate::Se(SeBlock::new(store, rng, name, channels, desc.ini.t)),
        AttentionChoice::Ini => {
            let cfg = InnerImageConfig::resolve(
                channels,
                &desc.ini.preset,
                desc.ini.t,
                desc.fold_for(channels),
                desc.family.fold_family(),
                desc.ini.aggregation,
                desc.ini.dilated,
            )?;
            StageGate::Ini(IniBlock::new(store, rng, name, cfg)?)
        }
    })
}

fn build_unit_attention(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    desc: &ArchDescriptor,
    channels: usize,
) -> Result<UnitAttention> {
    Ok(match desc.attention {
        AttentionChoice::None => UnitAttention::None,
        AttentionChoice::Se => {
            UnitAttention::Se(SeBlock::new(store, rng, name, channels, desc.ini.t))
        }
        AttentionChoice::Ini if desc.ini.joint => {
            let cfg = JointConfig::resolve(
                channels,
                &desc.ini.preset,
                desc.ini.t,
                desc.ini.joint_stacked,
                desc.fold_for(2 * channels),
                desc.family.fold_family(),
                desc.ini.aggregation,
                desc.ini.dilated,
            )?;
            UnitAttention::Joint(JointGate::new(store, rng, name, cfg)?)
        }
        AttentionChoice::Ini => {
            let cfg = InnerImageConfig::resolve(
                channels,
                &desc.ini.preset,
                desc.ini.t,
                desc.fold_for(channels),
                desc.family.fold_family(),
                desc.ini.aggregation,
                desc.ini.dilated,
            )?;
            UnitAttention::Plain(IniBlock::new(store, rng, name, cfg)?)
        }
    })
}

impl Network {
    pub fn build(descriptor: &ArchDescriptor, seed: u64) -> Result<Network> {
        descriptor.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = descriptor.stage_widths();
        let in_ch = descriptor.input.0;

        let body = match descriptor.family {
            Family::AllCnn => {
                let mut stages = Vec::new();
                let mut prev = in_ch;
                let last = widths.len() - 1;
                for (i, &w) in widths.iter().enumerate() {
                    let mut convs = Vec::new();
                    for j in 0..descriptor.blocks_per_stage {
                        let cin = if j == 0 { prev } else { w };
                        convs.push(ConvBnRelu::new(
                            &mut store,
                            &mut rng,
                            &format!("stage{i}.conv{j}"),
                            cin,
                            w,
                            1,
                        ));
                    }
                    let spatial = if descriptor.ini.spatial {
                        Some(SpatialAttention::new(
                            &mut store,
                            &mut rng,
                            &format!("stage{i}.spatial"),
                            w,
                            descriptor.ini.spatial_tau,
                        )?)
                    } else {
                        None
                    };
                    let gate = build_stage_gate(
                        &mut store,
                        &mut rng,
                        &format!("stage{i}.att"),
                        descriptor,
                        w,
                    )?;
                    let down = (i != last).then(|| {
                        ConvBnRelu::new(&mut store, &mut rng, &format!("stage{i}.down"), w, w, 2)
                    });
                    stages.push(AllCnnStage { convs, spatial, gate, down });
                    prev = w;
                }
                let classifier =
                    Linear::new(&mut store, &mut rng, "head.fc", *widths.last().unwrap(), descriptor.classes);
                Body::AllCnn { stages, classifier }
            }
            Family::PreactResnet | Family::Wrn => {
                let stem = Conv2d::new(&mut store, &mut rng, "stem", in_ch, descriptor.base_width, (3, 3), 1, 1);
                let mut stages = Vec::new();
                let mut prev = descriptor.base_width;
                for (i, &w) in widths.iter().enumerate() {
                    let mut units = Vec::new();
                    for j in 0..descriptor.blocks_per_stage {
                        let stride = if i > 0 && j == 0 { 2 } else { 1 };
                        let cin = if j == 0 { prev } else { w };
                        let name = format!("stage{i}.unit{j}");
                        let attention = build_unit_attention(
                            &mut store,
                            &mut rng,
                            &format!("{name}.att"),
                            descriptor,
                            w,
                        )?;
                        let mut unit =
                            ResidualUnit::new(&mut store, &mut rng, &name, cin, w, stride, attention);
                        if descriptor.ini.spatial {
                            unit = unit.with_spatial(SpatialAttention::new(
                                &mut store,
                                &mut rng,
                                &format!("{name}.spatial"),
                                w,
                                descriptor.ini.spatial_tau,
                            )?);
                        }
                        units.push(unit);
                    }
                    stages.push(units);
                    prev = w;
                }
                let final_bn = BatchNorm::new(&mut store, "head.bn", prev);
                let classifier = Linear::new(&mut store, &mut rng, "head.fc", prev, descriptor.classes);
                Body::Resnet { stem, stages, final_bn, classifier }
            }
        };
        Ok(Network { descriptor: descriptor.clone(), store, body })
    }

    /// Trainable parameter count (excludes batch-norm running stats).
    pub fn param_count(&self) -> u64 {
        self.store.trainable_count()
    }

    /// One forward pass; `images` is [B, C, H, W] matching the descriptor.
    pub fn run(&mut self, images: &Tensor, mode: Mode) -> Result<RunOutput> {
        let (c, h, w) = self.descriptor.input;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::ShapeMismatch {
                context: "network input".into(),
                expected: vec![shape.first().copied().unwrap_or(0), c, h, w],
                got: shape.to_vec(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut ctx = FwdCtx { tape: &mut tape, bound: &bound, store: &mut self.store, mode };
        let x = ctx.tape.leaf(images.clone().with_grad());

        let logits = match &self.body {
            Body::AllCnn { stages, classifier } => {
                let mut h = x;
                for (i, stage) in stages.iter().enumerate() {
                    for conv in &stage.convs {
                        h = conv.forward(&mut ctx, h)?;
                    }
                    if let Some(sp) = &stage.spatial {
                        h = sp.apply(&mut ctx, h)?;
                    }
                    h = stage.gate.apply(&mut ctx, h)?;
                    if let Some(down) = &stage.down {
                        h = down.forward(&mut ctx, h)?;
                    }
                    ctx.tape.value(h).check_finite(&format!("stage{i}"))?;
                }
                let pooled = ctx.tape.global_avg_pool(h)?;
                classifier.forward(&mut ctx, pooled)?
            }
            Body::Resnet { stem, stages, final_bn, classifier } => {
                let mut h = stem.forward(&mut ctx, x)?;
                for (i, units) in stages.iter().enumerate() {
                    for (j, unit) in units.iter().enumerate() {
                        h = unit.forward(&mut ctx, h)?;
                        ctx.tape.value(h).check_finite(&format!("stage{i}.unit{j}"))?;
                    }
                }
                let h = final_bn.forward(&mut ctx, h)?;
                let h = ctx.tape.relu(h)?;
                let pooled = ctx.tape.global_avg_pool(h)?;
                classifier.forward(&mut ctx, pooled)?
            }
        };
        tape.value(logits).check_finite("logits")?;
        Ok(RunOutput { tape, bound, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_desc(family: Family, attention: AttentionChoice) -> ArchDescriptor {
        ArchDescriptor {
            family,
            input: (3, 8, 8),
            classes: 4,
            base_width: 8,
            blocks_per_stage: 1,
            widen: 1,
            attention,
            ini: IniSettings { preset: "simple-3".into(), t: 4, ..IniSettings::default() },
        }
    }

    #[test]
    fn family_and_attention_parse_round_trip() {
        for f in [Family::AllCnn, Family::PreactResnet, Family::Wrn] {
            assert_eq!(Family::parse(f.as_str()).unwrap(), f);
        }
        for a in [AttentionChoice::None, AttentionChoice::Se, AttentionChoice::Ini] {
            assert_eq!(AttentionChoice::parse(a.as_str()).unwrap(), a);
        }
        assert!(Family::parse("resnet").is_err());
        assert!(AttentionChoice::parse("cbam").is_err());
    }

    #[test]
    fn descriptor_validation_rejects_bad_combinations() {
        let mut d = tiny_desc(Family::AllCnn, AttentionChoice::Ini);
        d.ini.joint = true;
        assert!(d.validate().is_err());

        let mut d = tiny_desc(Family::PreactResnet, AttentionChoice::Se);
        d.ini.joint = true;
        assert!(d.validate().is_err());

        let mut d = tiny_desc(Family::PreactResnet, AttentionChoice::None);
        d.ini.spatial = true;
        assert!(d.validate().is_err());

        let mut d = tiny_desc(Family::PreactResnet, AttentionChoice::Ini);
        d.ini.fold_rows = Some(4);
        assert!(d.validate().is_err());
        d.ini.fold_cols = Some(2);
        assert!(d.validate().is_ok());
    }

    #[test]
    fn zero_input_yields_uniform_logits() {
        for (family, attention) in [
            (Family::AllCnn, AttentionChoice::Ini),
            (Family::PreactResnet, AttentionChoice::Ini),
            (Family::PreactResnet, AttentionChoice::Se),
            (Family::Wrn, AttentionChoice::None),
        ] {
            let desc = tiny_desc(family, attention);
            let mut net = Network::build(&desc, 3).unwrap();
            let images = Tensor::zeros(&[2, 3, 8, 8]);
            let out = net.run(&images, Mode::Eval).unwrap();
            let logits = out.tape.value(out.logits).data();
            assert_eq!(logits.len(), 2 * 4);
            for &v in logits {
                assert_eq!(v, 0.0, "{family:?} {attention:?}");
            }
        }
    }

    #[test]
    fn forward_shapes_match_class_count() {
        let mut desc = tiny_desc(Family::PreactResnet, AttentionChoice::Ini);
        desc.ini.joint = true;
        desc.ini.spatial = true;
        desc.ini.spatial_tau = 2;
        let mut net = Network::build(&desc, 1).unwrap();
        let images = Tensor::full(&[3, 3, 8, 8], 0.25);
        let out = net.run(&images, Mode::Train).unwrap();
        assert_eq!(out.tape.shape(out.logits), &[3, 4]);
    }

    #[test]
    fn widen_factor_scales_stage_widths() {
        let mut d = tiny_desc(Family::Wrn, AttentionChoice::None);
        d.widen = 3;
        assert_eq!(d.stage_widths(), vec![24, 48, 96]);
        let d2 = tiny_desc(Family::AllCnn, AttentionChoice::None);
        assert_eq!(d2.stage_widths(), vec![8, 16]);
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let data: Vec<f64> = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64) / (u32::MAX as f64)
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn training_pass_backpropagates_into_every_trainable() {
        let mut desc = tiny_desc(Family::PreactResnet, AttentionChoice::Ini);
        desc.ini.joint = true;
        desc.ini.t = 2; // keep the gate's hidden layer wide enough that no
                        // unit is dead at initialization for this input
        let mut net = Network::build(&desc, 7).unwrap();
        let images = pseudo(&[4, 3, 8, 8], 42);
        let labels = vec![1usize, 3, 0, 2];
        let mut out = net.run(&images, Mode::Train).unwrap();
        let loss = out.tape.softmax_cross_entropy(out.logits, &labels).unwrap();
        out.tape.backward(loss).unwrap();
        net.store.pull_grads(&out.tape, &out.bound).unwrap();
        let mut missing = Vec::new();
        for entry in net.store.entries() {
            if matches!(entry.kind, crate::params::EntryKind::Trainable { .. }) {
                let grad_norm: f64 = entry
                    .tensor
                    .grad
                    .as_ref()
                    .map(|g| g.iter().map(|v| v * v).sum())
                    .unwrap_or(0.0);
                if grad_norm == 0.0 {
                    missing.push(entry.name.clone());
                }
            }
        }
        assert!(missing.is_empty(), "no gradient reached: {missing:?}");
    }

    #[test]
    fn sibling_attention_variants_share_backbone_size() {
        // The gate parameters differ, but the convolutional trunk is the
        // same; none is always the smallest.
        let none = Network::build(&tiny_desc(Family::PreactResnet, AttentionChoice::None), 0)
            .unwrap()
            .param_count();
        let se = Network::build(&tiny_desc(Family::PreactResnet, AttentionChoice::Se), 0)
            .unwrap()
            .param_count();
        let ini = Network::build(&tiny_desc(Family::PreactResnet, AttentionChoice::Ini), 0)
            .unwrap()
            .param_count();
        assert!(none < se && none < ini, "{none} {se} {ini}");
    }
}
