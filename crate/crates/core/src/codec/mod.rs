//! Factorized-prior compression network.
//!
//! The analysis transform `ga` is four strided convolutions with GDN after
//! the first three; the synthesis transform `gs` mirrors it with transposed
//! convolutions and inverse GDN. An ABCM slot sits between each of the
//! first three convolutions and its GDN on both sides; the last layer of
//! each transform is never masked, so the latent width and the three output
//! colour channels are fixed.

pub mod entropy;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::abcm::{apply_mask, GateConfig, ImportanceVector, Phase};
use crate::error::{Error, Result};
use crate::pruner::KeepPlan;
use crate::rng::RngState;
use crate::tensor::{conv2d, deconv2d, gdn, ops, Tensor};

pub use entropy::{rate_bits, rate_map, EntropyModel};
pub use metrics::{bpp, distortion_mse, psnr, quantize};

/// Number of convolutions per transform.
pub const STAGES: usize = 4;
/// Masked convolutions per transform (all but the last).
pub const MASKED_STAGES: usize = STAGES - 1;
pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
/// Floor added to the squared GDN beta.
pub const GDN_BETA_FLOOR: f32 = 1e-6;

/// Per-layer widths of both transforms.
///
/// `analysis` lists `[3, c1, c2, c3, latent]` and `synthesis` lists
/// `[latent, c1', c2', c3', 3]`; layer `l` maps width `l` to width `l + 1`,
/// so adjacent layers chain by construction. GDN layers take the width of
/// the convolution they follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelConfig {
    pub analysis: Vec<usize>,
    pub synthesis: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    Gdn,
    InverseGdn,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::Gdn => "GDN",
            LayerKind::InverseGdn => "IGDN",
        }
    }
}

/// One row of the layer table: a module, its kind and channel widths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub side: Side,
    pub stage: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ChannelConfig {
    /// Uniform hidden width `hidden` and latent width `latent`.
    pub fn new(hidden: usize, latent: usize) -> Self {
        Self {
            analysis: vec![3, hidden, hidden, hidden, latent],
            synthesis: vec![latent, hidden, hidden, hidden, 3],
            kernel: KERNEL,
            stride: STRIDE,
        }
    }

    /// Eight hidden channels, twelve latent channels.
    pub fn desk() -> Self {
        Self::new(8, 12)
    }

    pub fn from_widths(analysis: Vec<usize>, synthesis: Vec<usize>) -> Result<Self> {
        let c = Self {
            analysis,
            synthesis,
            kernel: KERNEL,
            stride: STRIDE,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.analysis.len() != STAGES + 1 || self.synthesis.len() != STAGES + 1 {
            return bad(format!("each transform needs {} widths", STAGES + 1));
        }
        if self.analysis[0] != 3 {
            return bad(format!("first analysis input must be 3 channels, got {}", self.analysis[0]));
        }
        if self.synthesis[STAGES] != 3 {
            return bad(format!(
                "last synthesis output must be 3 channels, got {}",
                self.synthesis[STAGES]
            ));
        }
        if self.analysis[STAGES] != self.synthesis[0] {
            return bad(format!(
                "latent width mismatch: analysis emits {}, synthesis takes {}",
                self.analysis[STAGES], self.synthesis[0]
            ));
        }
        if self.analysis.iter().chain(&self.synthesis).any(|&w| w == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 || self.stride == 0 {
            return bad(format!("kernel {} must be odd, stride {} positive", self.kernel, self.stride));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        self.analysis[STAGES]
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_padding(&self) -> usize {
        self.stride - 1
    }

    /// Total spatial downsampling of the analysis transform.
    pub fn downscale(&self) -> usize {
        self.stride.pow(STAGES as u32)
    }

    pub fn widths(&self, side: Side) -> &[usize] {
        match side {
            Side::Analysis => &self.analysis,
            Side::Synthesis => &self.synthesis,
        }
    }

    pub fn widths_mut(&mut self, side: Side) -> &mut Vec<usize> {
        match side {
            Side::Analysis => &mut self.analysis,
            Side::Synthesis => &mut self.synthesis,
        }
    }

    /// Width of a masked slot (the output width of its convolution).
    pub fn slot_width(&self, slot: SlotId) -> usize {
        self.widths(slot.side)[slot.index + 1]
    }

    /// Ordered layer table: conv/GDN pairs for `ga`, deconv/IGDN for `gs`.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for side in [Side::Analysis, Side::Synthesis] {
            let w = self.widths(side);
            let (conv, norm) = match side {
                Side::Analysis => (LayerKind::Conv, LayerKind::Gdn),
                Side::Synthesis => (LayerKind::Deconv, LayerKind::InverseGdn),
            };
            for stage in 0..STAGES {
                out.push(LayerSpec {
                    name: format!("{}{}.{}", side.prefix(), stage + 1, conv.as_str()),
                    side,
                    stage,
                    kind: conv,
                    in_channels: w[stage],
                    out_channels: w[stage + 1],
                });
                if stage < MASKED_STAGES {
                    out.push(LayerSpec {
                        name: format!("{}{}.{}", side.prefix(), stage + 1, norm.as_str()),
                        side,
                        stage,
                        kind: norm,
                        in_channels: w[stage + 1],
                        out_channels: w[stage + 1],
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Analysis,
    Synthesis,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Analysis => "ga",
            Side::Synthesis => "gs",
        }
    }
}

/// Identifies one ABCM position: `ga1..ga3` or `gs1..gs3` (1-based in text).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId {
    pub side: Side,
    /// 0-based stage index, `< MASKED_STAGES`.
    pub index: usize,
}

impl SlotId {
    pub fn new(side: Side, index: usize) -> Self {
        debug_assert!(index < MASKED_STAGES);
        Self { side, index }
    }

    pub fn all() -> Vec<SlotId> {
        [Side::Analysis, Side::Synthesis]
            .into_iter()
            .flat_map(|s| (0..MASKED_STAGES).map(move |i| SlotId::new(s, i)))
            .collect()
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.side.prefix(), self.index + 1)
    }
}

impl FromStr for SlotId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let side = match s.get(..2) {
            Some("ga") => Side::Analysis,
            Some("gs") => Side::Synthesis,
            _ => return Err(Error::Config(format!("bad slot name `{s}`"))),
        };
        let n: usize = s[2..]
            .parse()
            .map_err(|_| Error::Config(format!("bad slot name `{s}`")))?;
        if n == 0 || n > MASKED_STAGES {
            return Err(Error::Config(format!("slot `{s}` out of range")));
        }
        Ok(SlotId::new(side, n - 1))
    }
}

#[derive(Debug)]
pub struct ConvLayer {
    /// `[out, in, k, k]` for analysis convs, `[in, out, k, k]` for synthesis.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// GDN parameters in unconstrained storage:
/// `beta = beta_raw^2 + floor`, `gamma = gamma_raw^2`.
#[derive(Debug)]
pub struct GdnLayer {
    pub beta_raw: Tensor,
    pub gamma_raw: Tensor,
}

impl GdnLayer {
    pub fn new(channels: usize) -> Self {
        let mut gamma = vec![0.01f32; channels * channels];
        for i in 0..channels {
            gamma[i * channels + i] = 0.1f32.sqrt();
        }
        Self {
            beta_raw: Tensor::full(&[channels], 1.0).into_param(),
            gamma_raw: Tensor::param(&[channels, channels], gamma).expect("square"),
        }
    }

    pub fn effective(&self) -> (Tensor, Tensor) {
        let beta = ops::add_scalar(&ops::square(&self.beta_raw), GDN_BETA_FLOOR);
        let gamma = ops::square(&self.gamma_raw);
        (beta, gamma)
    }
}

#[derive(Debug)]
pub struct Stage {
    pub conv: ConvLayer,
    pub mask: Option<ImportanceVector>,
    pub gdn: Option<GdnLayer>,
}

impl Clone for Stage {
    fn clone(&self) -> Self {
        Self {
            conv: ConvLayer {
                weight: self.conv.weight.deep_copy(),
                bias: self.conv.bias.deep_copy(),
            },
            mask: self.mask.clone(),
            gdn: self.gdn.as_ref().map(|g| GdnLayer {
                beta_raw: g.beta_raw.deep_copy(),
                gamma_raw: g.gamma_raw.deep_copy(),
            }),
        }
    }
}

/// Extra binary masks applied on top of (or instead of) the ABCM gates,
/// keyed by slot. Used by the greedy channel search.
pub type SlotMasks = BTreeMap<SlotId, Vec<f32>>;

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub phase: Phase,
    /// Apply the model's own ABCM gates.
    pub masking: bool,
    pub extra_masks: Option<&'a SlotMasks>,
}

impl ForwardOptions<'_> {
    pub fn train() -> Self {
        Self {
            phase: Phase::Train,
            masking: true,
            extra_masks: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            phase: Phase::Eval,
            masking: true,
            extra_masks: None,
        }
    }
}

/// Everything one pass through the codec produces.
#[derive(Debug)]
pub struct ForwardPass {
    pub latent: Tensor,
    pub latent_hat: Tensor,
    /// Estimated code length of `latent_hat` in bits (scalar).
    pub bits: Tensor,
    pub reconstruction: Tensor,
    /// Gate tensors in slot order, for the sparsity term.
    pub masks: Vec<(SlotId, Tensor)>,
}

#[derive(Debug)]
pub struct CodecModel {
    config: ChannelConfig,
    gate: GateConfig,
    pub analysis: Vec<Stage>,
    pub synthesis: Vec<Stage>,
    pub entropy: EntropyModel,
    /// Plan this model was pruned with, if any.
    pub keep_plan: Option<KeepPlan>,
}

impl Clone for CodecModel {
    /// Deep copy: the clone shares no parameter storage or gradients.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            gate: self.gate,
            analysis: self.analysis.clone(),
            synthesis: self.synthesis.clone(),
            entropy: self.entropy.clone(),
            keep_plan: self.keep_plan.clone(),
        }
    }
}

fn uniform_param(shape: &[usize], bound: f32, rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::param(shape, data).expect("length matches")
}

impl CodecModel {
    /// Freshly initialised model. `gate = None` builds a plain codec without
    /// ABCM slots; weight initialisation is identical either way.
    pub fn new(config: ChannelConfig, gate: Option<GateConfig>, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        if let Some(g) = &gate {
            g.validate()?;
        }
        let k = config.kernel;
        let mut build = |side: Side| -> Vec<Stage> {
            let w = config.widths(side).to_vec();
            (0..STAGES)
                .map(|s| {
                    let (cin, cout) = (w[s], w[s + 1]);
                    let (shape, bound) = match side {
                        Side::Analysis => ([cout, cin, k, k], (3.0 / (cin * k * k) as f32).sqrt()),
                        Side::Synthesis => {
                            let taps = (cin * k * k) as f32 / (config.stride * config.stride) as f32;
                            ([cin, cout, k, k], (3.0 / taps).sqrt())
                        }
                    };
                    let masked = s < MASKED_STAGES;
                    Stage {
                        conv: ConvLayer {
                            weight: uniform_param(&shape, bound, rng),
                            bias: Tensor::zeros(&[cout]).into_param(),
                        },
                        mask: gate
                            .filter(|_| masked)
                            .map(|g| ImportanceVector::new(g.mode, cout)),
                        gdn: masked.then(|| GdnLayer::new(cout)),
                    }
                })
                .collect()
        };
        let analysis = build(Side::Analysis);
        let synthesis = build(Side::Synthesis);
        Ok(Self {
            entropy: EntropyModel::new(config.latent_channels()),
            gate: gate.unwrap_or_default(),
            config,
            analysis,
            synthesis,
            keep_plan: None,
        })
    }

    /// Assemble from parts (deserialisation, pruning). Checks every tensor
    /// shape against the config.
    pub fn from_parts(
        config: ChannelConfig,
        gate: GateConfig,
        analysis: Vec<Stage>,
        synthesis: Vec<Stage>,
        entropy: EntropyModel,
        keep_plan: Option<KeepPlan>,
    ) -> Result<Self> {
        config.validate()?;
        gate.validate()?;
        let m = Self {
            config,
            gate,
            analysis,
            synthesis,
            entropy,
            keep_plan,
        };
        m.check_shapes()?;
        Ok(m)
    }

    fn check_shapes(&self) -> Result<()> {
        let k = self.config.kernel;
        let fail = |what: String| Err(Error::Format(what));
        for side in [Side::Analysis, Side::Synthesis] {
            let w = self.config.widths(side);
            let stages = self.stages(side);
            if stages.len() != STAGES {
                return fail(format!("{} has {} stages", side.prefix(), stages.len()));
            }
            for (s, st) in stages.iter().enumerate() {
                let (cin, cout) = (w[s], w[s + 1]);
                let expect = match side {
                    Side::Analysis => [cout, cin, k, k],
                    Side::Synthesis => [cin, cout, k, k],
                };
                let name = format!("{}{}", side.prefix(), s + 1);
                if st.conv.weight.shape() != expect || st.conv.bias.shape() != [cout] {
                    return fail(format!("{name} conv shape does not match config"));
                }
                let masked = s < MASKED_STAGES;
                match (&st.gdn, masked) {
                    (Some(g), true) => {
                        if g.beta_raw.shape() != [cout] || g.gamma_raw.shape() != [cout, cout] {
                            return fail(format!("{name} GDN shape does not match config"));
                        }
                    }
                    (None, false) => {}
                    _ => return fail(format!("{name} GDN placement is wrong")),
                }
                if let Some(iv) = &st.mask {
                    if !masked || iv.channels() != cout || iv.mode() != self.gate.mode {
                        return fail(format!("{name} ABCM slot does not match layer"));
                    }
                }
            }
        }
        let slots = self.masks().count();
        if slots != 0 && slots != 2 * MASKED_STAGES {
            return fail(format!("model has {slots} ABCM slots, expected 0 or 6"));
        }
        if self.entropy.channels() != self.config.latent_channels() {
            return fail("entropy model width does not match latent".into());
        }
        Ok(())
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn gate_config(&self) -> &GateConfig {
        &self.gate
    }

    pub fn has_abcm(&self) -> bool {
        self.analysis.iter().chain(&self.synthesis).any(|s| s.mask.is_some())
    }

    /// Drop every ABCM slot (masks become implicit all-ones).
    pub fn strip_abcm(&mut self) {
        for st in self.analysis.iter_mut().chain(self.synthesis.iter_mut()) {
            st.mask = None;
        }
    }

    pub fn stages(&self, side: Side) -> &[Stage] {
        match side {
            Side::Analysis => &self.analysis,
            Side::Synthesis => &self.synthesis,
        }
    }

    pub fn stages_mut(&mut self, side: Side) -> &mut Vec<Stage> {
        match side {
            Side::Analysis => &mut self.analysis,
            Side::Synthesis => &mut self.synthesis,
        }
    }

    /// ABCM slots in order `ga1, ga2, ga3, gs1, gs2, gs3`.
    pub fn masks(&self) -> impl Iterator<Item = (SlotId, &ImportanceVector)> {
        let a = self.analysis.iter().enumerate().map(|(i, s)| (Side::Analysis, i, s));
        let b = self.synthesis.iter().enumerate().map(|(i, s)| (Side::Synthesis, i, s));
        a.chain(b)
            .filter_map(|(side, i, s)| s.mask.as_ref().map(|m| (SlotId::new(side, i), m)))
    }

    pub fn mask_mut(&mut self, slot: SlotId) -> Option<&mut ImportanceVector> {
        self.stages_mut(slot.side)
            .get_mut(slot.index)
            .and_then(|s| s.mask.as_mut())
    }

    /// Every trainable tensor with a stable dotted name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for side in [Side::Analysis, Side::Synthesis] {
            for (i, st) in self.stages(side).iter().enumerate() {
                let p = format!("{}{}", side.prefix(), i + 1);
                out.push((format!("{p}.conv.weight"), &st.conv.weight));
                out.push((format!("{p}.conv.bias"), &st.conv.bias));
                if let Some(m) = &st.mask {
                    out.push((format!("{p}.abcm"), m.param()));
                }
                if let Some(g) = &st.gdn {
                    out.push((format!("{p}.gdn.beta"), &g.beta_raw));
                    out.push((format!("{p}.gdn.gamma"), &g.gamma_raw));
                }
            }
        }
        out.push(("entropy.loc".into(), &self.entropy.loc));
        out.push(("entropy.log_scale".into(), &self.entropy.log_scale));
        out
    }

    /// Mutable view in the same order as [`CodecModel::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for st in self.analysis.iter_mut().chain(self.synthesis.iter_mut()) {
            out.push(&mut st.conv.weight);
            out.push(&mut st.conv.bias);
            if let Some(m) = st.mask.as_mut() {
                out.push(m.param_mut());
            }
            if let Some(g) = st.gdn.as_mut() {
                out.push(&mut g.beta_raw);
                out.push(&mut g.gamma_raw);
            }
        }
        out.push(&mut self.entropy.loc);
        out.push(&mut self.entropy.log_scale);
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let [_, c, h, w] = match *image.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::dim("analyze", format!("image must be 4-D, got {:?}", image.shape()))),
        };
        if c != 3 {
            return Err(Error::dim("analyze", format!("image needs 3 channels, got {c}")));
        }
        let d = self.config.downscale();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Geometry(format!(
                "image {h}x{w} is not a positive multiple of {d} in both dimensions"
            )));
        }
        Ok(())
    }

    fn run_stages(
        &self,
        side: Side,
        mut x: Tensor,
        opts: &ForwardOptions<'_>,
        rng: &mut RngState,
        masks_out: &mut Vec<(SlotId, Tensor)>,
    ) -> Result<Tensor> {
        let (s, p, op) = (self.config.stride, self.config.padding(), self.config.output_padding());
        for (i, st) in self.stages(side).iter().enumerate() {
            x = match side {
                Side::Analysis => conv2d(&x, &st.conv.weight, &st.conv.bias, s, p)?,
                Side::Synthesis => deconv2d(&x, &st.conv.weight, &st.conv.bias, s, p, op)?,
            };
            if i < MASKED_STAGES {
                let slot = SlotId::new(side, i);
                if let (true, Some(iv)) = (opts.masking, &st.mask) {
                    let m = iv.mask(&self.gate, opts.phase, rng)?;
                    x = apply_mask(&x, &m)?;
                    masks_out.push((slot, m));
                }
                if let Some(extra) = opts.extra_masks.and_then(|e| e.get(&slot)) {
                    let m = Tensor::new(&[extra.len()], extra.clone())?;
                    x = apply_mask(&x, &m)?;
                }
            }
            if let Some(g) = &st.gdn {
                let (beta, gamma) = g.effective();
                x = gdn(&x, &beta, &gamma, side == Side::Synthesis)?;
            }
        }
        Ok(x)
    }

    /// `ga`: image `[B, 3, H, W]` in `[0, 1]` to latent `[B, M, H/16, W/16]`.
    pub fn analyze(&self, image: &Tensor, opts: &ForwardOptions<'_>, rng: &mut RngState) -> Result<Tensor> {
        self.check_image(image)?;
        self.run_stages(Side::Analysis, image.clone(), opts, rng, &mut Vec::new())
    }

    /// `gs`: quantized latent `[B, M, h, w]` to image `[B, 3, 16h, 16w]`.
    pub fn synthesize(&self, latent: &Tensor, opts: &ForwardOptions<'_>, rng: &mut RngState) -> Result<Tensor> {
        match *latent.shape() {
            [_, m, h, w] if m == self.config.latent_channels() && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::dim(
                    "synthesize",
                    format!(
                        "latent {:?} does not have {} channels",
                        latent.shape(),
                        self.config.latent_channels()
                    ),
                ))
            }
        }
        self.run_stages(Side::Synthesis, latent.clone(), opts, rng, &mut Vec::new())
    }

    /// analyze, quantize, estimate rate, synthesize.
    pub fn forward(&self, image: &Tensor, opts: &ForwardOptions<'_>, rng: &mut RngState) -> Result<ForwardPass> {
        self.check_image(image)?;
        let mut masks = Vec::new();
        let latent = self.run_stages(Side::Analysis, image.clone(), opts, rng, &mut masks)?;
        let latent_hat = quantize(&latent, opts.phase, rng);
        let bits = rate_bits(&self.entropy, &latent_hat)?;
        let reconstruction = self.run_stages(Side::Synthesis, latent_hat.clone(), opts, rng, &mut masks)?;
        Ok(ForwardPass {
            latent,
            latent_hat,
            bits,
            reconstruction,
            masks,
        })
    }
}
