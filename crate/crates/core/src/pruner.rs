//! Turn a masked model into a narrower dense one.
//!
//! A channel whose gate is 0 is exactly zero after its mask, so:
//! its filter and bias can go; its GDN row can go; its GDN column only ever
//! adds `gamma * 0^2 = +0` to the other normalizers and can go too; and the
//! next layer's in-channel slice only ever adds `w * 0` and can go too.
//! With the fixed accumulation order of the convolution kernels the pruned
//! network reproduces the masked one bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::abcm::Phase;
use crate::codec::{
    distortion_mse, psnr, ChannelConfig, CodecModel, ConvLayer, ForwardOptions, GdnLayer, Side,
    SlotId, Stage, MASKED_STAGES, STAGES,
};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Kept channel indices for each masked slot, plus the widths they imply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepPlan {
    keep: BTreeMap<SlotId, Vec<usize>>,
    original: ChannelConfig,
    config: ChannelConfig,
}

impl KeepPlan {
    /// Slots absent from `keep` keep every channel.
    pub fn new(original: &ChannelConfig, mut keep: BTreeMap<SlotId, Vec<usize>>) -> Result<Self> {
        original.validate()?;
        let mut config = original.clone();
        for slot in SlotId::all() {
            let c = original.slot_width(slot);
            let list = keep.entry(slot).or_insert_with(|| (0..c).collect());
            if list.is_empty() {
                return Err(Error::DegeneratePlan { layer: slot.to_string() });
            }
            if list.windows(2).any(|p| p[0] >= p[1]) || list.last().is_some_and(|&i| i >= c) {
                return Err(Error::PlanMismatch(format!(
                    "{slot}: keep list must be strictly increasing indices below {c}"
                )));
            }
            config.widths_mut(slot.side)[slot.index + 1] = list.len();
        }
        config.validate()?;
        Ok(Self { keep, original: original.clone(), config })
    }

    pub fn identity(config: &ChannelConfig) -> Self {
        Self::new(config, BTreeMap::new()).expect("identity plan is valid")
    }

    pub fn kept(&self, slot: SlotId) -> &[usize] {
        &self.keep[&slot]
    }

    pub fn slots(&self) -> impl Iterator<Item = (SlotId, &[usize])> {
        self.keep.iter().map(|(s, v)| (*s, v.as_slice()))
    }

    pub fn original(&self) -> &ChannelConfig {
        &self.original
    }

    /// Widths of the pruned model.
    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn is_identity(&self) -> bool {
        self.config == self.original
    }

    pub fn kept_total(&self) -> usize {
        self.keep.values().map(Vec::len).sum()
    }

    pub fn channels_total(&self) -> usize {
        SlotId::all().into_iter().map(|s| self.original.slot_width(s)).sum()
    }

    /// Fraction of maskable channels removed.
    pub fn pruning_ratio(&self) -> f64 {
        1.0 - self.kept_total() as f64 / self.channels_total() as f64
    }

    /// Compact text form `ga1=0,2;ga2=...`, used in model manifests.
    pub fn encode(&self) -> String {
        self.keep
            .iter()
            .map(|(s, v)| {
                let idx: Vec<String> = v.iter().map(usize::to_string).collect();
                format!("{s}={}", idx.join(","))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(original: &ChannelConfig, text: &str) -> Result<Self> {
        let mut keep = BTreeMap::new();
        for part in text.split(';').filter(|p| !p.trim().is_empty()) {
            let (slot, list) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad keep-plan entry `{part}`")))?;
            let slot: SlotId = slot.trim().parse()?;
            let idx = list
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("keep plan {slot}: {e}")))?;
            keep.insert(slot, idx);
        }
        Self::new(original, keep)
    }

    /// Layer table before and after, one row per conv/GDN layer.
    pub fn config_diff(&self) -> String {
        let mut out = String::from("layer,kind,in_before,out_before,in_after,out_after\n");
        for (a, b) in self.original.layers().iter().zip(self.config.layers()) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                a.name,
                a.kind.as_str(),
                a.in_channels,
                a.out_channels,
                b.in_channels,
                b.out_channels
            );
        }
        out
    }
}

/// Keep exactly the channels whose hard gate is on.
pub fn extract_plan(model: &CodecModel) -> Result<KeepPlan> {
    if !model.has_abcm() {
        return Err(Error::Contract("extract_plan needs a model with ABCM slots".into()));
    }
    let mut keep = BTreeMap::new();
    for (slot, iv) in model.masks() {
        let idx: Vec<usize> = iv
            .hard_gates()
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
            .collect();
        if idx.is_empty() {
            return Err(Error::DegeneratePlan { layer: slot.to_string() });
        }
        keep.insert(slot, idx);
    }
    KeepPlan::new(model.config(), keep)
}

/// Gather `idx` along `axis` of a row-major tensor.
fn select(t: &Tensor, axis: usize, idx: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let d = t.data();
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            let start = (o * n + i) * inner;
            out.extend_from_slice(&d[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = idx.len();
    Tensor::param(&new_shape, out).expect("sizes match")
}

/// Structurally remove every channel the plan drops. The result has no ABCM
/// slots and records the plan in `keep_plan`.
pub fn prune(model: &CodecModel, plan: &KeepPlan) -> Result<CodecModel> {
    if plan.original() != model.config() {
        return Err(Error::PlanMismatch(format!(
            "plan was made for widths {:?}/{:?}, model has {:?}/{:?}",
            plan.original().analysis,
            plan.original().synthesis,
            model.config().analysis,
            model.config().synthesis
        )));
    }
    let mut sides = Vec::new();
    for side in [Side::Analysis, Side::Synthesis] {
        let widths = model.config().widths(side);
        let keep_at = |s: usize| -> Vec<usize> {
            // width boundary s sits after stage s-1; only 1..=3 are masked
            if (1..=MASKED_STAGES).contains(&s) {
                plan.kept(SlotId::new(side, s - 1)).to_vec()
            } else {
                (0..widths[s]).collect()
            }
        };
        let mut stages = Vec::with_capacity(STAGES);
        for (s, st) in model.stages(side).iter().enumerate() {
            let (kin, kout) = (keep_at(s), keep_at(s + 1));
            let (in_axis, out_axis) = match side {
                Side::Analysis => (1, 0),
                Side::Synthesis => (0, 1),
            };
            let weight = select(&select(&st.conv.weight, out_axis, &kout), in_axis, &kin);
            let gdn = st.gdn.as_ref().map(|g| GdnLayer {
                beta_raw: select(&g.beta_raw, 0, &kout),
                gamma_raw: select(&select(&g.gamma_raw, 0, &kout), 1, &kout),
            });
            stages.push(Stage {
                conv: ConvLayer {
                    weight,
                    bias: select(&st.conv.bias, 0, &kout),
                },
                mask: None,
                gdn,
            });
        }
        sides.push(stages);
    }
    let synthesis = sides.pop().expect("two sides");
    let analysis = sides.pop().expect("two sides");
    CodecModel::from_parts(
        plan.config().clone(),
        *model.gate_config(),
        analysis,
        synthesis,
        model.entropy.clone(),
        Some(plan.clone()),
    )
}

/// Where the largest disagreement between two models was found.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffLocation {
    pub input: usize,
    /// `"latent"` or `"reconstruction"`
    pub tensor: &'static str,
    /// `[b, c, h, w]`
    pub index: [usize; 4],
    pub masked: f32,
    pub pruned: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub latent_max_diff: f32,
    pub reconstruction_max_diff: f32,
    pub bits_masked: f64,
    pub bits_pruned: f64,
    pub psnr_masked: f64,
    pub psnr_pruned: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub tolerance: f32,
    pub inputs: Vec<InputCheck>,
    pub max_diff: f32,
    pub worst: Option<DiffLocation>,
    pub pass: bool,
}

fn unravel(shape: &[usize], mut flat: usize) -> [usize; 4] {
    let mut out = [0; 4];
    for (k, &e) in shape.iter().enumerate().rev() {
        out[k] = flat % e;
        flat /= e;
    }
    out
}

/// Largest |a - b| and its flat index; NaN anywhere counts as infinite.
fn max_abs_diff(a: &[f32], b: &[f32]) -> (f32, usize) {
    let mut best = (0.0f32, 0usize);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let d = (x - y).abs();
        let d = if d.is_nan() { f32::INFINITY } else { d };
        if d > best.0 {
            best = (d, i);
        }
    }
    best
}

fn image_psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let mse = distortion_mse(x, x_hat)?.item() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        psnr(mse)
    }
}

/// Run both models in eval phase on every input and compare latents,
/// reconstructions, rates and PSNR.
pub fn verify_equivalence(
    masked: &CodecModel,
    pruned: &CodecModel,
    inputs: &[Tensor],
    tolerance: f32,
) -> Result<EquivalenceReport> {
    let opts = ForwardOptions {
        phase: Phase::Eval,
        masking: true,
        extra_masks: None,
    };
    let mut rng = RngState::new(0);
    let mut checks = Vec::with_capacity(inputs.len());
    let mut max_diff = 0.0f32;
    let mut worst = None;
    for (n, x) in inputs.iter().enumerate() {
        let a = masked.forward(x, &opts, &mut rng)?;
        let b = pruned.forward(x, &opts, &mut rng)?;
        if a.latent.shape() != b.latent.shape() || a.reconstruction.shape() != b.reconstruction.shape() {
            return Err(Error::PlanMismatch("models produce different output shapes".into()));
        }
        let mut check = InputCheck {
            latent_max_diff: 0.0,
            reconstruction_max_diff: 0.0,
            bits_masked: a.bits.item() as f64,
            bits_pruned: b.bits.item() as f64,
            psnr_masked: image_psnr(x, &a.reconstruction)?,
            psnr_pruned: image_psnr(x, &b.reconstruction)?,
        };
        for (name, ta, tb) in [
            ("latent", &a.latent, &b.latent),
            ("reconstruction", &a.reconstruction, &b.reconstruction),
        ] {
            let (d, at) = max_abs_diff(ta.data(), tb.data());
            if name == "latent" {
                check.latent_max_diff = d;
            } else {
                check.reconstruction_max_diff = d;
            }
            if d > max_diff || (worst.is_none() && d > 0.0) {
                max_diff = d;
                worst = Some(DiffLocation {
                    input: n,
                    tensor: name,
                    index: unravel(ta.shape(), at),
                    masked: ta.data()[at],
                    pruned: tb.data()[at],
                });
            }
        }
        checks.push(check);
    }
    Ok(EquivalenceReport {
        tolerance,
        inputs: checks,
        max_diff,
        worst,
        pass: max_diff <= tolerance,
    })
}
