//! Adaptive binary channel masking.
//!
//! Each masked convolution owns an importance vector. Its hard gate
//! `gt(a) = 1 if a >= 0 else 0` turns the vector into a binary per-channel
//! mask that multiplies the convolution output. The gate has no useful
//! derivative, so the backward pass borrows the slope of `sigmoid(eps * a)`
//! (straight-through). The forward value is hard in both training and
//! evaluation, which is what lets a pruned network reproduce the masked one
//! exactly.
//!
//! The stochastic variant keeps a `[2, C]` table of logits (row 0 "off",
//! row 1 "on") and draws a relaxed two-class sample per channel during
//! training.

use crate::codec::{CodecModel, SlotId};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::ops::{sigmoid_slope, stable_sigmoid};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 4.0;
pub const DEFAULT_TAU: f32 = 1.0;
/// Initial importance; every channel starts switched on.
pub const ALPHA_INIT: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Deterministic,
    Stochastic,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Deterministic => "deterministic",
            GateMode::Stochastic => "stochastic",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(GateMode::Deterministic),
            "stochastic" => Ok(GateMode::Stochastic),
            other => Err(Error::Config(format!("unknown gate mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub mode: GateMode,
    /// Sharpness of the sigmoid surrogate.
    pub epsilon: f32,
    /// Relaxation temperature of the stochastic gate.
    pub tau: f32,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            mode: GateMode::Deterministic,
            epsilon: DEFAULT_EPSILON,
            tau: DEFAULT_TAU,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("tau", self.tau)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("gate {name} must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Hard threshold forward, `eps * s(eps a) * (1 - s(eps a))` backward.
pub fn gate(alpha: &Tensor, cfg: &GateConfig) -> Tensor {
    let data = alpha.data().iter().map(|&a| hard(a)).collect();
    let (ac, eps) = (alpha.clone(), cfg.epsilon);
    Tensor::from_op(
        alpha.shape().to_vec(),
        data,
        vec![alpha.clone()],
        Box::new(move |g| {
            vec![Some(
                g.iter()
                    .zip(ac.data())
                    .map(|(g, &a)| g * eps * sigmoid_slope(eps * a))
                    .collect(),
            )]
        }),
    )
}

fn hard(a: f32) -> f32 {
    if a >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn check_logits(logits: &Tensor) -> Result<usize> {
    match *logits.shape() {
        [2, c] => Ok(c),
        _ => Err(Error::dim(
            "gate_stochastic",
            format!("logits must be [2, C], got {:?}", logits.shape()),
        )),
    }
}

/// Relaxed Bernoulli gate over `[off; on]` logits.
///
/// Training draws two Gumbel variables per channel and returns the "on"
/// coordinate of the tempered two-class softmax,
/// `sigmoid((on + g_on - off - g_off) / tau)`. Evaluation is the hard
/// decision `on >= off`.
pub fn gate_stochastic(
    logits: &Tensor,
    cfg: &GateConfig,
    phase: Phase,
    rng: &mut RngState,
) -> Result<Tensor> {
    let c = check_logits(logits)?;
    let (off, on) = logits.data().split_at(c);
    if phase == Phase::Eval {
        let data = on.iter().zip(off).map(|(a, b)| hard(a - b)).collect();
        return Ok(Tensor::new(&[c], data)?);
    }
    let tau = cfg.tau;
    let mut gumbel = || -(-rng.open_unit().ln()).ln();
    let sample: Vec<f32> = on
        .iter()
        .zip(off)
        .map(|(a, b)| {
            let noise = gumbel() - gumbel();
            stable_sigmoid((a - b + noise) / tau)
        })
        .collect();
    let kept = sample.clone();
    Ok(Tensor::from_op(
        vec![c],
        sample,
        vec![logits.clone()],
        Box::new(move |g| {
            let d: Vec<f32> = g
                .iter()
                .zip(&kept)
                .map(|(g, s)| g * s * (1.0 - s) / tau)
                .collect();
            let mut out = Vec::with_capacity(2 * d.len());
            out.extend(d.iter().map(|v| -v));
            out.extend(d.iter().copied());
            vec![Some(out)]
        }),
    ))
}

/// Channel-wise product `x[:, c] * mask[c]`.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let [batch, c, h, w] = match *x.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::dim("apply_mask", format!("x must be 4-D, got {:?}", x.shape()))),
    };
    if mask.shape() != [c] {
        return Err(Error::dim(
            "apply_mask",
            format!("mask length {:?} does not match {c} channels", mask.shape()),
        ));
    }
    let hw = h * w;
    let m = mask.data();
    let mut out = x.data().to_vec();
    for b in 0..batch {
        for ch in 0..c {
            let mv = m[ch];
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter_mut()
                .for_each(|v| *v *= mv);
        }
    }
    let (xc, mc) = (x.clone(), mask.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), mask.clone()],
        Box::new(move |g| {
            let m = mc.data();
            let xd = xc.data();
            let mut gx = g.to_vec();
            let mut gm = vec![0.0f32; c];
            for b in 0..batch {
                for ch in 0..c {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    gm[ch] += g[r.clone()].iter().zip(&xd[r.clone()]).map(|(g, x)| g * x).sum::<f32>();
                    gx[r].iter_mut().for_each(|v| *v *= m[ch]);
                }
            }
            vec![Some(gx), Some(gm)]
        }),
    ))
}

/// `||mask||_1 / C` for a mask with entries in `[0, 1]`.
pub fn sparsity_term(mask: &Tensor) -> Tensor {
    let c = mask.numel();
    // one rounding of sum / C, so binary masks give exactly count / C
    let total: f64 = mask.data().iter().map(|&v| v as f64).sum();
    let scale = 1.0 / c as f32;
    Tensor::from_op(
        Vec::new(),
        vec![(total / c as f64) as f32],
        vec![mask.clone()],
        Box::new(move |g| vec![Some(vec![g[0] * scale; c])]),
    )
}

/// Learnable per-channel importance of one masked layer.
#[derive(Debug)]
pub enum ImportanceVector {
    Deterministic { alpha: Tensor },
    Stochastic { logits: Tensor },
}

impl Clone for ImportanceVector {
    fn clone(&self) -> Self {
        match self {
            Self::Deterministic { alpha } => Self::Deterministic { alpha: alpha.deep_copy() },
            Self::Stochastic { logits } => Self::Stochastic { logits: logits.deep_copy() },
        }
    }
}

impl ImportanceVector {
    pub fn new(mode: GateMode, channels: usize) -> Self {
        match mode {
            GateMode::Deterministic => Self::Deterministic {
                alpha: Tensor::full(&[channels], ALPHA_INIT).into_param(),
            },
            GateMode::Stochastic => {
                let mut v = vec![0.0; channels];
                v.extend(std::iter::repeat(ALPHA_INIT).take(channels));
                Self::Stochastic {
                    logits: Tensor::param(&[2, channels], v).expect("length matches"),
                }
            }
        }
    }

    /// Rebuild from a stored parameter tensor; the shape decides the mode.
    pub fn from_param(param: Tensor) -> Result<Self> {
        match *param.shape() {
            [_] => Ok(Self::Deterministic { alpha: param }),
            [2, _] => Ok(Self::Stochastic { logits: param }),
            _ => Err(Error::dim(
                "importance",
                format!("expected [C] or [2, C], got {:?}", param.shape()),
            )),
        }
    }

    pub fn mode(&self) -> GateMode {
        match self {
            Self::Deterministic { .. } => GateMode::Deterministic,
            Self::Stochastic { .. } => GateMode::Stochastic,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::Deterministic { alpha } => alpha.numel(),
            Self::Stochastic { logits } => logits.numel() / 2,
        }
    }

    pub fn param(&self) -> &Tensor {
        match self {
            Self::Deterministic { alpha } => alpha,
            Self::Stochastic { logits } => logits,
        }
    }

    pub fn param_mut(&mut self) -> &mut Tensor {
        match self {
            Self::Deterministic { alpha } => alpha,
            Self::Stochastic { logits } => logits,
        }
    }

    /// Mask tensor for a forward pass; differentiable in the parameters.
    pub fn mask(&self, cfg: &GateConfig, phase: Phase, rng: &mut RngState) -> Result<Tensor> {
        match self {
            Self::Deterministic { alpha } => Ok(gate(alpha, cfg)),
            Self::Stochastic { logits } => gate_stochastic(logits, cfg, phase, rng),
        }
    }

    /// Evaluation-time binary decision per channel.
    pub fn hard_gates(&self) -> Vec<bool> {
        match self {
            Self::Deterministic { alpha } => alpha.data().iter().map(|&a| a >= 0.0).collect(),
            Self::Stochastic { logits } => {
                let (off, on) = logits.data().split_at(self.channels());
                on.iter().zip(off).map(|(a, b)| a >= b).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerUsage {
    pub slot: SlotId,
    pub kept: usize,
    pub channels: usize,
}

impl LayerUsage {
    pub fn ratio(&self) -> f64 {
        self.kept as f64 / self.channels as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelUsage {
    pub layers: Vec<LayerUsage>,
    /// Arithmetic mean of the per-layer kept ratios; 1.0 without ABCMs.
    pub mean_ratio: f64,
}

impl ChannelUsage {
    pub fn kept_total(&self) -> usize {
        self.layers.iter().map(|l| l.kept).sum()
    }

    pub fn channels_total(&self) -> usize {
        self.layers.iter().map(|l| l.channels).sum()
    }
}

/// Per-slot keep counts under the current hard gates.
pub fn effective_channels(model: &CodecModel) -> ChannelUsage {
    let layers: Vec<LayerUsage> = model
        .masks()
        .map(|(slot, iv)| LayerUsage {
            slot,
            kept: iv.hard_gates().iter().filter(|&&k| k).count(),
            channels: iv.channels(),
        })
        .collect();
    let mean_ratio = if layers.is_empty() {
        1.0
    } else {
        layers.iter().map(LayerUsage::ratio).sum::<f64>() / layers.len() as f64
    };
    ChannelUsage { layers, mean_ratio }
}
