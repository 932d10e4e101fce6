//! Parameter and FLOP accounting, and the inference timing protocol.
//!
//! Counting conventions (frozen; they appear in every report header):
//!
//! * one multiply-add is 2 FLOPs;
//! * conv at output `H'xW'`: `2 Cin k^2 Cout H'W' + Cout H'W'` (bias adds);
//! * transposed conv: the same MAC count taken at its input resolution,
//!   plus one bias add per output element;
//! * GDN/IGDN on `C x H x W`: `(2C^2 + 4C) H W`, i.e. a square per
//!   element, a `C`-term weighted sum per element, then `+beta`, sqrt and
//!   divide/multiply at 1 FLOP each;
//! * ABCM mask multiply: `C H W`;
//! * entropy model: 13 FLOPs per latent element (centre, two offsets, two
//!   scalings, two sigmoids at 3 each, a difference and a log).
//!
//! Counts depend only on the channel widths and the input size.

use std::time::Instant;

use crate::abcm::{GateMode, Phase};
use crate::codec::{quantize, rate_bits, ChannelConfig, CodecModel, ForwardOptions, Side, MASKED_STAGES, STAGES};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::{evaluate_tensors, EvalReport};

pub const ENTROPY_FLOPS_PER_ELEMENT: u64 = 13;
pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_ROUNDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    Conv,
    Deconv,
    Gdn,
    InverseGdn,
    Mask,
    Entropy,
}

impl CostKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::Conv => "conv",
            CostKind::Deconv => "deconv",
            CostKind::Gdn => "GDN",
            CostKind::InverseGdn => "IGDN",
            CostKind::Mask => "ABCM",
            CostKind::Entropy => "entropy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: CostKind,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostTable {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerCost>,
}

impl CostTable {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    /// Totals without ABCM rows: the cost of the network that is deployed.
    pub fn network_params(&self) -> u64 {
        self.layers.iter().filter(|l| l.kind != CostKind::Mask).map(|l| l.params).sum()
    }

    pub fn network_flops(&self) -> u64 {
        self.layers.iter().filter(|l| l.kind != CostKind::Mask).map(|l| l.flops).sum()
    }
}

/// Per-layer costs for widths `config` on an `height x width` input.
/// `masks` adds ABCM rows (importance parameters and mask multiplies).
pub fn cost_table(config: &ChannelConfig, masks: Option<GateMode>, height: usize, width: usize) -> Result<CostTable> {
    config.validate()?;
    let d = config.downscale();
    if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
        return Err(Error::Geometry(format!(
            "{height}x{width} is not a positive multiple of {d}"
        )));
    }
    let k2 = (config.kernel * config.kernel) as u64;
    let s = config.stride;
    let mut layers = Vec::new();
    for side in [Side::Analysis, Side::Synthesis] {
        let w = config.widths(side);
        for st in 0..STAGES {
            let (cin, cout) = (w[st] as u64, w[st + 1] as u64);
            // spatial size on the input and output side of this layer
            let (hin, win, hout, wout) = match side {
                Side::Analysis => {
                    let f = s.pow(st as u32);
                    (height / f, width / f, height / f / s, width / f / s)
                }
                Side::Synthesis => {
                    let f = s.pow((STAGES - st) as u32);
                    (height / f, width / f, height / f * s, width / f * s)
                }
            };
            let out_px = (hout * wout) as u64;
            let (kind, mac_px) = match side {
                Side::Analysis => (CostKind::Conv, out_px),
                Side::Synthesis => (CostKind::Deconv, (hin * win) as u64),
            };
            let prefix = format!("{}{}", side.prefix(), st + 1);
            layers.push(LayerCost {
                name: format!("{prefix}.{}", kind.as_str()),
                kind,
                params: cout * cin * k2 + cout,
                flops: 2 * cin * k2 * cout * mac_px + cout * out_px,
            });
            if st < MASKED_STAGES {
                if let Some(mode) = masks {
                    let per = match mode {
                        GateMode::Deterministic => 1,
                        GateMode::Stochastic => 2,
                    };
                    layers.push(LayerCost {
                        name: format!("{prefix}.abcm"),
                        kind: CostKind::Mask,
                        params: per * cout,
                        flops: cout * out_px,
                    });
                }
                let kind = match side {
                    Side::Analysis => CostKind::Gdn,
                    Side::Synthesis => CostKind::InverseGdn,
                };
                layers.push(LayerCost {
                    name: format!("{prefix}.{}", kind.as_str()),
                    kind,
                    params: cout * cout + cout,
                    flops: (2 * cout * cout + 4 * cout) * out_px,
                });
            }
        }
    }
    let m = config.latent_channels() as u64;
    let latent_px = ((height / d) * (width / d)) as u64;
    layers.push(LayerCost {
        name: "entropy".into(),
        kind: CostKind::Entropy,
        params: 2 * m,
        flops: ENTROPY_FLOPS_PER_ELEMENT * m * latent_px,
    });
    Ok(CostTable { height, width, layers })
}

fn model_masks(model: &CodecModel) -> Option<GateMode> {
    model.has_abcm().then(|| model.gate_config().mode)
}

pub fn count_params(model: &CodecModel) -> CostTable {
    let d = model.config().downscale();
    cost_table(model.config(), model_masks(model), d, d).expect("valid geometry")
}

pub fn count_flops(model: &CodecModel, height: usize, width: usize) -> Result<CostTable> {
    cost_table(model.config(), model_masks(model), height, width)
}

/// Side-by-side costs and quality of two models.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub baseline: CostTable,
    pub pruned: CostTable,
    pub baseline_eval: EvalReport,
    pub pruned_eval: EvalReport,
    /// Network parameters (no ABCM rows), baseline over pruned.
    pub params_ratio: f64,
    pub flops_ratio: f64,
    /// `(baseline - pruned) / baseline * 100` on mean PSNR.
    pub psnr_drop_pct: f64,
}

pub fn compare(
    baseline: &CodecModel,
    pruned: &CodecModel,
    eval_set: &[Tensor],
    height: usize,
    width: usize,
) -> Result<CostReport> {
    let b = count_flops(baseline, height, width)?;
    let p = count_flops(pruned, height, width)?;
    let opts = ForwardOptions::eval();
    let be = evaluate_tensors(baseline, eval_set, &opts)?;
    let pe = evaluate_tensors(pruned, eval_set, &opts)?;
    Ok(CostReport {
        params_ratio: b.network_params() as f64 / p.network_params() as f64,
        flops_ratio: b.network_flops() as f64 / p.network_flops() as f64,
        psnr_drop_pct: (be.psnr - pe.psnr) / be.psnr * 100.0,
        baseline: b,
        pruned: p,
        baseline_eval: be,
        pruned_eval: pe,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub warmup: usize,
    pub rounds: usize,
    /// Seconds per timed round.
    pub samples: Vec<f64>,
    pub mean: f64,
}

/// Time analyze + quantize + rate + synthesize on one fixed input.
/// Warm-up rounds run first and are not recorded.
pub fn bench(model: &CodecModel, input: &Tensor, warmup: usize, rounds: usize) -> Result<TimingReport> {
    if rounds == 0 {
        return Err(Error::Config("bench needs at least one timed round".into()));
    }
    let opts = ForwardOptions::eval();
    let mut rng = RngState::new(0);
    let mut once = || -> Result<()> {
        let y = model.analyze(input, &opts, &mut rng)?;
        let y_hat = quantize(&y, Phase::Eval, &mut rng);
        let bits = rate_bits(&model.entropy, &y_hat)?;
        let x_hat = model.synthesize(&y_hat, &opts, &mut rng)?;
        std::hint::black_box((bits.item(), x_hat.data().len()));
        Ok(())
    };
    for _ in 0..warmup {
        once()?;
    }
    let mut samples = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let t = Instant::now();
        once()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    let mean = samples.iter().sum::<f64>() / rounds as f64;
    Ok(TimingReport {
        warmup,
        rounds,
        samples,
        mean,
    })
}

/// Baseline mean time over pruned mean time.
pub fn speedup(baseline: &TimingReport, pruned: &TimingReport) -> f64 {
    baseline.mean / pruned.mean
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row<'a>(t: &'a CostTable, name: &str) -> &'a LayerCost {
        t.layers.iter().find(|l| l.name == name).unwrap()
    }

    #[test]
    fn first_conv_and_gdn_params() {
        let t = cost_table(&ChannelConfig::desk(), None, 16, 16).unwrap();
        assert_eq!(row(&t, "ga1.conv").params, 8 * 3 * 25 + 8);
        assert_eq!(row(&t, "ga1.conv").params, 608);
        assert_eq!(row(&t, "ga1.GDN").params, 72);
        assert_eq!(row(&t, "entropy").params, 24);
    }

    #[test]
    fn unit_conv_flops() {
        // 1 -> 1 channel, k = 1, one output pixel: one MAC plus one bias add
        let c = ChannelConfig {
            analysis: vec![3, 1, 1, 1, 1],
            synthesis: vec![1, 1, 1, 1, 3],
            kernel: 1,
            stride: 2,
        };
        let t = cost_table(&c, None, 16, 16).unwrap();
        assert_eq!(row(&t, "ga4.conv").flops, 3);
    }

    #[test]
    fn doubling_sides_quadruples_conv_flops() {
        let c = ChannelConfig::desk();
        let a = cost_table(&c, None, 32, 48).unwrap();
        let b = cost_table(&c, None, 64, 96).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(4 * x.flops, y.flops, "{}", x.name);
            assert_eq!(x.params, y.params);
        }
    }

    #[test]
    fn abcm_rows_are_separate() {
        let c = ChannelConfig::desk();
        let plain = cost_table(&c, None, 64, 64).unwrap();
        let det = cost_table(&c, Some(GateMode::Deterministic), 64, 64).unwrap();
        let sto = cost_table(&c, Some(GateMode::Stochastic), 64, 64).unwrap();
        assert_eq!(det.total_params() - plain.total_params(), 48);
        assert_eq!(sto.total_params() - plain.total_params(), 96);
        assert_eq!(det.network_params(), plain.total_params());
        assert_eq!(det.network_flops(), plain.total_flops());
    }

    #[test]
    fn bad_geometry() {
        assert!(matches!(
            cost_table(&ChannelConfig::desk(), None, 24, 32),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn bench_round_counts() {
        let m = CodecModel::new(ChannelConfig::desk(), None, &mut RngState::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let r = bench(&m, &x, 2, 1).unwrap();
        assert_eq!(r.samples.len(), 1);
        assert_eq!(r.mean, r.samples[0]);
        let r = bench(&m, &x, 0, 5).unwrap();
        assert_eq!(r.samples.len(), 5);
        assert!(bench(&m, &x, 1, 0).is_err());
    }
}
