//! Joint rate / distortion / sparsity training.
//!
//! The objective per step is `R + lambda * D + gamma * mean_i(s_i)` with `R`
//! in bits per pixel, `D` the MSE on the 0-255 scale and `s_i` the fraction
//! of channels gated on at ABCM slot `i`.

use crate::abcm::{effective_channels, sparsity_term, ChannelUsage};
use crate::codec::{distortion_mse, psnr, CodecModel, ForwardOptions};
use crate::error::{Error, Result};
use crate::images::ImageRecord;
use crate::rng::RngState;
use crate::tensor::{ops, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f32,
    pub gamma: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub seed: u64,
    /// Step at which the learning rate is halved, once.
    pub lr_halve_at: Option<usize>,
    /// Learning rate of the ABCM importance parameters; `lr` if unset.
    pub mask_lr: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 3e-4,
            gamma: 0.01,
            lr: 3e-3,
            steps: 1000,
            batch_size: 4,
            patch: 64,
            seed: 0,
            lr_halve_at: None,
            mask_lr: Some(5e-3),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("learning rate", Some(self.lr)), ("mask learning rate", self.mask_lr)] {
            if let Some(v) = v.filter(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be at least 1".into()));
        }
        if self.patch == 0 || self.patch % 16 != 0 {
            return Err(Error::Config(format!("patch {} must be a positive multiple of 16", self.patch)));
        }
        Ok(())
    }

    fn halving(&self, step: usize) -> f32 {
        match self.lr_halve_at {
            Some(h) if step >= h => 0.5,
            _ => 1.0,
        }
    }

    fn lr_at(&self, step: usize) -> f32 {
        self.lr * self.halving(step)
    }

    fn mask_lr_at(&self, step: usize) -> f32 {
        self.mask_lr.unwrap_or(self.lr) * self.halving(step)
    }
}

/// The terms of one evaluation of the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Rate in bits per pixel.
    pub rate: f64,
    /// MSE on the 0-255 scale.
    pub distortion: f64,
    /// Per-slot `s_i`, slot order.
    pub sparsity: Vec<f64>,
    /// Mean of `sparsity`; 0 for a model without ABCM slots.
    pub s_mean: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `R + lambda D + gamma s_mean` from the stored parts.
    pub fn recombined(&self) -> f64 {
        self.rate + self.lambda * self.distortion + self.gamma * self.s_mean
    }
}

/// One training-phase forward pass on `batch`; gradients accumulate into
/// the model's parameters when `backward` is set.
pub fn loss_step(
    model: &CodecModel,
    batch: &Tensor,
    cfg: &TrainConfig,
    rng: &mut RngState,
    step: usize,
    backward: bool,
) -> Result<LossBreakdown> {
    let pass = match model.forward(batch, &ForwardOptions::train(), rng) {
        Err(Error::Numeric { .. }) => return Err(Error::Diverged { step }),
        other => other?,
    };
    let pixels = match *batch.shape() {
        [b, _, h, w] => (b * h * w) as f32,
        _ => unreachable!("forward checked the shape"),
    };
    let rate = ops::mul_scalar(&pass.bits, 1.0 / pixels);
    let dist = distortion_mse(batch, &pass.reconstruction)?;
    let terms: Vec<Tensor> = pass.masks.iter().map(|(_, m)| sparsity_term(m)).collect();
    let s_mean = if terms.is_empty() {
        Tensor::scalar(0.0)
    } else {
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = ops::add(&acc, t)?;
        }
        ops::mul_scalar(&acc, 1.0 / terms.len() as f32)
    };
    let total = ops::add(
        &ops::add(&rate, &ops::mul_scalar(&dist, cfg.lambda))?,
        &ops::mul_scalar(&s_mean, cfg.gamma),
    )?;
    if !total.item().is_finite() {
        return Err(Error::Diverged { step });
    }
    if backward {
        total.backward()?;
    }
    Ok(LossBreakdown {
        rate: rate.item() as f64,
        distortion: dist.item() as f64,
        sparsity: terms.iter().map(|t| t.item() as f64).collect(),
        s_mean: s_mean.item() as f64,
        lambda: cfg.lambda as f64,
        gamma: cfg.gamma as f64,
        total: total.item() as f64,
    })
}

/// Adam with bias correction; parameters are replaced by fresh leaves.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    /// One update; `lrs[k]` is the learning rate of `params[k]`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, lrs: &[f32]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data: Vec<f32> = p
                .data()
                .iter()
                .zip(&g)
                .enumerate()
                .map(|(i, (&x, &g))| {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    x - lrs[k] * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps)
                })
                .collect();
            *p = Tensor::param(p.shape(), data).expect("same shape");
        }
    }
}

/// Random `patch x patch` crops, one per batch element.
pub fn sample_batch(images: &[ImageRecord], batch: usize, patch: usize, rng: &mut RngState) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut data = Vec::with_capacity(batch * 3 * patch * patch);
    for _ in 0..batch {
        let img = &images[rng.below(images.len())];
        if img.width < patch || img.height < patch {
            return Err(Error::Config(format!(
                "{} is {}x{}, smaller than the {patch}px patch",
                img.source, img.width, img.height
            )));
        }
        let x = rng.below(img.width - patch + 1);
        let y = rng.below(img.height - patch + 1);
        data.extend(img.crop_planar(x, y, patch, patch));
    }
    Tensor::new(&[batch, 3, patch, patch], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean over images of per-image bits per pixel.
    pub bpp: f64,
    /// Mean over images of per-image PSNR.
    pub psnr: f64,
    pub mse: f64,
    pub images: usize,
}

/// Eval-phase rate and quality; each image is cropped to a multiple of 16.
pub fn evaluate(model: &CodecModel, images: &[ImageRecord]) -> Result<EvalReport> {
    let tensors: Vec<Tensor> = images
        .iter()
        .map(|i| {
            i.to_tensor(model.config().downscale())
                .ok_or_else(|| Error::Geometry(format!("{} is too small to evaluate", i.source)))
        })
        .collect::<Result<_>>()?;
    evaluate_tensors(model, &tensors, &ForwardOptions::eval())
}

pub fn evaluate_tensors(model: &CodecModel, images: &[Tensor], opts: &ForwardOptions<'_>) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut rng = RngState::new(0);
    let (mut bpp, mut ps, mut mse) = (0.0, 0.0, 0.0);
    for x in images {
        let pass = model.forward(x, opts, &mut rng)?;
        let [_, _, h, w] = x.shape().try_into().expect("4-D");
        let e = distortion_mse(x, &pass.reconstruction)?.item() as f64;
        bpp += pass.bits.item() as f64 / (h * w) as f64;
        ps += if e == 0.0 { f64::INFINITY } else { psnr(e)? };
        mse += e;
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        bpp: bpp / n,
        psnr: ps / n,
        mse: mse / n,
        images: images.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f32,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<StepRecord>,
    pub usage: ChannelUsage,
    /// `None` when training stopped early.
    pub eval: Option<EvalReport>,
    /// Step whose loss was non-finite; the curve holds the steps before it.
    pub diverged_at: Option<usize>,
}

/// Train in place. Deterministic for a given model, data and config. A
/// non-finite loss stops training and is reported in `diverged_at`, with
/// the model left at its last finite state.
pub fn train(
    model: &mut CodecModel,
    data: &[ImageRecord],
    eval_set: &[ImageRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let mut data_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let mut adam = Adam::default();
    let mask_flags: Vec<bool> = model
        .named_parameters()
        .iter()
        .map(|(n, _)| n.ends_with(".abcm"))
        .collect();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch_size, cfg.patch, &mut data_rng)?;
        model.zero_grad();
        let loss = match loss_step(model, &batch, cfg, &mut noise_rng, step, true) {
            Ok(l) => l,
            Err(Error::Diverged { step }) => {
                return Ok(TrainReport {
                    curve,
                    usage: effective_channels(model),
                    eval: None,
                    diverged_at: Some(step),
                })
            }
            Err(e) => return Err(e),
        };
        let lr = cfg.lr_at(step);
        let lrs: Vec<f32> = mask_flags
            .iter()
            .map(|&is_mask| if is_mask { cfg.mask_lr_at(step) } else { lr })
            .collect();
        adam.step(model.parameters_mut(), &lrs);
        curve.push(StepRecord { step, lr, loss });
    }
    model.zero_grad();
    let eval = if eval_set.is_empty() {
        None
    } else {
        Some(evaluate(model, eval_set)?)
    };
    Ok(TrainReport {
        curve,
        usage: effective_channels(model),
        eval,
        diverged_at: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub gamma: f32,
    pub psnr: f64,
    pub bpp: f64,
    pub mean_ratio: f64,
    pub usage: ChannelUsage,
    pub diverged_at: Option<usize>,
}

/// One training run per `gamma`, each from a copy of `template` with the
/// same seed. Returns the trained models alongside the table.
pub fn gamma_sweep(
    template: &CodecModel,
    data: &[ImageRecord],
    eval_set: &[ImageRecord],
    cfg: &TrainConfig,
    gammas: &[f32],
) -> Result<(Vec<SweepRow>, Vec<CodecModel>)> {
    if eval_set.is_empty() {
        return Err(Error::Config("gamma sweep needs an evaluation set".into()));
    }
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for &gamma in gammas {
        let mut model = template.clone();
        let arm = TrainConfig { gamma, ..cfg.clone() };
        let report = train(&mut model, data, eval_set, &arm)?;
        let eval = match &report.eval {
            Some(e) => e.clone(),
            None => evaluate(&model, eval_set)?,
        };
        rows.push(SweepRow {
            gamma,
            psnr: eval.psnr,
            bpp: eval.bpp,
            mean_ratio: report.usage.mean_ratio,
            usage: report.usage,
            diverged_at: report.diverged_at,
        });
        models.push(model);
    }
    Ok((rows, models))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub tolerance: f64,
    pub max_probes: usize,
    /// Fine-tune length per probe.
    pub steps: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.005,
            max_probes: 8,
            steps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub lambda: f32,
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Debug)]
pub struct MatchResult {
    pub lambda: f32,
    pub model: CodecModel,
    pub bpp: f64,
    pub residual: f64,
    pub converged: bool,
    pub probes: Vec<Probe>,
}

/// Search `lambda` in `[lambda/4, 4 lambda]` by bisection in log space,
/// fine-tuning a copy of `model` at each probe, until the evaluated bpp is
/// within `tolerance` of `target`. Returns the closest probe either way.
pub fn match_bitrate(
    model: &CodecModel,
    data: &[ImageRecord],
    eval_set: &[ImageRecord],
    target: f64,
    cfg: &TrainConfig,
    mcfg: &MatchConfig,
) -> Result<MatchResult> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Config(format!("target bpp must be positive, got {target}")));
    }
    let start = evaluate(model, eval_set)?;
    let mut best = MatchResult {
        lambda: cfg.lambda,
        model: model.clone(),
        bpp: start.bpp,
        residual: (start.bpp - target).abs(),
        converged: false,
        probes: Vec::new(),
    };
    if best.residual < mcfg.tolerance {
        best.converged = true;
        return Ok(best);
    }
    let (mut lo, mut hi) = ((cfg.lambda / 4.0).ln(), (cfg.lambda * 4.0).ln());
    for _ in 0..mcfg.max_probes {
        let lambda = ((lo + hi) / 2.0).exp();
        let mut m = model.clone();
        let tune = TrainConfig {
            lambda,
            steps: mcfg.steps,
            lr_halve_at: None,
            ..cfg.clone()
        };
        let report = train(&mut m, data, &[], &tune)?;
        if let Some(step) = report.diverged_at {
            return Err(Error::Diverged { step });
        }
        let e = evaluate(&m, eval_set)?;
        best.probes.push(Probe {
            lambda,
            bpp: e.bpp,
            psnr: e.psnr,
        });
        let residual = (e.bpp - target).abs();
        if residual < best.residual || best.probes.len() == 1 {
            best.lambda = lambda;
            best.model = m;
            best.bpp = e.bpp;
            best.residual = residual;
        }
        if residual < mcfg.tolerance {
            best.converged = true;
            break;
        }
        // larger lambda weights distortion more and spends more bits
        if e.bpp < target {
            lo = lambda.ln();
        } else {
            hi = lambda.ln();
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abcm::GateConfig;
    use crate::codec::ChannelConfig;
    use crate::images::synthetic;

    fn model(abcm: bool) -> CodecModel {
        CodecModel::new(
            ChannelConfig::desk(),
            abcm.then(GateConfig::default),
            &mut RngState::new(0),
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            steps: 5,
            batch_size: 2,
            patch: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gamma_zero_drops_sparsity_term() {
        let m = model(true);
        let batch = sample_batch(&synthetic(0, 2, 32), 2, 32, &mut RngState::new(1)).unwrap();
        let cfg = TrainConfig { gamma: 0.0, ..small_cfg() };
        let l = loss_step(&m, &batch, &cfg, &mut RngState::new(2), 0, false).unwrap();
        assert_eq!(l.s_mean, 1.0);
        // the f32 graph computes (R + lambda * D) + 0 * s
        assert_eq!(l.total as f32, l.rate as f32 + l.distortion as f32 * cfg.lambda);
        let cfg = TrainConfig { gamma: 0.0, lambda: 0.0, ..small_cfg() };
        let l = loss_step(&m, &batch, &cfg, &mut RngState::new(2), 0, false).unwrap();
        assert_eq!(l.total, l.rate);
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let m = model(true);
        let batch = sample_batch(&synthetic(0, 2, 32), 2, 32, &mut RngState::new(1)).unwrap();
        loss_step(&m, &batch, &small_cfg(), &mut RngState::new(2), 0, true).unwrap();
        for (name, p) in m.named_parameters() {
            let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().all(|v| v.is_finite()), "{name}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::param(&[2], vec![1.0, -1.0]).unwrap();
        ops::sum(&ops::mul_scalar(&p, 3.0)).backward().unwrap();
        let mut adam = Adam::default();
        adam.step(vec![&mut p], &[0.1]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn lr_halves_once() {
        let cfg = TrainConfig { lr: 1.0, lr_halve_at: Some(3), ..small_cfg() };
        assert_eq!([cfg.lr_at(2), cfg.lr_at(3), cfg.lr_at(100)], [1.0, 0.5, 0.5]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic(4, 3, 32);
        let cfg = small_cfg();
        let (mut a, mut b) = (model(true), model(true));
        let ra = train(&mut a, &data, &data[..1], &cfg).unwrap();
        let rb = train(&mut b, &data, &data[..1], &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.curve.len(), 5);
    }

    #[test]
    fn bad_configs_rejected() {
        for cfg in [
            TrainConfig { steps: 0, ..small_cfg() },
            TrainConfig { patch: 40, ..small_cfg() },
            TrainConfig { lambda: f32::NAN, ..small_cfg() },
            TrainConfig { gamma: -1.0, ..small_cfg() },
        ] {
            assert!(cfg.validate().is_err());
        }
        let mut m = model(false);
        assert!(train(&mut m, &[], &[], &small_cfg()).is_err());
    }

    #[test]
    fn match_at_current_rate_is_free() {
        let data = synthetic(5, 2, 32);
        let m = model(true);
        let now = evaluate(&m, &data).unwrap().bpp;
        let r = match_bitrate(&m, &data, &data, now, &small_cfg(), &MatchConfig::default()).unwrap();
        assert!(r.converged && r.probes.is_empty());
        assert_eq!(r.lambda, small_cfg().lambda);
    }
}
