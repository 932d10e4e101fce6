//! Central finite-difference check of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|)`, 0 when both vanish.
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
    pub rtol: f64,
    pub atol: f64,
}

impl GradCheck {
    /// Every sample within `rtol * max(|a|, |n|) + atol`.
    pub fn pass(&self) -> bool {
        self.samples.iter().all(|s| {
            let scale = s.analytic.abs().max(s.numeric.abs());
            (s.analytic - s.numeric).abs() <= self.rtol * scale + self.atol
        })
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

/// Compare `d f / d inputs` from `backward` with `(f(x+h) - f(x-h)) / 2h`
/// at `coords` coordinates drawn uniformly over all inputs.
///
/// `f` must be deterministic and return a scalar; it is called with fresh
/// leaf copies of `inputs`.
pub fn check<F>(inputs: &[Tensor], f: F, h: f32, coords: usize, rtol: f64, atol: f64, rng: &mut RngState) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.deep_copy().into_param()).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    loss.backward()?;
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    if total == 0 {
        return Err(Error::Contract("gradient check needs at least one input element".into()));
    }
    let eval_at = |k: usize, i: usize, delta: f32| -> Result<f64> {
        let moved: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut d = t.data().to_vec();
                if j == k {
                    d[i] += delta;
                }
                Tensor::new(t.shape(), d)
            })
            .collect::<Result<_>>()?;
        Ok(f(&moved)?.item() as f64)
    };
    let mut samples = Vec::with_capacity(coords);
    for _ in 0..coords {
        let mut flat = rng.below(total);
        let mut k = 0;
        while flat >= inputs[k].numel() {
            flat -= inputs[k].numel();
            k += 1;
        }
        let analytic = leaves[k].grad().map_or(0.0, |g| g[flat] as f64);
        let numeric = (eval_at(k, flat, h)? - eval_at(k, flat, -h)?) / (2.0 * h as f64);
        samples.push(GradSample {
            input: k,
            index: flat,
            analytic,
            numeric,
        });
    }
    Ok(GradCheck { samples, rtol, atol })
}

/// `sum(t * w)` for fixed random weights `w`; turns any tensor into a
/// scalar whose gradient exercises every output element differently.
pub fn random_projection(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = RngState::new(seed);
    let w = Tensor::new(t.shape(), (0..t.numel()).map(|_| rng.uniform_in(-1.0, 1.0)).collect())?;
    Ok(crate::tensor::ops::sum(&crate::tensor::ops::mul(t, &w)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn square_passes() {
        let x = Tensor::new(&[5], vec![0.3, -1.0, 2.0, 0.7, -0.2]).unwrap();
        let r = check(
            &[x],
            |t| Ok(ops::sum(&ops::square(&t[0]))),
            1e-3,
            8,
            1e-2,
            1e-4,
            &mut RngState::new(0),
        )
        .unwrap();
        assert!(r.pass(), "{:?}", r.worst());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // the gate's straight-through slope is not the derivative of the hard step
        use crate::abcm::{gate, GateConfig};
        let a = Tensor::new(&[4], vec![0.3, -0.4, 0.2, -0.1]).unwrap();
        let r = check(
            &[a],
            |t| Ok(ops::sum(&gate(&t[0], &GateConfig::default()))),
            1e-3,
            4,
            1e-2,
            1e-4,
            &mut RngState::new(0),
        )
        .unwrap();
        assert!(!r.pass());
    }
}

/// Finite-difference settings used by [`op_suite`].
pub const SUITE_H: f32 = 1e-3;
pub const SUITE_RTOL: f64 = 1e-2;
pub const SUITE_ATOL: f64 = 1e-3;

fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).expect("sizes match")
}

fn extent(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Gradient check of every differentiable primitive on shapes drawn from
/// `seed` (all extents at most 8), `coords` coordinates each.
pub fn op_suite(seed: u64, coords: usize) -> Result<Vec<(&'static str, GradCheck)>> {
    use crate::abcm::{apply_mask, gate_stochastic, sparsity_term, GateConfig, GateMode, Phase};
    use crate::codec::{distortion_mse, quantize, rate_map, EntropyModel};
    use crate::tensor::{conv2d, deconv2d, gdn, ops};

    let mut rng = RngState::new(seed);
    let b = extent(&mut rng, 1, 2);
    let c = extent(&mut rng, 1, 4);
    let h = extent(&mut rng, 2, 8);
    let w = extent(&mut rng, 2, 8);
    let act = [b, c, h, w];
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   inputs: Vec<Tensor>,
                   f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
                   rng: &mut RngState|
     -> Result<()> {
        let proj_seed = rng.next_u64();
        // centring on the unperturbed output keeps the projected scalar near
        // zero, so f32 rounding of the total does not swamp a 1e-3 step
        let base = f(&inputs)?.detach();
        let g = check(
            &inputs,
            |t| random_projection(&ops::sub(&f(t)?, &base)?, proj_seed),
            SUITE_H,
            coords,
            SUITE_RTOL,
            SUITE_ATOL,
            rng,
        )?;
        out.push((name, g));
        Ok(())
    };

    let x = random_tensor(&act, -1.0, 1.0, &mut rng);
    let y = random_tensor(&act, -1.0, 1.0, &mut rng);
    run("add", vec![x.clone(), y.clone()], &|t| ops::add(&t[0], &t[1]), &mut rng)?;
    run("sub", vec![x.clone(), y.clone()], &|t| ops::sub(&t[0], &t[1]), &mut rng)?;
    run("mul", vec![x.clone(), y.clone()], &|t| ops::mul(&t[0], &t[1]), &mut rng)?;
    run("mul_scalar", vec![x.clone()], &|t| Ok(ops::mul_scalar(&t[0], -1.7)), &mut rng)?;
    run("add_scalar", vec![x.clone()], &|t| Ok(ops::add_scalar(&t[0], 0.3)), &mut rng)?;
    run("square", vec![x.clone()], &|t| Ok(ops::square(&t[0])), &mut rng)?;
    run("sigmoid", vec![x.clone()], &|t| Ok(ops::sigmoid(&ops::mul_scalar(&t[0], 3.0))), &mut rng)?;
    run("sum", vec![x.clone()], &|t| Ok(ops::sum(&t[0])), &mut rng)?;
    run("mean", vec![x.clone()], &|t| Ok(ops::mean(&t[0])), &mut rng)?;

    let k = [1, 3, 5][rng.below(3)];
    let stride = extent(&mut rng, 1, 2);
    let pad = rng.below(k / 2 + 1);
    let cout = extent(&mut rng, 1, 4);
    let (ch, cw) = ((h + 2 * pad).max(k), (w + 2 * pad).max(k));
    let xin = random_tensor(&[b, c, ch - 2 * pad, cw - 2 * pad], -1.0, 1.0, &mut rng);
    let kern = random_tensor(&[cout, c, k, k], -0.5, 0.5, &mut rng);
    let bias = random_tensor(&[cout], -0.5, 0.5, &mut rng);
    run(
        "conv2d",
        vec![xin, kern, bias],
        &move |t| conv2d(&t[0], &t[1], &t[2], stride, pad),
        &mut rng,
    )?;

    let op = if stride > 1 { rng.below(stride) } else { 0 };
    let dk = random_tensor(&[c, cout, k, k], -0.5, 0.5, &mut rng);
    let dbias = random_tensor(&[cout], -0.5, 0.5, &mut rng);
    let dpad = pad.min((k - 1) / 2);
    run(
        "deconv2d",
        vec![x.clone(), dk, dbias],
        &move |t| deconv2d(&t[0], &t[1], &t[2], stride, dpad, op),
        &mut rng,
    )?;

    let beta = random_tensor(&[c], 0.5, 1.5, &mut rng);
    let gamma = random_tensor(&[c, c], 0.05, 0.5, &mut rng);
    run(
        "gdn",
        vec![x.clone(), beta.clone(), gamma.clone()],
        &|t| gdn(&t[0], &t[1], &t[2], false),
        &mut rng,
    )?;
    run(
        "igdn",
        vec![x.clone(), beta, gamma],
        &|t| gdn(&t[0], &t[1], &t[2], true),
        &mut rng,
    )?;

    let mask = random_tensor(&[c], 0.0, 1.0, &mut rng);
    run("apply_mask", vec![x.clone(), mask.clone()], &|t| apply_mask(&t[0], &t[1]), &mut rng)?;
    run("sparsity_term", vec![mask], &|t| Ok(sparsity_term(&t[0])), &mut rng)?;

    let logits = random_tensor(&[2, c], -1.0, 1.0, &mut rng);
    let gate_seed = rng.next_u64();
    let cfg = GateConfig {
        mode: GateMode::Stochastic,
        ..GateConfig::default()
    };
    run(
        "gate_stochastic",
        vec![logits],
        &move |t| gate_stochastic(&t[0], &cfg, Phase::Train, &mut RngState::new(gate_seed)),
        &mut rng,
    )?;

    let noise_seed = rng.next_u64();
    run(
        "quantize",
        vec![x.clone()],
        &move |t| Ok(quantize(&t[0], Phase::Train, &mut RngState::new(noise_seed))),
        &mut rng,
    )?;

    let latent = random_tensor(&act, -3.0, 3.0, &mut rng);
    let loc = random_tensor(&[c], -0.5, 0.5, &mut rng);
    let log_scale = random_tensor(&[c], -0.5, 0.5, &mut rng);
    run(
        "rate_map",
        vec![latent, loc, log_scale],
        &|t| {
            let em = EntropyModel {
                loc: t[1].clone(),
                log_scale: t[2].clone(),
            };
            rate_map(&em, &t[0])
        },
        &mut rng,
    )?;

    // reconstructions near the image keep the 0-255 scale MSE small enough
    // for f32 differences to resolve single-coordinate changes
    let img = random_tensor(&act, 0.0, 1.0, &mut rng);
    let rec = ops::add(&img, &random_tensor(&act, -0.05, 0.05, &mut rng))?.detach();
    run(
        "distortion_mse",
        vec![img, rec],
        &|t| distortion_mse(&t[0], &t[1]),
        &mut rng,
    )?;
    Ok(out)
}
