//! Factorized logistic entropy model.
//!
//! Each latent channel `c` has a location `mu_c` and scale
//! `b_c = max(exp(log_scale_c), 1e-6)`. The probability of an integer bin
//! is `F(y + 1/2) - F(y - 1/2)` with the logistic CDF `F`, clamped below at
//! `2^-32`, so a single element never costs more than 32 bits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCALE_FLOOR: f64 = 1e-6;
/// Smallest probability mass a bin may take.
pub const MASS_FLOOR: f64 = 1.0 / 4_294_967_296.0;

#[derive(Debug)]
pub struct EntropyModel {
    /// `[M]`
    pub loc: Tensor,
    /// `[M]`, unconstrained
    pub log_scale: Tensor,
}

impl Clone for EntropyModel {
    fn clone(&self) -> Self {
        Self {
            loc: self.loc.deep_copy(),
            log_scale: self.log_scale.deep_copy(),
        }
    }
}

impl EntropyModel {
    /// Location 0, scale 1 for every channel.
    pub fn new(channels: usize) -> Self {
        Self {
            loc: Tensor::zeros(&[channels]).into_param(),
            log_scale: Tensor::zeros(&[channels]).into_param(),
        }
    }

    pub fn channels(&self) -> usize {
        self.loc.numel()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scale
            .data()
            .iter()
            .map(|&s| (s as f64).exp().max(SCALE_FLOOR))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slope(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Probability of the unit bin centred at offset `d = y - mu` under a
/// logistic of scale `b`, plus its partial derivatives in `d` and `b`.
///
/// For `d > 0` the mass is computed from the upper tail,
/// `s(-(d - 1/2)/b) - s(-(d + 1/2)/b)`, which keeps precision far from the
/// mode where both CDF values round to 1.
fn bin_mass(d: f64, b: f64) -> (f64, f64, f64) {
    let t = if d > 0.0 { -d } else { d };
    let hi = (t + 0.5) / b;
    let lo = (t - 0.5) / b;
    let mass = sigmoid(hi) - sigmoid(lo);
    let (sh, sl) = (slope(hi), slope(lo));
    let dt = (sh - sl) / b;
    let dd = if d > 0.0 { -dt } else { dt };
    let db = -(sh * hi - sl * lo) / b;
    (mass, dd, db)
}

struct Elementwise {
    bits: Vec<f64>,
    /// d(bits)/d(y) and d(bits)/d(b) per element, zero where the mass is clamped
    dy: Vec<f64>,
    db: Vec<f64>,
    /// whether d(b)/d(log_scale) is nonzero, per channel
    scale_live: Vec<bool>,
    scales: Vec<f64>,
    hw: usize,
}

fn elementwise(model: &EntropyModel, y_hat: &Tensor, op: &'static str) -> Result<Elementwise> {
    let m = model.channels();
    let [batch, c, h, w] = match *y_hat.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::dim(op, format!("latent must be 4-D, got {:?}", y_hat.shape()))),
    };
    if c != m {
        return Err(Error::dim(
            op,
            format!("latent has {c} channels on axis 1, entropy model has {m}"),
        ));
    }
    let hw = h * w;
    let mu = model.loc.data();
    let scales = model.scales();
    let y = y_hat.data();
    let ln2 = std::f64::consts::LN_2;
    let n = batch * m * hw;
    let (mut bits, mut dy, mut db) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for bi in 0..batch {
        for ch in 0..m {
            let (mu_c, b_c) = (mu[ch] as f64, scales[ch]);
            let base = (bi * m + ch) * hw;
            for i in base..base + hw {
                let (mass, dd, dbb) = bin_mass(y[i] as f64 - mu_c, b_c);
                if mass > MASS_FLOOR {
                    let k = -1.0 / (mass * ln2);
                    bits[i] = -mass.log2();
                    dy[i] = k * dd;
                    db[i] = k * dbb;
                } else {
                    bits[i] = 32.0;
                }
            }
        }
    }
    let scale_live = model
        .log_scale
        .data()
        .iter()
        .map(|&s| (s as f64).exp() > SCALE_FLOOR)
        .collect();
    Ok(Elementwise {
        bits,
        dy,
        db,
        scale_live,
        scales,
        hw,
    })
}

impl Elementwise {
    /// Gradients for `(y_hat, loc, log_scale)` given upstream weights per element.
    fn backward(&self, m: usize, g: impl Fn(usize) -> f64) -> Vec<Option<Vec<f32>>> {
        let mut gy = vec![0.0f32; self.bits.len()];
        let mut gmu = vec![0.0f64; m];
        let mut gb = vec![0.0f64; m];
        for (i, gyi) in gy.iter_mut().enumerate() {
            let ch = (i / self.hw) % m;
            let w = g(i);
            *gyi = (w * self.dy[i]) as f32;
            gmu[ch] -= w * self.dy[i];
            gb[ch] += w * self.db[i];
        }
        let glog = (0..m)
            .map(|ch| if self.scale_live[ch] { (gb[ch] * self.scales[ch]) as f32 } else { 0.0 })
            .collect();
        vec![Some(gy), Some(gmu.iter().map(|&v| v as f32).collect()), Some(glog)]
    }
}

/// Total estimated code length of `y_hat` (`[B, M, h, w]`) in bits.
///
/// Differentiable in the entropy parameters and, when `y_hat` carries a
/// graph (training-time noisy latents), in `y_hat` itself.
pub fn rate_bits(model: &EntropyModel, y_hat: &Tensor) -> Result<Tensor> {
    let e = elementwise(model, y_hat, "rate_bits")?;
    let total: f64 = e.bits.iter().sum();
    let m = model.channels();
    Ok(Tensor::from_op(
        Vec::new(),
        vec![total as f32],
        vec![y_hat.clone(), model.loc.clone(), model.log_scale.clone()],
        Box::new(move |g| {
            let s = g[0] as f64;
            e.backward(m, |_| s)
        }),
    ))
}

/// Code length of every element of `y_hat`, same shape.
pub fn rate_map(model: &EntropyModel, y_hat: &Tensor) -> Result<Tensor> {
    let e = elementwise(model, y_hat, "rate_map")?;
    let m = model.channels();
    let data = e.bits.iter().map(|&b| b as f32).collect();
    Ok(Tensor::from_op(
        y_hat.shape().to_vec(),
        data,
        vec![y_hat.clone(), model.loc.clone(), model.log_scale.clone()],
        Box::new(move |g| e.backward(m, |i| g[i] as f64)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(values: &[f32], m: usize) -> Tensor {
        Tensor::new(&[1, m, 1, values.len() / m], values.to_vec()).unwrap()
    }

    #[test]
    fn map_sums_to_total() {
        let mut em = EntropyModel::new(2);
        em.loc = Tensor::new(&[2], vec![0.3, -0.2]).unwrap().into_param();
        let y = latent(&[0.0, 1.0, -2.0, 7.0, 0.4, -40.0], 2);
        let map = rate_map(&em, &y).unwrap();
        let total = rate_bits(&em, &y).unwrap().item();
        let summed: f64 = map.data().iter().map(|&v| v as f64).sum();
        assert!((summed as f32 - total).abs() < 1e-4);
        assert_eq!(map.data()[5], 32.0);
    }

    #[test]
    fn unit_logistic_at_mode() {
        let em = EntropyModel::new(1);
        let bits = rate_bits(&em, &latent(&[0.0], 1)).unwrap().item() as f64;
        let mass = sigmoid(0.5) - sigmoid(-0.5);
        assert!((mass - 0.2449).abs() < 1e-4);
        assert!((bits - 2.0297).abs() < 1e-4, "{bits}");
    }

    #[test]
    fn far_tail_is_clamped_to_32_bits() {
        let em = EntropyModel::new(1);
        let bits = rate_bits(&em, &latent(&[1000.0], 1)).unwrap();
        assert_eq!(bits.item(), 32.0);
        let bits = rate_bits(&em, &latent(&[-1000.0], 1)).unwrap();
        assert_eq!(bits.item(), 32.0);
    }

    #[test]
    fn symmetric_about_location() {
        let em = EntropyModel::new(1);
        for d in [0.5f32, 1.0, 3.0, 17.0] {
            let a = rate_bits(&em, &latent(&[d], 1)).unwrap().item();
            let b = rate_bits(&em, &latent(&[-d], 1)).unwrap().item();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn additive_over_elements() {
        let em = EntropyModel::new(2);
        let vals = [0.0f32, 1.0, -2.0, 5.0];
        let whole = rate_bits(&em, &latent(&vals, 2)).unwrap().item() as f64;
        let parts: f64 = vals
            .iter()
            .map(|&v| rate_bits(&EntropyModel::new(1), &latent(&[v], 1)).unwrap().item() as f64)
            .sum();
        assert!((whole - parts).abs() < 1e-4);
    }

    #[test]
    fn bins_sum_to_at_most_one() {
        for b in [0.01, 0.3, 1.0, 7.5] {
            let s: f64 = (-400..=400).map(|k| bin_mass(k as f64 - 0.3, b).0).sum();
            assert!(s <= 1.0 + 1e-12 && s > 0.99, "{b}: {s}");
        }
    }

    #[test]
    fn wrong_channel_count() {
        let em = EntropyModel::new(3);
        assert!(rate_bits(&em, &latent(&[0.0, 0.0], 2)).is_err());
    }
}
