//! Quantizer and rate/distortion metrics.

use crate::abcm::Phase;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Peak pixel value on the scale MSE is reported in.
pub const PEAK: f64 = 255.0;

/// Training: add i.i.d. noise from `[-0.5, 0.5)`, identity gradient.
/// Evaluation: round half to even, detached.
pub fn quantize(y: &Tensor, phase: Phase, rng: &mut RngState) -> Tensor {
    match phase {
        Phase::Eval => Tensor::new(y.shape(), y.data().iter().map(|v| v.round_ties_even()).collect())
            .expect("same shape"),
        Phase::Train => {
            let data = y.data().iter().map(|v| v + (rng.uniform() - 0.5)).collect();
            Tensor::from_op(
                y.shape().to_vec(),
                data,
                vec![y.clone()],
                Box::new(|g| vec![Some(g.to_vec())]),
            )
        }
    }
}

/// Mean squared error on the 0-255 scale for images stored in `[0, 1]`.
pub fn distortion_mse(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim(
            "distortion_mse",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    let n = x.numel();
    let scale2 = PEAK * PEAK;
    let total: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    let mse = total * scale2 / n as f64;
    let (xc, hc) = (x.clone(), x_hat.clone());
    let k = (2.0 * scale2 / n as f64) as f32;
    Ok(Tensor::from_op(
        Vec::new(),
        vec![mse as f32],
        vec![x.clone(), x_hat.clone()],
        Box::new(move |g| {
            let s = g[0] * k;
            let gx: Vec<f32> = xc.data().iter().zip(hc.data()).map(|(a, b)| s * (a - b)).collect();
            let gh = gx.iter().map(|v| -v).collect();
            vec![Some(gx), Some(gh)]
        }),
    ))
}

/// `10 log10(255^2 / mse)`.
pub fn psnr(mse: f64) -> Result<f64> {
    if !(mse > 0.0) || !mse.is_finite() {
        return Err(Error::Domain(format!("psnr needs a positive finite mse, got {mse}")));
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Bits per pixel for a `[B, C, H, W]` image batch.
pub fn bpp(total_bits: f64, image_shape: &[usize]) -> Result<f64> {
    match *image_shape {
        [b, _, h, w] if b * h * w > 0 => Ok(total_bits / (b * h * w) as f64),
        _ => Err(Error::dim("bpp", format!("image shape {image_shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_rounding_ties_to_even() {
        let y = Tensor::new(&[5], vec![1.4, -2.5, 2.5, 0.5, -0.6]).unwrap();
        let q = quantize(&y, Phase::Eval, &mut RngState::new(0));
        assert_eq!(q.data(), &[1.0, -2.0, 2.0, 0.0, -1.0]);
    }

    #[test]
    fn train_noise_bounded_and_seeded() {
        let y = Tensor::new(&[1000], (0..1000).map(|i| i as f32 * 0.01).collect()).unwrap();
        let a = quantize(&y, Phase::Train, &mut RngState::new(9));
        let b = quantize(&y, Phase::Train, &mut RngState::new(9));
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().zip(y.data()).all(|(q, v)| (q - v).abs() < 0.5 + 1e-6));
    }

    #[test]
    fn mse_scale() {
        let a = Tensor::scalar(0.0);
        let b = Tensor::scalar(1.0);
        assert_eq!(distortion_mse(&a, &b).unwrap().item(), 65025.0);
        assert_eq!(distortion_mse(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn psnr_reference_points() {
        assert!(psnr(65025.0).unwrap().abs() < 1e-12);
        assert!((psnr(650.25).unwrap() - 20.0).abs() < 1e-12);
        assert!((psnr(1.0).unwrap() - 48.1308).abs() < 1e-4);
        assert!(matches!(psnr(0.0), Err(Error::Domain(_))));
        assert!(psnr(-1.0).is_err());
    }

    #[test]
    fn bpp_definition() {
        assert_eq!(bpp(65536.0, &[1, 3, 256, 256]).unwrap(), 1.0);
        assert_eq!(bpp(0.0, &[1, 3, 16, 16]).unwrap(), 0.0);
        let one = bpp(1000.0, &[1, 3, 32, 32]).unwrap();
        let two = bpp(1000.0, &[2, 3, 32, 32]).unwrap();
        assert_eq!(one, 2.0 * two);
    }
}
