//! Generalized divisive normalization and its inverse.
//!
//!   forward:  y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)
//!   inverse:  y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j^2)
//!
//! `beta` and `gamma` arrive already positive; the codec layer derives them
//! from unconstrained storage. The normalizer for channel `i` starts at
//! `beta_i` and adds the `j` terms in increasing `j`, so a channel that is
//! exactly zero adds exact zeros and can be sliced out without changing any
//! other channel's value.

use super::Tensor;
use crate::error::{Error, Result};

pub fn gdn(input: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    const OP: &str = "gdn";
    let [batch, c, h, w] = match *input.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::dim(OP, format!("input must be 4-D, got {:?}", input.shape()))),
    };
    if beta.shape() != [c] {
        return Err(Error::dim(OP, format!("beta shape {:?}, expected [{c}]", beta.shape())));
    }
    if gamma.shape() != [c, c] {
        return Err(Error::dim(
            OP,
            format!("gamma shape {:?}, expected [{c}, {c}]", gamma.shape()),
        ));
    }
    if input.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: OP });
    }

    let hw = h * w;
    let x = input.data();
    let bd = beta.data();
    let gd = gamma.data();
    // sqrt of the normalizer per element, kept for the backward pass
    let mut root = vec![0.0f32; x.len()];
    let mut sq = vec![0.0f32; c * hw];
    for b in 0..batch {
        let xb = &x[b * c * hw..(b + 1) * c * hw];
        for (s, v) in sq.iter_mut().zip(xb) {
            *s = v * v;
        }
        let rb = &mut root[b * c * hw..(b + 1) * c * hw];
        for i in 0..c {
            let norm = &mut rb[i * hw..(i + 1) * hw];
            norm.iter_mut().for_each(|n| *n = bd[i]);
            for j in 0..c {
                let gij = gd[i * c + j];
                let sj = &sq[j * hw..(j + 1) * hw];
                for (n, s) in norm.iter_mut().zip(sj) {
                    *n += gij * s;
                }
            }
            norm.iter_mut().for_each(|n| *n = n.sqrt());
        }
    }
    let out: Vec<f32> = if inverse {
        x.iter().zip(&root).map(|(v, r)| v * r).collect()
    } else {
        x.iter().zip(&root).map(|(v, r)| v / r).collect()
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: OP });
    }

    let (xi, gi) = (input.clone(), gamma.clone());
    Ok(Tensor::from_op(
        input.shape().to_vec(),
        out,
        vec![input.clone(), beta.clone(), gamma.clone()],
        Box::new(move |grad| {
            let x = xi.data();
            let gd = gi.data();
            let mut gx = vec![0.0f32; x.len()];
            let mut gbeta = vec![0.0f32; c];
            let mut ggamma = vec![0.0f32; c * c];
            // coef_i = dL/dnorm_i per element
            let mut coef = vec![0.0f32; c * hw];
            for b in 0..batch {
                let base = b * c * hw;
                for e in 0..c * hw {
                    let (g, v, r) = (grad[base + e], x[base + e], root[base + e]);
                    if inverse {
                        coef[e] = g * v / (2.0 * r);
                        gx[base + e] = g * r;
                    } else {
                        coef[e] = -g * v / (2.0 * r * r * r);
                        gx[base + e] = g / r;
                    }
                }
                for i in 0..c {
                    let ci = &coef[i * hw..(i + 1) * hw];
                    gbeta[i] += ci.iter().sum::<f32>();
                    for k in 0..c {
                        let xk = &x[base + k * hw..base + (k + 1) * hw];
                        let gik = gd[i * c + k];
                        let mut acc = 0.0f32;
                        for p in 0..hw {
                            acc += ci[p] * xk[p] * xk[p];
                            gx[base + k * hw + p] += 2.0 * xk[p] * ci[p] * gik;
                        }
                        ggamma[i * c + k] += acc;
                    }
                }
            }
            vec![Some(gx), Some(gbeta), Some(ggamma)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn unit_denominator_is_identity() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.3, -1.2, 4.0, 0.0]).unwrap();
        let y = gdn(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1, 1]), false).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn closed_form_single_channel() {
        let floor = 1e-6f32;
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = gdn(&x, &Tensor::full(&[1], floor), &Tensor::full(&[1, 1], 1.0), false).unwrap();
        let expect = 2.0 / (floor as f64 + 4.0).sqrt();
        assert!((y.item() as f64 - expect).abs() < 1e-6);
        assert!((y.item() - 0.999_999_9).abs() < 1e-7);
    }

    #[test]
    fn inverse_round_trip_near_identity() {
        // IGDN(GDN(x)) = x * s(y) / s(x); with beta near 1 and small gamma the
        // ratio differs from 1 by O((sum_j gamma_ij x_j^2)^2), far below 1e-4
        let mut rng = RngState::new(5);
        let c = 4;
        let x = Tensor::new(&[2, c, 3, 3], (0..72).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
        let beta = Tensor::new(&[c], (0..c).map(|_| rng.uniform_in(0.5, 1.5)).collect()).unwrap();
        let gamma =
            Tensor::new(&[c, c], (0..c * c).map(|_| rng.uniform_in(0.0, 1e-3)).collect()).unwrap();
        let y = gdn(&x, &beta, &gamma, false).unwrap();
        let back = gdn(&y, &beta, &gamma, true).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![f32::NAN]).unwrap();
        let r = gdn(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1, 1]), false);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn zero_in_zero_out() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        let y = gdn(&x, &Tensor::full(&[3], 1.0), &Tensor::full(&[3, 3], 0.1), true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
