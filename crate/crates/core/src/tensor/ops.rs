//! Elementwise arithmetic and full reductions.

use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = g.iter().zip(bc.data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(ac.data()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn mul_scalar(a: &Tensor, k: f32) -> Tensor {
    let data = a.data().iter().map(|x| x * k).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|v| v * k).collect())]),
    )
}

pub fn add_scalar(a: &Tensor, k: f32) -> Tensor {
    let data = a.data().iter().map(|x| x + k).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
    )
}

pub fn square(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|x| x * x).collect();
    let ac = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            vec![Some(
                g.iter().zip(ac.data()).map(|(g, x)| 2.0 * x * g).collect(),
            )]
        }),
    )
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| stable_sigmoid(x)).collect();
    let out = data.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            vec![Some(
                g.iter().zip(&out).map(|(g, s)| g * s * (1.0 - s)).collect(),
            )]
        }),
    )
}

/// Sum of all elements as a scalar tensor.
pub fn sum(a: &Tensor) -> Tensor {
    let total = a.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
    let n = a.numel();
    Tensor::from_op(
        Vec::new(),
        vec![total],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0]; n])]),
    )
}

/// Mean of all elements as a scalar tensor.
pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel();
    mul_scalar(&sum(a), 1.0 / n as f32)
}

pub(crate) fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic sigmoid, written so it underflows to zero
/// instead of producing NaN for large |x|.
pub(crate) fn sigmoid_slope(x: f32) -> f32 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}
