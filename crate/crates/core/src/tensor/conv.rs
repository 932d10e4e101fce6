//! Strided 2-D convolution (cross-correlation) and its transpose.
//!
//! Both directions share one picture: a "small" grid (conv output, deconv
//! input) and a "large" grid (conv input, deconv output), linked by
//! `large = small * stride + tap - padding`. All four kernels below walk
//! that relation for one `(kh, kw)` tap at a time.
//!
//! Every output element accumulates its terms in the order in-channel, then
//! kernel row, then kernel column, and the bias is added last. Removing an
//! in-channel whose activations are exactly zero therefore leaves every
//! remaining partial sum untouched, which is what makes pruned networks
//! bit-identical to their masked originals.

use std::ops::Range;

use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    small: (usize, usize),
    large: (usize, usize),
}

impl Geometry {
    fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }

    fn large_len(&self) -> usize {
        self.large.0 * self.large.1
    }

    /// Indices `i < small` with `0 <= i * stride + tap - pad < large`.
    fn taps(&self, small: usize, large: usize, tap: usize) -> Range<usize> {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let room = large as isize - off;
        let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
        let hi = hi.min(small as isize).max(0);
        let lo = lo.min(hi);
        lo as usize..hi as usize
    }

    fn rows(&self, kh: usize) -> Range<usize> {
        self.taps(self.small.0, self.large.0, kh)
    }

    fn cols(&self, kw: usize) -> Range<usize> {
        self.taps(self.small.1, self.large.1, kw)
    }

    fn large_index(&self, i: usize, tap: usize) -> usize {
        i * self.stride + tap - self.pad
    }
}

/// `small[i, j] += large[i*s + kh - p, j*s + kw - p] * w`
fn gather(small: &mut [f32], large: &[f32], w: f32, kh: usize, kw: usize, g: &Geometry) {
    let (_, sw) = g.small;
    let (_, lw) = g.large;
    let cols = g.cols(kw);
    if cols.is_empty() {
        return;
    }
    for i in g.rows(kh) {
        let li = g.large_index(i, kh);
        let srow = &mut small[i * sw..(i + 1) * sw];
        let lrow = &large[li * lw..(li + 1) * lw];
        for j in cols.clone() {
            srow[j] += lrow[j * g.stride + kw - g.pad] * w;
        }
    }
}

/// `large[i*s + kh - p, j*s + kw - p] += small[i, j] * w`
fn scatter(large: &mut [f32], small: &[f32], w: f32, kh: usize, kw: usize, g: &Geometry) {
    let (_, sw) = g.small;
    let (_, lw) = g.large;
    let cols = g.cols(kw);
    if cols.is_empty() {
        return;
    }
    for i in g.rows(kh) {
        let li = g.large_index(i, kh);
        let srow = &small[i * sw..(i + 1) * sw];
        let lrow = &mut large[li * lw..(li + 1) * lw];
        for j in cols.clone() {
            lrow[j * g.stride + kw - g.pad] += srow[j] * w;
        }
    }
}

/// `sum small[i, j] * large[i*s + kh - p, j*s + kw - p]`
fn dot(small: &[f32], large: &[f32], kh: usize, kw: usize, g: &Geometry) -> f32 {
    let (_, sw) = g.small;
    let (_, lw) = g.large;
    let cols = g.cols(kw);
    let mut acc = 0.0f32;
    if cols.is_empty() {
        return acc;
    }
    for i in g.rows(kh) {
        let li = g.large_index(i, kh);
        let srow = &small[i * sw..(i + 1) * sw];
        let lrow = &large[li * lw..(li + 1) * lw];
        for j in cols.clone() {
            acc += srow[j] * lrow[j * g.stride + kw - g.pad];
        }
    }
    acc
}

fn check_4d(op: &'static str, name: &str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(op, format!("{name} must be 4-D, got {:?}", t.shape()))),
    }
}

fn check_kernel_and_bias(
    op: &'static str,
    input_channels: usize,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(usize, usize)> {
    let [kin, kout, kh, kw] = check_4d(op, "kernel", kernel)?;
    if kh != kw {
        return Err(Error::dim(op, format!("kernel must be square, got {kh}x{kw}")));
    }
    if kin != input_channels {
        return Err(Error::dim(
            op,
            format!("input channel axis 1 has {input_channels} channels but kernel expects {kin}"),
        ));
    }
    if bias.shape() != [kout] {
        return Err(Error::dim(
            op,
            format!("bias shape {:?} does not match {kout} output channels", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::Geometry(format!("{op}: stride must be positive")));
    }
    Ok((kout, kh))
}

fn conv_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::Geometry(format!(
            "conv2d: padded extent {padded} smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Cross-correlation of `input [B, Cin, H, W]` with `kernel [Cout, Cin, k, k]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let [batch, cin, h, w] = check_4d(OP, "input", input)?;
    let [cout, kcin, kh, kw] = check_4d(OP, "kernel", kernel)?;
    if kh != kw {
        return Err(Error::dim(OP, format!("kernel must be square, got {kh}x{kw}")));
    }
    if kcin != cin {
        return Err(Error::dim(
            OP,
            format!("input axis 1 has {cin} channels but kernel axis 1 has {kcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(
            OP,
            format!("bias shape {:?} does not match kernel axis 0 ({cout})", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::Geometry("conv2d: stride must be positive".into()));
    }
    let k = kh;
    let g = Geometry {
        batch,
        cin,
        cout,
        k,
        stride,
        pad: padding,
        small: (conv_extent(h, k, stride, padding)?, conv_extent(w, k, stride, padding)?),
        large: (h, w),
    };

    let x = input.data();
    let kd = kernel.data();
    let bd = bias.data();
    let (sl, ll) = (g.small_len(), g.large_len());
    let mut out = vec![0.0f32; batch * cout * sl];
    for b in 0..batch {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * sl..(b * cout + co + 1) * sl];
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * ll..(b * cin + ci + 1) * ll];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = kd[((co * cin + ci) * k + kh) * k + kw];
                        gather(plane, src, wv, kh, kw, &g);
                    }
                }
            }
            let bv = bd[co];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }

    let (xi, ki) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(
        vec![batch, cout, g.small.0, g.small.1],
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        Box::new(move |grad| {
            let x = xi.data();
            let kd = ki.data();
            let mut gx = vec![0.0f32; numel(xi.shape())];
            let mut gk = vec![0.0f32; kd.len()];
            let mut gb = vec![0.0f32; g.cout];
            for b in 0..g.batch {
                for co in 0..g.cout {
                    let gp = &grad[(b * g.cout + co) * sl..(b * g.cout + co + 1) * sl];
                    gb[co] += gp.iter().sum::<f32>();
                    for ci in 0..g.cin {
                        let xoff = (b * g.cin + ci) * ll;
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let idx = ((co * g.cin + ci) * g.k + kh) * g.k + kw;
                                gk[idx] += dot(gp, &x[xoff..xoff + ll], kh, kw, &g);
                                scatter(&mut gx[xoff..xoff + ll], gp, kd[idx], kh, kw, &g);
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(gk), Some(gb)]
        }),
    ))
}

/// Transposed convolution of `input [B, Cin, H, W]` with
/// `kernel [Cin, Cout, k, k]`; output extent
/// `(H - 1) * stride - 2 * padding + k + output_padding`.
pub fn deconv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    const OP: &str = "deconv2d";
    let [batch, cin, h, w] = check_4d(OP, "input", input)?;
    let (cout, k) = check_kernel_and_bias(OP, cin, kernel, bias, stride)?;
    if output_padding >= stride.max(1) {
        return Err(Error::Geometry(format!(
            "deconv2d: output_padding {output_padding} must be smaller than stride {stride}"
        )));
    }
    let extent = |len: usize| -> Result<usize> {
        let full = (len.max(1) - 1) * stride + k + output_padding;
        if len == 0 || full <= 2 * padding {
            return Err(Error::Geometry(format!(
                "deconv2d: input extent {len} gives empty output"
            )));
        }
        Ok(full - 2 * padding)
    };
    let g = Geometry {
        batch,
        cin,
        cout,
        k,
        stride,
        pad: padding,
        small: (h, w),
        large: (extent(h)?, extent(w)?),
    };

    let x = input.data();
    let kd = kernel.data();
    let bd = bias.data();
    let (sl, ll) = (g.small_len(), g.large_len());
    let mut out = vec![0.0f32; batch * cout * ll];
    for b in 0..batch {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * ll..(b * cout + co + 1) * ll];
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * sl..(b * cin + ci + 1) * sl];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = kd[((ci * cout + co) * k + kh) * k + kw];
                        scatter(plane, src, wv, kh, kw, &g);
                    }
                }
            }
            let bv = bd[co];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }

    let (xi, ki) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(
        vec![batch, cout, g.large.0, g.large.1],
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        Box::new(move |grad| {
            let x = xi.data();
            let kd = ki.data();
            let mut gx = vec![0.0f32; numel(xi.shape())];
            let mut gk = vec![0.0f32; kd.len()];
            let mut gb = vec![0.0f32; g.cout];
            for b in 0..g.batch {
                for co in 0..g.cout {
                    let gp = &grad[(b * g.cout + co) * ll..(b * g.cout + co + 1) * ll];
                    gb[co] += gp.iter().sum::<f32>();
                    for ci in 0..g.cin {
                        let xoff = (b * g.cin + ci) * sl;
                        for kh in 0..g.k {
                            for kw in 0..g.k {
                                let idx = ((ci * g.cout + co) * g.k + kh) * g.k + kw;
                                gk[idx] += dot(&x[xoff..xoff + sl], gp, kh, kw, &g);
                                gather(&mut gx[xoff..xoff + sl], gp, kd[idx], kh, kw, &g);
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(gk), Some(gb)]
        }),
    ))
}
