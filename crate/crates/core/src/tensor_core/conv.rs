//! Dense 2-D convolution through im2col and GEMM.

use super::geometry::{check_conv_shapes, ConvOpts};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unfold `[c, h, w]` into a `[c * k * k, ho * wo]` column matrix.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    o: &ConvOpts,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let k = o.kernel;
    let n = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * o.stride + ki * o.dilation) as isize - o.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    let x_off = (kj * o.dilation) as isize - o.padding as isize;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * o.stride) as isize + x_off;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[c, h, w]`.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    o: &ConvOpts,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let k = o.kernel;
    let n = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * o.stride + ki * o.dilation) as isize - o.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    let x_off = (kj * o.dilation) as isize - o.padding as isize;
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * o.stride) as isize + x_off;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out[o, n] = sum_r weight[o, r] * cols[r, n]` per group, plus bias.
pub(crate) fn grouped_matmul<T: Scalar>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cols: &[T],
    groups: usize,
    n: usize,
) -> Vec<T> {
    let out_c = weight.shape()[0];
    let r = weight.len() / out_c; // rows of cols per group
    let og = out_c / groups;
    let mut out = vec![T::zero(); out_c * n];
    for g in 0..groups {
        let a = &weight.data()[g * og * r..(g + 1) * og * r];
        let b = &cols[g * r * n..(g + 1) * r * n];
        let c = &mut out[g * og * n..(g + 1) * og * n];
        T::gemm(og, r, n, T::one(), a, (r as isize, 1), b, (n as isize, 1), T::zero(), c, (n as isize, 1));
    }
    if let Some(b) = bias {
        for (oc, &bv) in b.data().iter().enumerate() {
            for v in &mut out[oc * n..(oc + 1) * n] {
                *v += bv;
            }
        }
    }
    out
}

/// Gradients of [`grouped_matmul`]: `(d_weight, d_cols)`.
pub(crate) fn grouped_matmul_backward<T: Scalar>(
    weight: &Tensor<T>,
    cols: &[T],
    grad_out: &[T],
    groups: usize,
    n: usize,
    need_cols: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let out_c = weight.shape()[0];
    let r = weight.len() / out_c;
    let og = out_c / groups;
    let mut dw = Tensor::zeros(weight.shape());
    let mut dcols = need_cols.then(|| vec![T::zero(); groups * r * n]);
    for g in 0..groups {
        let dy = &grad_out[g * og * n..(g + 1) * og * n];
        let b = &cols[g * r * n..(g + 1) * r * n];
        let dwg = &mut dw.data_mut()[g * og * r..(g + 1) * og * r];
        // dW = dY * cols^T
        T::gemm(og, n, r, T::one(), dy, (n as isize, 1), b, (1, n as isize), T::zero(), dwg, (r as isize, 1));
        if let Some(dc) = dcols.as_mut() {
            let a = &weight.data()[g * og * r..(g + 1) * og * r];
            let dcg = &mut dc[g * r * n..(g + 1) * r * n];
            // dcols = W^T * dY
            T::gemm(r, og, n, T::one(), a, (1, r as isize), dy, (n as isize, 1), T::zero(), dcg, (n as isize, 1));
        }
    }
    (dw, dcols)
}

pub(crate) fn bias_grad<T: Scalar>(grad_out: &[T], out_c: usize, n: usize) -> Tensor<T> {
    let data = (0..out_c)
        .map(|oc| grad_out[oc * n..(oc + 1) * n].iter().copied().sum())
        .collect();
    Tensor::from_vec(&[out_c], data).expect("bias shape")
}

/// Standard 2-D convolution of a `[c, h, w]` map.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: &ConvOpts,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let (oc, ho, wo) = check_conv_shapes(input, weight, opts)?;
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(crate::Error::shape("conv2d", "bias", [oc], b.shape()));
        }
    }
    let n = ho * wo;
    let out = if opts.is_pointwise() {
        grouped_matmul(weight, bias, input.data(), opts.groups, n)
    } else {
        let cols = im2col(input.data(), (c, h, w), opts, (ho, wo));
        grouped_matmul(weight, bias, &cols, opts.groups, n)
    };
    Tensor::from_vec(&[oc, ho, wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    opts: &ConvOpts,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (c, h, w) = input.chw()?;
    let (oc, ho, wo) = check_conv_shapes(input, weight, opts)?;
    let n = ho * wo;
    let g = grad_out.data();
    let bias = bias_grad(g, oc, n);
    if opts.is_pointwise() {
        let (dw, dx) = grouped_matmul_backward(weight, input.data(), g, opts.groups, n, need_input);
        return Ok(ConvGrads {
            input: dx.map(|d| Tensor::from_vec(&[c, h, w], d)).transpose()?,
            weight: dw,
            bias,
        });
    }
    let cols = im2col(input.data(), (c, h, w), opts, (ho, wo));
    let (dw, dcols) = grouped_matmul_backward(weight, &cols, g, opts.groups, n, need_input);
    let dx = dcols
        .map(|dc| Tensor::from_vec(&[c, h, w], col2im(&dc, (c, h, w), opts, (ho, wo))))
        .transpose()?;
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias,
    })
}
