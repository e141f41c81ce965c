//! Modulated deformable convolution.
//!
//! For every output location `p` and kernel tap `k` the input is sampled at
//! `p * stride - padding + p_k * dilation + offset_k(p)` with bilinear
//! interpolation (zero padding), scaled by the tap mask `m_k(p)`, and the
//! resulting columns are contracted with the kernel weights.

use super::conv::{bias_grad, grouped_matmul, grouped_matmul_backward};
use super::geometry::{check_deform_shapes, ConvOpts, ConvSpec, OffsetField};
use super::sampling::Stencil;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-location sampling coordinates shared by the forward and backward passes.
struct SamplePlan<'a, T> {
    offsets: &'a [T],
    masks: &'a [T],
    opts: &'a ConvOpts,
    out_hw: (usize, usize),
}

impl<T: Scalar> SamplePlan<'_, T> {
    /// `(y, x, mask)` for deform group `g`, tap `k`, output index `p`.
    #[inline]
    fn coord(&self, g: usize, k: usize, p: usize) -> (T, T, T) {
        let (ho, wo) = self.out_hw;
        let n = ho * wo;
        let o = self.opts;
        let taps = o.taps();
        let (oy, ox) = (p / wo, p % wo);
        let (ki, kj) = (k / o.kernel, k % o.kernel);
        let base_y = (oy * o.stride + ki * o.dilation) as f64 - o.padding as f64;
        let base_x = (ox * o.stride + kj * o.dilation) as f64 - o.padding as f64;
        let dy = self.offsets[((g * taps + k) * 2) * n + p];
        let dx = self.offsets[((g * taps + k) * 2 + 1) * n + p];
        let m = self.masks[(g * taps + k) * n + p];
        (T::lit(base_y) + dy, T::lit(base_x) + dx, m)
    }
}

fn deform_columns<T: Scalar>(input: &Tensor<T>, plan: &SamplePlan<'_, T>) -> Vec<T> {
    let (c, h, w) = input.dims3();
    let o = plan.opts;
    let taps = o.taps();
    let n = plan.out_hw.0 * plan.out_hw.1;
    let cpg = c / o.deform_groups;
    let mut cols = vec![T::zero(); c * taps * n];
    for g in 0..o.deform_groups {
        for k in 0..taps {
            for p in 0..n {
                let (y, x, m) = plan.coord(g, k, p);
                let Some(s) = Stencil::new(h, w, y, x) else {
                    continue;
                };
                for ci in g * cpg..(g + 1) * cpg {
                    cols[(ci * taps + k) * n + p] = m * s.value(input.channel(ci));
                }
            }
        }
    }
    cols
}

/// Modulated deformable convolution of a `[c, h, w]` map.
///
/// `offsets` must have `deform_groups * 2 * K^2` channels and `masks`
/// `deform_groups * K^2`, both at the output resolution.
pub fn deform_conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>, field: &OffsetField<T>) -> Result<Tensor<T>> {
    deform_conv2d_raw(
        input,
        &spec.weight,
        spec.bias.as_ref(),
        &field.offsets,
        &field.masks,
        &spec.opts,
    )
}

pub(crate) fn deform_conv2d_raw<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    opts: &ConvOpts,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_deform_shapes(input, weight, offsets, masks, opts)?;
    let oc = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(crate::Error::shape("deform_conv2d", "bias", [oc], b.shape()));
        }
    }
    let plan = SamplePlan {
        offsets: offsets.data(),
        masks: masks.data(),
        opts,
        out_hw: (ho, wo),
    };
    let cols = deform_columns(input, &plan);
    let out = grouped_matmul(weight, bias, &cols, opts.groups, ho * wo);
    Tensor::from_vec(&[oc, ho, wo], out)
}

pub struct DeformGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub offsets: Option<Tensor<T>>,
    pub masks: Option<Tensor<T>>,
}

/// Which gradients [`deform_conv2d_backward`] should produce besides the weights.
#[derive(Clone, Copy, Debug)]
pub struct DeformNeeds {
    pub input: bool,
    pub offsets: bool,
    pub masks: bool,
}

pub fn deform_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    opts: &ConvOpts,
    grad_out: &Tensor<T>,
    needs: DeformNeeds,
) -> Result<DeformGrads<T>> {
    let (ho, wo) = check_deform_shapes(input, weight, offsets, masks, opts)?;
    let (c, h, w) = input.dims3();
    let n = ho * wo;
    let taps = opts.taps();
    let plan = SamplePlan {
        offsets: offsets.data(),
        masks: masks.data(),
        opts,
        out_hw: (ho, wo),
    };
    let cols = deform_columns(input, &plan);
    let need_cols = needs.input || needs.offsets || needs.masks;
    let (dw, dcols) = grouped_matmul_backward(weight, &cols, grad_out.data(), opts.groups, n, need_cols);
    let bias = bias_grad(grad_out.data(), weight.shape()[0], n);
    drop(cols);

    let mut dx = needs.input.then(|| Tensor::zeros(&[c, h, w]));
    let mut doff = needs.offsets.then(|| Tensor::zeros(offsets.shape()));
    let mut dmask = needs.masks.then(|| Tensor::zeros(masks.shape()));
    if let Some(dcols) = dcols {
        let cpg = c / opts.deform_groups;
        for g in 0..opts.deform_groups {
            for k in 0..taps {
                for p in 0..n {
                    let (y, x, m) = plan.coord(g, k, p);
                    let Some(s) = Stencil::new(h, w, y, x) else {
                        continue;
                    };
                    let (mut gy, mut gx, mut gm) = (T::zero(), T::zero(), T::zero());
                    for ci in g * cpg..(g + 1) * cpg {
                        let gc = dcols[(ci * taps + k) * n + p];
                        if gc == T::zero() {
                            continue;
                        }
                        let v = s.corners(input.channel(ci));
                        if dmask.is_some() {
                            gm += gc * (s.weight[0] * v[0] + s.weight[1] * v[1] + s.weight[2] * v[2] + s.weight[3] * v[3]);
                        }
                        let gcm = gc * m;
                        if doff.is_some() {
                            let (vy, vx) = s.coord_grad(v);
                            gy += gcm * vy;
                            gx += gcm * vx;
                        }
                        if let Some(dx) = dx.as_mut() {
                            let plane = &mut dx.data_mut()[ci * h * w..(ci + 1) * h * w];
                            for i in 0..4 {
                                if s.valid[i] {
                                    plane[s.idx[i]] += gcm * s.weight[i];
                                }
                            }
                        }
                    }
                    if let Some(d) = doff.as_mut() {
                        d.data_mut()[((g * taps + k) * 2) * n + p] = gy;
                        d.data_mut()[((g * taps + k) * 2 + 1) * n + p] = gx;
                    }
                    if let Some(d) = dmask.as_mut() {
                        d.data_mut()[(g * taps + k) * n + p] = gm;
                    }
                }
            }
        }
    }
    Ok(DeformGrads {
        input: dx,
        weight: dw,
        bias,
        offsets: doff,
        masks: dmask,
    })
}
