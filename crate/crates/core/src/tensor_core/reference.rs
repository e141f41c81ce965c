//! Direct scalar-loop evaluation of modulated deformable convolution.
//!
//! Intended for small shapes only. Shares nothing with the im2col path in
//! [`super::deform`] except the [`bilinear_sample`] contract.

use super::geometry::{check_deform_shapes, ConvSpec, OffsetField};
use super::sampling::bilinear_sample;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn deform_conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    field: &OffsetField<T>,
) -> Result<Tensor<T>> {
    let o = &spec.opts;
    let (ho, wo) = check_deform_shapes(input, &spec.weight, &field.offsets, &field.masks, o)?;
    let (c, h, w) = input.chw()?;
    let oc = spec.out_channels;
    let k = o.kernel;
    let cin_g = c / o.groups;
    let cout_g = oc / o.groups;
    let ch_per_dg = c / o.deform_groups;
    let mut out = Tensor::zeros(&[oc, ho, wo]);
    for f in 0..oc {
        let group = f / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = spec.bias.as_ref().map_or(T::zero(), |b| b.data()[f]);
                for cl in 0..cin_g {
                    let ci = group * cin_g + cl;
                    let dg = ci / ch_per_dg;
                    for ki in 0..k {
                        for kj in 0..k {
                            let tap = ki * k + kj;
                            let dy = field.offsets.at3(dg * 2 * k * k + 2 * tap, oy, ox);
                            let dx = field.offsets.at3(dg * 2 * k * k + 2 * tap + 1, oy, ox);
                            let m = field.masks.at3(dg * k * k + tap, oy, ox);
                            let y = T::lit((oy * o.stride + ki * o.dilation) as f64 - o.padding as f64) + dy;
                            let x = T::lit((ox * o.stride + kj * o.dilation) as f64 - o.padding as f64) + dx;
                            let wv = spec.weight.data()[((f * cin_g + cl) * k + ki) * k + kj];
                            acc += wv * m * bilinear_sample(input.channel(ci), h, w, y, x);
                        }
                    }
                }
                out.data_mut()[(f * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Ok(out)
}
