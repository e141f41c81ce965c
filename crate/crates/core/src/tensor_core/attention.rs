//! Channel and spatial attention gates evaluated directly on tensors.
//!
//! The trainable versions live in [`crate::nn`]; these are the inference-only
//! forms and the reference they are checked against.

use super::conv::conv2d;
use super::geometry::ConvSpec;
use super::pool::global_avg_pool;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Squeeze-excitation style gate: GAP, 1x1 reduce, ReLU, 1x1 expand, sigmoid.
#[derive(Clone, Debug)]
pub struct ChannelAttentionParams<T> {
    pub reduce: ConvSpec<T>,
    pub expand: ConvSpec<T>,
}

impl<T: Scalar> ChannelAttentionParams<T> {
    pub fn reduction(&self) -> usize {
        self.reduce.in_channels / self.reduce.out_channels
    }
}

/// Per-channel gate values in `(0, 1)`.
pub fn channel_gate<T: Scalar>(input: &Tensor<T>, p: &ChannelAttentionParams<T>) -> Result<Vec<T>> {
    let (c, _, _) = input.chw()?;
    let reduction = p.reduction();
    if reduction == 0 || c % reduction != 0 || p.reduce.in_channels != c {
        return Err(Error::InvalidConfig(format!(
            "channel attention: reduction {reduction} does not divide {c} channels"
        )));
    }
    let pooled = Tensor::from_vec(&[c, 1, 1], global_avg_pool(input)?)?;
    let hidden = conv2d(&pooled, &p.reduce.weight, p.reduce.bias.as_ref(), &p.reduce.opts)?
        .map(|v| v.max(T::zero()));
    let logits = conv2d(&hidden, &p.expand.weight, p.expand.bias.as_ref(), &p.expand.opts)?;
    Ok(logits.data().iter().map(|&v| sigmoid(v)).collect())
}

/// `input * sigmoid(MLP(GAP(input)))`, broadcast over space.
pub fn channel_attention<T: Scalar>(input: &Tensor<T>, p: &ChannelAttentionParams<T>) -> Result<Tensor<T>> {
    let gate = channel_gate(input, p)?;
    let (c, h, w) = input.chw()?;
    let mut out = input.clone();
    for ci in 0..c {
        for v in &mut out.data_mut()[ci * h * w..(ci + 1) * h * w] {
            *v *= gate[ci];
        }
    }
    Ok(out)
}

/// Channel-wise mean and max stacked as a `[2, h, w]` descriptor.
pub fn mean_max_descriptor<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let n = h * w;
    let mut d = vec![T::zero(); 2 * n];
    let inv = T::lit(1.0 / c as f64);
    for p in 0..n {
        let mut sum = T::zero();
        let mut max = T::neg_infinity();
        for ci in 0..c {
            let v = input.data()[ci * n + p];
            sum += v;
            max = max.max(v);
        }
        d[p] = sum * inv;
        d[n + p] = max;
    }
    Tensor::from_vec(&[2, h, w], d)
}

/// Spatial gate map `[1, h, w]` with values in `(0, 1)`.
pub fn spatial_gate<T: Scalar>(input: &Tensor<T>, conv: &ConvSpec<T>) -> Result<Tensor<T>> {
    let desc = mean_max_descriptor(input)?;
    Ok(conv2d(&desc, &conv.weight, conv.bias.as_ref(), &conv.opts)?.map(sigmoid))
}

/// `input * sigmoid(conv([mean_c; max_c]))`, broadcast over channels.
pub fn spatial_attention<T: Scalar>(input: &Tensor<T>, conv: &ConvSpec<T>) -> Result<Tensor<T>> {
    let gate = spatial_gate(input, conv)?;
    let (c, h, w) = input.chw()?;
    let n = h * w;
    let mut out = input.clone();
    for ci in 0..c {
        for (v, &g) in out.data_mut()[ci * n..(ci + 1) * n].iter_mut().zip(gate.data()) {
            *v *= g;
        }
    }
    Ok(out)
}
