use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel spatial mean of a `[c, h, w]` map.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Vec<T>> {
    let (c, h, w) = input.chw()?;
    let inv = T::lit(1.0 / (h * w) as f64);
    Ok((0..c)
        .map(|ci| input.channel(ci).iter().copied().sum::<T>() * inv)
        .collect())
}
