use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer geometry of a (possibly deformable) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub deform_groups: usize,
}

impl ConvOpts {
    /// Stride-1 convolution padded to preserve spatial size.
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
            deform_groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Dilated stride-1 convolution, padded to preserve spatial size.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel / 2);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_deform_groups(mut self, deform_groups: usize) -> Self {
        self.deform_groups = deform_groups;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < span || pw < span || self.stride == 0 {
            return Err(Error::shape("conv", "input size", format!(">= {span}"), (h, w)));
        }
        Ok(((ph - span) / self.stride + 1, (pw - span) / self.stride + 1))
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn validate(&self, in_channels: usize, out_channels: usize) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidConfig(format!("degenerate conv geometry {self:?}")));
        }
        if self.groups == 0 || in_channels % self.groups != 0 || out_channels % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {}",
                self.groups
            )));
        }
        if self.deform_groups == 0 || in_channels % self.deform_groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "in_channels {in_channels} not divisible by deform_groups {}",
                self.deform_groups
            )));
        }
        Ok(())
    }
}

/// Convolution geometry together with its parameters.
#[derive(Clone, Debug)]
pub struct ConvSpec<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub opts: ConvOpts,
    /// `[out, in / groups, k, k]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(opts: ConvOpts, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let (out_channels, in_per_group, kh, kw) = match weight.shape() {
            &[o, i, kh, kw] => (o, i, kh, kw),
            s => return Err(Error::shape("conv spec", "weight rank", 4, s.len())),
        };
        if kh != opts.kernel || kw != opts.kernel {
            return Err(Error::shape("conv spec", "kernel", opts.kernel, (kh, kw)));
        }
        let in_channels = in_per_group * opts.groups;
        opts.validate(in_channels, out_channels)?;
        if let Some(b) = &bias {
            if b.shape() != [out_channels] {
                return Err(Error::shape("conv spec", "bias", [out_channels], b.shape()));
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            opts,
            weight,
            bias,
        })
    }
}

/// Deformable sampling parameters for one feature map.
///
/// Offsets have `deform_groups * 2 * K^2` channels. Within each deform group the
/// kernel taps are in row-major order and each tap stores `(dy, dx)`
/// interleaved, so channel `g * 2K^2 + 2k` is the vertical displacement of tap
/// `k` and `g * 2K^2 + 2k + 1` the horizontal one. Masks have
/// `deform_groups * K^2` channels, channel `g * K^2 + k`, holding
/// post-sigmoid values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct OffsetField<T> {
    pub offsets: Tensor<T>,
    pub masks: Tensor<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn new(offsets: Tensor<T>, masks: Tensor<T>) -> Result<Self> {
        let (oc, oh, ow) = offsets.chw()?;
        let (mc, mh, mw) = masks.chw()?;
        if (oh, ow) != (mh, mw) {
            return Err(Error::shape("offset field", "spatial dims", (oh, ow), (mh, mw)));
        }
        if oc != 2 * mc {
            return Err(Error::shape("offset field", "offset channels", 2 * mc, oc));
        }
        if masks
            .data()
            .iter()
            .any(|&m| !(m >= T::zero() && m <= T::one()))
        {
            return Err(Error::InvalidConfig("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { offsets, masks })
    }

    /// Zero offsets with unit masks: the field that reduces deformable to plain convolution.
    pub fn identity(deform_groups: usize, kernel: usize, h: usize, w: usize) -> Self {
        let taps = kernel * kernel;
        Self {
            offsets: Tensor::zeros(&[deform_groups * 2 * taps, h, w]),
            masks: Tensor::full(&[deform_groups * taps, h, w], T::one()),
        }
    }

    pub fn deform_groups(&self, kernel: usize) -> usize {
        self.masks.shape()[0] / (kernel * kernel)
    }
}

/// Validate a deformable convolution call and return the output spatial size.
pub(crate) fn check_deform_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    offsets: &Tensor<T>,
    masks: &Tensor<T>,
    opts: &ConvOpts,
) -> Result<(usize, usize)> {
    let (c, _, _) = input.chw()?;
    let (_, ho, wo) = check_conv_shapes(input, weight, opts)?;
    let d = opts.deform_groups;
    if d == 0 || c % d != 0 {
        return Err(Error::shape("deform_conv2d", "deform groups", format!("divisor of {c}"), d));
    }
    let taps = opts.taps();
    let (oc, oh, ow) = offsets.chw()?;
    let (mc, mh, mw) = masks.chw()?;
    if oc != d * 2 * taps {
        return Err(Error::shape("deform_conv2d", "offset channels", d * 2 * taps, oc));
    }
    if mc != d * taps {
        return Err(Error::shape("deform_conv2d", "mask channels", d * taps, mc));
    }
    if (oh, ow) != (ho, wo) {
        return Err(Error::shape("deform_conv2d", "offset height/width", (ho, wo), (oh, ow)));
    }
    if (mh, mw) != (ho, wo) {
        return Err(Error::shape("deform_conv2d", "mask height/width", (ho, wo), (mh, mw)));
    }
    Ok((ho, wo))
}

/// Validate a convolution call and return `(out_channels, out_h, out_w)`.
pub(crate) fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    opts: &ConvOpts,
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    let (o, ipg, kh, kw) = match weight.shape() {
        &[o, i, kh, kw] => (o, i, kh, kw),
        s => return Err(Error::shape("conv2d", "weight rank", 4, s.len())),
    };
    if kh != opts.kernel || kw != opts.kernel {
        return Err(Error::shape("conv2d", "kernel size", opts.kernel, (kh, kw)));
    }
    if opts.groups == 0 || c % opts.groups != 0 || o % opts.groups != 0 {
        return Err(Error::shape("conv2d", "groups", opts.groups, (c, o)));
    }
    if ipg * opts.groups != c {
        return Err(Error::shape("conv2d", "input channels", ipg * opts.groups, c));
    }
    let (ho, wo) = opts.output_size(h, w)?;
    Ok((o, ho, wo))
}
