//! Multi-frame fusion and refinement of the aligned features.
//!
//! The full path is attention-weighted adaptive fusion followed by a stack of
//! attention-guided two-scale deformable blocks. Ablation variants swap either
//! stage for plain convolutions, or replace everything with a single wide
//! fusion convolution.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, Conv2d, ParamBuilder, ParamStore, SpatialAttention};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};
use crate::tensor_core::ConvOpts;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub channels: usize,
    pub agdf_blocks: usize,
    pub deform_groups: usize,
    pub kernel: usize,
    pub attention_reduction: usize,
    /// Width of the hidden layer predicting the per-frame fusion weights.
    pub fusion_hidden: usize,
    /// Plain 3x3 layers used in place of the deformable blocks.
    pub plain_layers: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            agdf_blocks: 4,
            deform_groups: 32,
            kernel: 3,
            attention_reduction: 4,
            fusion_hidden: 16,
            plain_layers: 8,
        }
    }
}

/// Order the aligned features and the target temporally: target at slot `R`.
pub fn temporal_order(aligned: &[Var], target: Var) -> Result<Vec<Var>> {
    if aligned.len() % 2 != 0 {
        return Err(Error::shape("fusion", "aligned feature count (even)", aligned.len() + 1, aligned.len()));
    }
    let r = aligned.len() / 2;
    let mut v = aligned[..r].to_vec();
    v.push(target);
    v.extend_from_slice(&aligned[r..]);
    Ok(v)
}

fn check_frames<T: Scalar>(g: &Graph<'_, T>, frames: &[Var], count: usize, channels: usize) -> Result<()> {
    if frames.len() != count {
        return Err(Error::shape("fusion", "frame count", count, frames.len()));
    }
    let first = g.value(frames[0]).chw()?;
    if first.0 != channels {
        return Err(Error::shape("fusion", "feature channels", channels, first.0));
    }
    for &f in frames {
        let s = g.value(f).chw()?;
        if s != first {
            return Err(Error::shape("fusion", "feature shape", first, s));
        }
    }
    Ok(())
}

/// Per-frame scalar weights from a pooled summary of the stacked frames.
#[derive(Clone, Debug)]
pub struct AdaptiveFusion {
    pub frames: usize,
    pub channels: usize,
    pub squeeze: Conv2d,
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub bottleneck: Conv2d,
}

impl AdaptiveFusion {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, frames: usize, channels: usize, hidden: usize) -> Self {
        let mut s = b.scope("afs");
        let wide = frames * channels;
        Self {
            frames,
            channels,
            squeeze: s.conv("squeeze", wide, channels, ConvOpts::same(1), true),
            reduce: s.conv("reduce", channels, hidden, ConvOpts::same(1), true),
            expand: s.conv("expand", hidden, frames, ConvOpts::same(1), true),
            bottleneck: s.conv("bottleneck", wide, channels, ConvOpts::same(1), true),
        }
    }

    /// `frames x 1 x 1` weights in `(0, 1)`.
    pub fn weights<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: &[Var]) -> Result<Var> {
        check_frames(g, frames, self.frames, self.channels)?;
        let cat = g.concat(frames)?;
        let summary = self.squeeze.forward(g, cat)?;
        let pooled = g.global_avg_pool(summary)?;
        let h = self.reduce.forward_act(g, pooled)?;
        let logits = self.expand.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Each frame scaled by its weight.
    pub fn modulate<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: &[Var], weights: Var) -> Result<Vec<Var>> {
        check_frames(g, frames, self.frames, self.channels)?;
        frames
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let w = g.slice_channels(weights, i, 1)?;
                g.mul(f, w)
            })
            .collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: &[Var]) -> Result<Var> {
        let w = self.weights(g, frames)?;
        self.combine(g, frames, w)
    }

    /// Fusion with externally supplied per-frame weights.
    pub fn forward_with_weights<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: &[Var], weights: &[T]) -> Result<Var> {
        if weights.len() != self.frames {
            return Err(Error::shape("fusion", "weight count", self.frames, weights.len()));
        }
        let w = g.input(Tensor::from_vec(&[self.frames, 1, 1], weights.to_vec())?);
        self.combine(g, frames, w)
    }

    fn combine<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: &[Var], weights: Var) -> Result<Var> {
        let parts = self.modulate(g, frames, weights)?;
        let cat = g.concat(&parts)?;
        self.bottleneck.forward(g, cat)
    }
}

/// Attention-guided block predicting deformable offsets at full and half
/// resolution. It has no skip connection.
#[derive(Clone, Debug)]
pub struct AgdfBlock {
    pub reduce: Conv2d,
    pub spatial: SpatialAttention,
    pub channel: ChannelAttention,
    pub merge: Conv2d,
    /// Full-resolution offsets followed by mask logits; zero-initialised.
    pub fine_head: Conv2d,
    pub coarse_down: Conv2d,
    /// Half-resolution offsets only; zero-initialised.
    pub coarse_head: Conv2d,
    pub deform: Conv2d,
    pub expand: Conv2d,
    pub deform_groups: usize,
    pub kernel: usize,
}

impl AgdfBlock {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &RefineConfig) -> Result<Self> {
        let c = cfg.channels;
        let half = c / 2;
        let (d, k) = (cfg.deform_groups, cfg.kernel);
        if c % 2 != 0 || d == 0 || half % d != 0 || k % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "refinement block needs {d} deform groups to divide {half} channels and an odd kernel"
            )));
        }
        let taps = k * k;
        let mut s = b.scope(name);
        Ok(Self {
            reduce: s.conv("reduce", c, half, ConvOpts::same(3), true),
            spatial: SpatialAttention::new(&mut s, "spatial"),
            channel: ChannelAttention::new(&mut s, "channel", half, cfg.attention_reduction)?,
            // gains offset the 0.5 attention gates and initial masks
            merge: s.conv_gain("merge", c, half, ConvOpts::same(1), true, 2.0),
            fine_head: s.offset_conv("fine_head", half, 3 * d * taps, ConvOpts::same(3)),
            coarse_down: s.conv("coarse_down", half, half, ConvOpts::same(3).with_stride(2), true),
            coarse_head: s.offset_conv("coarse_head", half, 2 * d * taps, ConvOpts::same(3)),
            deform: s.conv_gain("deform", half, half, ConvOpts::same(k).with_deform_groups(d), true, 2.0),
            expand: s.conv("expand", half, c, ConvOpts::same(3), true),
            deform_groups: d,
            kernel: k,
        })
    }

    /// Attention-fused features feeding the offset heads and the deformable conv.
    pub fn guided<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).chw()?;
        if c != self.reduce.in_channels {
            return Err(Error::shape("refinement block", "input channels", self.reduce.in_channels, c));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("refinement block", "even spatial size", (h + h % 2, w + w % 2), (h, w)));
        }
        let r = self.reduce.forward_act(g, x)?;
        let sa = self.spatial.forward(g, r)?;
        let ca = self.channel.forward(g, r)?;
        let cat = g.concat(&[sa, ca])?;
        self.merge.forward(g, cat)
    }

    /// Fused `(offsets, masks)`: fine offsets plus twice the upsampled coarse offsets.
    pub fn offsets<T: Scalar>(&self, g: &mut Graph<'_, T>, guided: Var) -> Result<(Var, Var)> {
        let n_off = 2 * self.deform_groups * self.kernel * self.kernel;
        let fine = self.fine_head.forward(g, guided)?;
        let fine_off = g.slice_channels(fine, 0, n_off)?;
        let logits = g.slice_channels(fine, n_off, n_off / 2)?;
        let down = self.coarse_down.forward_act(g, guided)?;
        let coarse = self.coarse_head.forward(g, down)?;
        let up = g.upsample2x(coarse)?;
        let up = g.scale(up, T::lit(2.0));
        let offsets = g.add(fine_off, up)?;
        Ok((offsets, g.sigmoid(logits)))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let f = self.guided(g, x)?;
        let (offsets, masks) = self.offsets(g, f)?;
        let d = self.deform.forward_deform(g, f, offsets, masks)?;
        let d = g.leaky_relu(d, T::lit(crate::nn::LEAKY_SLOPE));
        self.expand.forward_act(g, d)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Adaptive(AdaptiveFusion),
    /// Concatenation followed by a 1x1 convolution.
    Concat(Conv2d),
}

#[derive(Clone, Debug)]
pub enum Refinement {
    Agdf(Vec<AgdfBlock>),
    Plain(Vec<Conv2d>),
}

/// Which refinement stages are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineStages {
    pub fr: bool,
    pub afs: bool,
    pub agdf: bool,
}

impl RefineStages {
    pub const FULL: Self = Self {
        fr: true,
        afs: true,
        agdf: true,
    };

    /// Without either stage the refinement collapses to the wide baseline fusion.
    pub fn is_baseline(&self) -> bool {
        !self.fr || (!self.afs && !self.agdf)
    }
}

#[derive(Clone, Debug)]
pub enum FeatureFusion {
    Refine { fusion: Fusion, refinement: Refinement },
    /// One 3x3 convolution with `frames * channels` filters over the stacked frames.
    Baseline(Conv2d),
}

impl FeatureFusion {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        cfg: &RefineConfig,
        frames: usize,
        stages: RefineStages,
    ) -> Result<Self> {
        let c = cfg.channels;
        let mut s = b.scope("refine");
        if stages.is_baseline() {
            let wide = frames * c;
            return Ok(Self::Baseline(s.conv("baseline", wide, wide, ConvOpts::same(3), true)));
        }
        let fusion = if stages.afs {
            Fusion::Adaptive(AdaptiveFusion::new(&mut s, frames, c, cfg.fusion_hidden))
        } else {
            Fusion::Concat(s.conv("concat_fuse", frames * c, c, ConvOpts::same(1), true))
        };
        let refinement = if stages.agdf {
            Refinement::Agdf(
                (0..cfg.agdf_blocks)
                    .map(|i| AgdfBlock::new(&mut s, &format!("agdf{i}"), cfg))
                    .collect::<Result<_>>()?,
            )
        } else {
            Refinement::Plain(
                (0..cfg.plain_layers)
                    .map(|i| s.conv(&format!("plain{i}"), c, c, ConvOpts::same(3), true))
                    .collect(),
            )
        };
        Ok(Self::Refine { fusion, refinement })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Baseline(conv) => conv.out_channels,
            Self::Refine { fusion, .. } => match fusion {
                Fusion::Adaptive(a) => a.channels,
                Fusion::Concat(conv) => conv.out_channels,
            },
        }
    }

    /// `frames` in temporal order, target at the centre.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, frames: &[Var]) -> Result<Var> {
        match self {
            Self::Baseline(conv) => {
                let cat = g.concat(frames)?;
                conv.forward_act(g, cat)
            }
            Self::Refine { fusion, refinement } => {
                let mut x = match fusion {
                    Fusion::Adaptive(a) => a.forward(g, frames)?,
                    Fusion::Concat(conv) => {
                        let cat = g.concat(frames)?;
                        conv.forward(g, cat)?
                    }
                };
                match refinement {
                    Refinement::Agdf(blocks) => {
                        for b in blocks {
                            x = b.forward(g, x)?;
                        }
                    }
                    Refinement::Plain(layers) => {
                        for l in layers {
                            x = l.forward_act(g, x)?;
                        }
                    }
                }
                Ok(x)
            }
        }
    }

    /// Value-level entry: aligned features plus the target.
    pub fn refine<T: Scalar>(&self, store: &ParamStore<T>, aligned: &[FeatureMap<T>], target: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::inference(store);
        let a: Vec<Var> = aligned.iter().map(|f| g.input(f.clone())).collect();
        let t = g.input(target.clone());
        let frames = temporal_order(&a, t)?;
        let y = self.forward(&mut g, &frames)?;
        Ok(g.value(y).clone())
    }
}
