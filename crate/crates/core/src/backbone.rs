//! Per-frame feature pyramid: three levels of (3x3 stride 1, 3x3 stride 2),
//! shared across every frame of a clip.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Frame, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};
use crate::tensor_core::ConvOpts;

/// Total spatial reduction of the pyramid.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub levels: usize,
    pub hidden_filters: usize,
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            hidden_filters: 48,
            out_channels: 64,
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub layers: Vec<Conv2d>,
}

impl Backbone {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        if cfg.levels == 0 || cfg.hidden_filters == 0 || cfg.out_channels == 0 {
            return Err(Error::InvalidConfig(format!("degenerate backbone {cfg:?}")));
        }
        let mut s = b.scope("backbone");
        let mut layers = Vec::with_capacity(2 * cfg.levels);
        let mut cin = 1;
        for level in 0..cfg.levels {
            let last = level + 1 == cfg.levels;
            let cout = if last { cfg.out_channels } else { cfg.hidden_filters };
            layers.push(s.conv(&format!("level{level}/conv"), cin, cfg.hidden_filters, ConvOpts::same(3), true));
            layers.push(s.conv(
                &format!("level{level}/down"),
                cfg.hidden_filters,
                cout,
                ConvOpts::same(3).with_stride(2),
                true,
            ));
            cin = cout;
        }
        Ok(Self { layers })
    }

    pub fn stride(&self) -> usize {
        1 << (self.layers.len() / 2)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// `x` is a `1 x H x W` frame.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).chw()?;
        if c != 1 {
            return Err(Error::shape("backbone", "input channels", 1, c));
        }
        let f = self.stride();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::ResizeRequired {
                height: h,
                width: w,
                factor: f,
            });
        }
        self.layers.iter().try_fold(x, |x, layer| layer.forward_act(g, x))
    }

    /// Features of every frame, in clip order.
    pub fn extract_features<T: Scalar>(&self, store: &ParamStore<T>, clip: &VideoClip) -> Result<Vec<FeatureMap<T>>> {
        clip.frames
            .iter()
            .map(|f| {
                let mut g = Graph::inference(store);
                let x = g.input(frame_tensor(f));
                let y = self.forward(&mut g, x)?;
                Ok(g.value(y).clone())
            })
            .collect()
    }
}

/// `1 x h x w` network input: the frame standardised to zero mean and unit
/// variance. Flat frames map to zero.
pub fn frame_tensor<T: Scalar>(frame: &Frame) -> Tensor<T> {
    let n = frame.pixels.len().max(1) as f64;
    let mean = frame.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
    let var = frame.pixels.iter().map(|&p| (f64::from(p) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-3);
    Tensor::from_vec(
        &[1, frame.height, frame.width],
        frame.pixels.iter().map(|&p| T::lit((f64::from(p) - mean) * inv)).collect(),
    )
    .expect("frame dimensions")
}
