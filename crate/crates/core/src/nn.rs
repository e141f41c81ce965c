//! Named parameter storage and the trainable layers built on [`Graph`].
//!
//! Parameters are addressed by slash-separated paths of the form
//! `module/submodule/layer/{weight,bias}`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensor_core::{ChannelAttentionParams, ConvOpts, ConvSpec};

/// Negative slope of every leaky-rectified activation.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Learning-rate multiplier for offset-predicting layers; offsets trained at
/// the full rate drift beyond the feature map within a few dozen steps.
pub const OFFSET_LR_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Multiplier on the optimiser's learning rate.
    pub lr_scale: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add_scaled(name, value, 1.0)
    }

    pub fn add_scaled(&mut self, name: impl Into<String>, value: Tensor<T>, lr_scale: f64) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, lr_scale });
        ParamId(self.params.len() - 1)
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.params[id.0].lr_scale
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose path starts with `prefix`.
    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("param set", p.name.clone(), p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

/// Creates layers under a path prefix, drawing initial weights from a seeded RNG.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }

    /// He-uniform weights (leaky-ReLU gain), zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, opts: ConvOpts, bias: bool) -> Conv2d {
        self.conv_gain(name, cin, cout, opts, bias, 1.0)
    }

    /// As [`Self::conv`] with the weight range multiplied by `gain`.
    pub fn conv_gain(&mut self, name: &str, cin: usize, cout: usize, opts: ConvOpts, bias: bool, gain: f64) -> Conv2d {
        let fan_in = cin / opts.groups * opts.taps();
        let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
        let shape = [cout, cin / opts.groups, opts.kernel, opts.kernel];
        let w = Tensor::uniform(&shape, -bound, bound, self.rng);
        self.conv_with(name, cin, cout, opts, w, bias.then(|| Tensor::zeros(&[cout])))
    }

    /// Zero weights and a constant bias.
    pub fn conv_zeroed(&mut self, name: &str, cin: usize, cout: usize, opts: ConvOpts, bias: f64) -> Conv2d {
        let shape = [cout, cin / opts.groups, opts.kernel, opts.kernel];
        self.conv_with(name, cin, cout, opts, Tensor::zeros(&shape), Some(Tensor::full(&[cout], T::lit(bias))))
    }

    /// Zero-initialised layer predicting sampling offsets (and masks). It
    /// trains at [`OFFSET_LR_SCALE`] times the base rate.
    pub fn offset_conv(&mut self, name: &str, cin: usize, cout: usize, opts: ConvOpts) -> Conv2d {
        let conv = self.conv_zeroed(name, cin, cout, opts, 0.0);
        for id in [Some(conv.weight), conv.bias].into_iter().flatten() {
            self.store.params[id.0].lr_scale = OFFSET_LR_SCALE;
        }
        conv
    }

    pub fn conv_with(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        opts: ConvOpts,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Conv2d {
        opts.validate(cin, cout).expect("layer geometry");
        let weight = self.store.add(self.path(&format!("{name}/weight")), weight);
        let bias = bias.map(|b| self.store.add(self.path(&format!("{name}/bias")), b));
        Conv2d {
            weight,
            bias,
            opts,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOpts,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.opts)
    }

    /// Convolution followed by the leaky-rectified activation.
    pub fn forward_act<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.leaky_relu(y, T::lit(LEAKY_SLOPE)))
    }

    /// Deformable application of this layer's kernel with externally predicted offsets and masks.
    pub fn forward_deform<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, offsets: Var, masks: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.deform_conv2d(x, offsets, masks, w, b, self.opts)
    }

    pub fn spec<T: Scalar>(&self, store: &ParamStore<T>) -> ConvSpec<T> {
        ConvSpec::new(
            self.opts,
            store.value(self.weight).clone(),
            self.bias.map(|b| store.value(b).clone()),
        )
        .expect("layer geometry")
    }

    pub fn num_scalars<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).len() + self.bias.map_or(0, |b| store.value(b).len())
    }
}

/// GAP, 1x1 reduce, ReLU, 1x1 expand, sigmoid gate over channels.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "channel attention reduction {reduction} does not divide {channels}"
            )));
        }
        let mut s = b.scope(name);
        let hidden = channels / reduction;
        Ok(Self {
            reduce: s.conv("reduce", channels, hidden, ConvOpts::same(1), true),
            expand: s.conv("expand", hidden, channels, ConvOpts::same(1), true),
        })
    }

    pub fn gate<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let h = self.reduce.forward(g, pooled)?;
        let h = g.relu(h);
        let logits = self.expand.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gate = self.gate(g, x)?;
        g.mul(x, gate)
    }

    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> ChannelAttentionParams<T> {
        ChannelAttentionParams {
            reduce: self.reduce.spec(store),
            expand: self.expand.spec(store),
        }
    }
}

/// Spatial gate from channel mean and max through a 7x7 convolution.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

pub const SPATIAL_ATTENTION_KERNEL: usize = 7;

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str) -> Self {
        let mut s = b.scope(name);
        Self {
            conv: s.conv("conv", 2, 1, ConvOpts::same(SPATIAL_ATTENTION_KERNEL), false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x)?;
        let max = g.channel_max(x)?;
        let desc = g.concat(&[mean, max])?;
        let logits = self.conv.forward(g, desc)?;
        let gate = g.sigmoid(logits);
        g.mul(x, gate)
    }
}
