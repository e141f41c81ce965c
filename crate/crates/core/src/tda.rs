//! Temporal deformable alignment: predict sampling offsets and modulation
//! masks from a (target, adjacent) feature pair and warp the adjacent feature
//! onto the target grid.
//!
//! Offsets are displacements applied to the adjacent feature's sampling grid:
//! content shifted by `+d` relative to the target is recovered with offsets of
//! about `+d`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, Conv2d, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};
use crate::tensor_core::{ConvOpts, OffsetField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdaConfig {
    pub channels: usize,
    pub dcaf_blocks: usize,
    pub deform_groups: usize,
    pub kernel: usize,
    pub residual_scale: f64,
    pub attention_reduction: usize,
}

impl Default for TdaConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            dcaf_blocks: 4,
            deform_groups: 8,
            kernel: 3,
            residual_scale: 0.2,
            attention_reduction: 4,
        }
    }
}

impl TdaConfig {
    pub fn offset_channels(&self) -> usize {
        2 * self.deform_groups * self.kernel * self.kernel
    }

    pub fn mask_channels(&self) -> usize {
        self.deform_groups * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || c % 2 != 0 || self.deform_groups == 0 || c % self.deform_groups != 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "alignment needs even channels divisible by the deform groups and an odd kernel, got {self:?}"
            )));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return Err(Error::InvalidConfig(format!("residual scale {} outside (0, 1]", self.residual_scale)));
        }
        Ok(())
    }
}

/// Dilated-convolution block with hierarchical branch accumulation, channel
/// attention and a scaled residual.
#[derive(Clone, Debug)]
pub struct DcafBlock {
    pub squeeze: Conv2d,
    /// Dilations 1, 2, 3, 4.
    pub branches: Vec<Conv2d>,
    pub attention: ChannelAttention,
    pub project: Conv2d,
    pub residual_scale: f64,
}

pub const DCAF_BRANCHES: usize = 4;

impl DcafBlock {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, residual_scale: f64, reduction: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let half = channels / 2;
        let squeeze = s.conv("squeeze", channels, half, ConvOpts::same(3), true);
        let branches = (1..=DCAF_BRANCHES)
            .map(|d| s.conv(&format!("dilated{d}"), half, half, ConvOpts::same(3).with_dilation(d), true))
            .collect();
        let wide = DCAF_BRANCHES * half + channels;
        let attention = ChannelAttention::new(&mut s, "attention", wide, reduction)?;
        let project = s.conv("project", wide, channels, ConvOpts::same(1), true);
        Ok(Self {
            squeeze,
            branches,
            attention,
            project,
            residual_scale,
        })
    }

    /// Hierarchically accumulated dilated-branch outputs, before attention.
    pub fn accumulated<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let (c, _, _) = g.value(x).chw()?;
        if c != self.squeeze.in_channels {
            return Err(Error::shape("dcaf", "input channels", self.squeeze.in_channels, c));
        }
        let s = self.squeeze.forward_act(g, x)?;
        let mut parts: Vec<Var> = Vec::with_capacity(DCAF_BRANCHES);
        for conv in &self.branches {
            let y = conv.forward_act(g, s)?;
            let a = match parts.last() {
                Some(&prev) => g.add(y, prev)?,
                None => y,
            };
            parts.push(a);
        }
        Ok(parts)
    }

    /// Residual branch before scaling.
    pub fn branch<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut parts = self.accumulated(g, x)?;
        parts.push(x);
        let cat = g.concat(&parts)?;
        let att = self.attention.forward(g, cat)?;
        self.project.forward(g, att)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let r = self.branch(g, x)?;
        let r = g.scale(r, T::lit(self.residual_scale));
        g.add(x, r)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::inference(store);
        let v = g.input(x.clone());
        let y = self.forward(&mut g, v)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Tda {
    pub config: TdaConfig,
    pub fuse_in: Conv2d,
    pub blocks: Vec<DcafBlock>,
    /// Emits offsets followed by mask logits; zero-initialised.
    pub offset_head: Conv2d,
    /// Deformable kernel applied to the adjacent feature.
    pub align: Conv2d,
}

/// Initial modulation mask, `sigmoid(0)`.
const INITIAL_MASK: f64 = 0.5;

impl Tda {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &TdaConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope("tda");
        let c = cfg.channels;
        let fuse_in = s.conv("fuse_in", 2 * c, c, ConvOpts::same(3), true);
        let blocks = (0..cfg.dcaf_blocks)
            .map(|i| DcafBlock::new(&mut s, &format!("dcaf{i}"), c, cfg.residual_scale, cfg.attention_reduction))
            .collect::<Result<_>>()?;
        let offset_head = s.offset_conv("offset_head", c, cfg.offset_channels() + cfg.mask_channels(), ConvOpts::same(3));
        // per-channel identity at the centre tap, compensating the initial mask
        let k = cfg.kernel;
        let mut w = Tensor::zeros(&[c, c, k, k]);
        for o in 0..c {
            w.data_mut()[((o * c + o) * k + k / 2) * k + k / 2] = T::lit(1.0 / INITIAL_MASK);
        }
        let opts = ConvOpts::same(k).with_deform_groups(cfg.deform_groups);
        let align = s.conv_with("align", c, c, opts, w, Some(Tensor::zeros(&[c])));
        Ok(Self {
            config: cfg.clone(),
            fuse_in,
            blocks,
            offset_head,
            align,
        })
    }

    /// `(offsets, masks)` for warping `adj` onto `tgt`.
    pub fn predict<T: Scalar>(&self, g: &mut Graph<'_, T>, adj: Var, tgt: Var) -> Result<(Var, Var)> {
        let (sa, st) = (g.value(adj).chw()?, g.value(tgt).chw()?);
        if sa != st {
            return Err(Error::shape("alignment", "feature pair", st, sa));
        }
        let cat = g.concat(&[tgt, adj])?;
        let mut x = self.fuse_in.forward_act(g, cat)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let head = self.offset_head.forward(g, x)?;
        let n_off = self.config.offset_channels();
        let offsets = g.slice_channels(head, 0, n_off)?;
        let logits = g.slice_channels(head, n_off, self.config.mask_channels())?;
        Ok((offsets, g.sigmoid(logits)))
    }

    pub fn align_var<T: Scalar>(&self, g: &mut Graph<'_, T>, adj: Var, tgt: Var) -> Result<Var> {
        let (offsets, masks) = self.predict(g, adj, tgt)?;
        self.align.forward_deform(g, adj, offsets, masks)
    }

    /// Aligned versions of every non-target feature, in temporal order.
    pub fn align_all<T: Scalar>(&self, g: &mut Graph<'_, T>, feats: &[Var], t: usize) -> Result<Vec<Var>> {
        if t >= feats.len() {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: feats.len(),
            });
        }
        feats
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, &f)| self.align_var(g, f, feats[t]))
            .collect()
    }

    pub fn predict_alignment_params<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        f_adj: &FeatureMap<T>,
        f_tgt: &FeatureMap<T>,
    ) -> Result<OffsetField<T>> {
        let mut g = Graph::inference(store);
        let (a, t) = (g.input(f_adj.clone()), g.input(f_tgt.clone()));
        let (o, m) = self.predict(&mut g, a, t)?;
        OffsetField::new(g.value(o).clone(), g.value(m).clone())
    }

    pub fn align_frame<T: Scalar>(&self, store: &ParamStore<T>, f_adj: &FeatureMap<T>, f_tgt: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::inference(store);
        let (a, t) = (g.input(f_adj.clone()), g.input(f_tgt.clone()));
        let y = self.align_var(&mut g, a, t)?;
        Ok(g.value(y).clone())
    }

    pub fn align_clip<T: Scalar>(&self, store: &ParamStore<T>, features: &[FeatureMap<T>], t: usize) -> Result<Vec<FeatureMap<T>>> {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = features.iter().map(|f| g.input(f.clone())).collect();
        let out = self.align_all(&mut g, &vars, t)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TdaConfig {
        TdaConfig {
            channels: 16,
            dcaf_blocks: 2,
            deform_groups: 4,
            ..TdaConfig::default()
        }
    }

    fn build(cfg: &TdaConfig) -> (ParamStore<f64>, Tda) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tda = Tda::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, tda)
    }

    fn rand_feat(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[c, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn head_width_matches_groups_and_kernel() {
        let cfg = TdaConfig::default();
        assert_eq!((cfg.offset_channels(), cfg.mask_channels()), (144, 72));
        let (store, tda) = build(&cfg);
        let f = rand_feat(64, 6, 6, 0);
        let field = tda.predict_alignment_params(&store, &f, &f).unwrap();
        assert_eq!(field.offsets.shape(), [144, 6, 6]);
        assert_eq!(field.masks.shape(), [72, 6, 6]);
        assert!(field.offsets.data().iter().all(|&v| v == 0.0));
        assert!(field.masks.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn initial_alignment_is_identity() {
        let (store, tda) = build(&small_cfg());
        let adj = rand_feat(16, 7, 9, 2);
        let tgt = rand_feat(16, 7, 9, 3);
        let out = tda.align_frame(&store, &adj, &tgt).unwrap();
        assert!(out.max_abs_diff(&adj) < 1e-12);
    }

    #[test]
    fn align_clip_skips_target_and_keeps_order() {
        let (store, tda) = build(&small_cfg());
        let feats: Vec<_> = (0..5).map(|i| rand_feat(16, 4, 4, 10 + i)).collect();
        let out = tda.align_clip(&store, &feats, 2).unwrap();
        assert_eq!(out.len(), 4);
        for (o, i) in out.iter().zip([0, 1, 3, 4]) {
            assert!(o.max_abs_diff(&feats[i]) < 1e-12);
        }
        assert!(matches!(tda.align_clip(&store, &feats, 5), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let (store, tda) = build(&small_cfg());
        assert!(tda.align_frame(&store, &rand_feat(16, 4, 4, 0), &rand_feat(16, 4, 6, 0)).is_err());
    }

    #[test]
    fn zeroed_dcaf_is_identity() {
        let (mut store, tda) = build(&small_cfg());
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("tda/dcaf0/") {
                let shape = store.value(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let x = rand_feat(16, 5, 5, 4);
        let y = tda.blocks[0].apply(&store, &x).unwrap();
        assert_eq!(y, x);
        assert_eq!(tda.blocks[1].apply(&store, &x).unwrap().shape(), [16, 5, 5]);
    }

    #[test]
    fn dcaf_receptive_radius_is_five() {
        let (store, tda) = build(&small_cfg());
        let block = &tda.blocks[0];
        let widest = |x: &Tensor<f64>| {
            let mut g = Graph::inference(&store);
            let v = g.input(x.clone());
            let parts = block.accumulated(&mut g, v).unwrap();
            g.value(parts[DCAF_BRANCHES - 1]).clone()
        };
        let (n, mid) = (15, 7);
        let x = rand_feat(16, n, n, 5);
        let base = widest(&x);
        let centre_change = |dx: usize| {
            let mut p = x.clone();
            for c in 0..16 {
                p.data_mut()[(c * n + mid) * n + mid + dx] += 1.0;
            }
            let out = widest(&p);
            (0..8)
                .map(|c| {
                    let i = (c * n + mid) * n + mid;
                    (out.data()[i] - base.data()[i]).abs()
                })
                .fold(0.0, f64::max)
        };
        // 3x3 squeeze (radius 1) then the dilation-4 branch (radius 4)
        assert!(centre_change(4) > 1e-9);
        assert!(centre_change(5) > 1e-9);
        assert_eq!(centre_change(6), 0.0);
    }
}
