//! The assembled detector: shared backbone, optional temporal alignment,
//! multi-frame fusion and refinement, and the detection head.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{frame_tensor, Backbone};
use crate::config::{Ablation, ModelConfig};
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::head::{assign_targets, decode, detection_loss_vars, nms, outputs, Detection, Head, HeadOutput, HeadVars};
use crate::losses::{motion_compensation_var, total_loss_var, LossTerms, LossWeights};
use crate::nn::{ParamBuilder, ParamStore};
use crate::refine::{temporal_order, FeatureFusion};
use crate::scalar::Scalar;
use crate::tda::Tda;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub frames: usize,
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub tda: Option<Tda>,
    pub fusion: FeatureFusion,
    pub head: Head,
}

/// Intermediate features of one clip.
pub struct ClipVars {
    /// Backbone features in clip order.
    pub features: Vec<Var>,
    /// Aligned adjacent features, temporal order, target excluded; empty without alignment.
    pub aligned: Vec<Var>,
    pub fused: Var,
    pub head: HeadVars,
}

impl<T: Scalar> Model<T> {
    /// Build with freshly initialised parameters.
    pub fn new(frames: usize, config: &ModelConfig, ablation: Ablation, rng: &mut ChaCha8Rng) -> Result<Self> {
        if frames == 0 || frames % 2 == 0 {
            return Err(Error::InvalidConfig(format!("clip length must be odd, got {frames}")));
        }
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, rng);
        let backbone = Backbone::new(&mut b, &config.backbone)?;
        let tda = if ablation.tda { Some(Tda::new(&mut b, &config.tda)?) } else { None };
        let fusion = FeatureFusion::new(&mut b, &config.refine, frames, ablation.stages())?;
        let head = Head::new(&mut b, &config.head, fusion.out_channels(), backbone.stride());
        Ok(Self {
            frames,
            config: config.clone(),
            ablation,
            store,
            backbone,
            tda,
            fusion,
            head,
        })
    }

    pub fn radius(&self) -> usize {
        self.frames / 2
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_clip(&self, n: usize) -> Result<()> {
        if n != self.frames {
            return Err(Error::shape("model", "clip length", self.frames, n));
        }
        Ok(())
    }

    /// Backbone features per clip slot; repeated source frames share one evaluation.
    pub fn clip_features(&self, g: &mut Graph<'_, T>, clip: &VideoClip) -> Result<Vec<Var>> {
        self.check_clip(clip.frames.len())?;
        let mut seen: HashMap<usize, Var> = HashMap::new();
        clip.frames
            .iter()
            .zip(&clip.frame_indices)
            .map(|(f, &src)| {
                if let Some(&v) = seen.get(&src) {
                    return Ok(v);
                }
                let x = g.input(frame_tensor(f));
                let v = self.backbone.forward(g, x)?;
                seen.insert(src, v);
                Ok(v)
            })
            .collect()
    }

    /// Everything after the backbone.
    pub fn forward_features(&self, g: &mut Graph<'_, T>, features: Vec<Var>) -> Result<ClipVars> {
        self.check_clip(features.len())?;
        let r = self.radius();
        let target = features[r];
        let (aligned, frames) = match &self.tda {
            Some(tda) => {
                let aligned = tda.align_all(g, &features, r)?;
                let frames = temporal_order(&aligned, target)?;
                (aligned, frames)
            }
            None => (Vec::new(), features.clone()),
        };
        let fused = self.fusion.forward(g, &frames)?;
        let head = self.head.forward(g, fused)?;
        Ok(ClipVars {
            features,
            aligned,
            fused,
            head,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, clip: &VideoClip) -> Result<ClipVars> {
        let features = self.clip_features(g, clip)?;
        self.forward_features(g, features)
    }

    /// Weighted objective for one clip at network resolution.
    pub fn loss(&self, g: &mut Graph<'_, T>, clip: &VideoClip, weights: &LossWeights) -> Result<(Var, LossTerms)> {
        let vars = self.forward(g, clip)?;
        let (_, h, w) = g.value(vars.head.cls).chw()?;
        let asg = assign_targets(&clip.boxes, h, w, self.stride());
        let (reg, cls, obj) = detection_loss_vars(g, vars.head, &asg)?;
        let mc = if self.ablation.uses_mc() && weights.eta_mc > 0.0 && !vars.aligned.is_empty() {
            Some(motion_compensation_var(g, &vars.aligned, vars.features[self.radius()])?)
        } else {
            None
        };
        total_loss_var(g, reg, cls, obj, mc, weights)
    }

    pub fn predict(&self, clip: &VideoClip) -> Result<HeadOutput<T>> {
        let mut g = Graph::inference(&self.store);
        let vars = self.forward(&mut g, clip)?;
        Ok(outputs(&g, vars.head))
    }

    /// Head maps from precomputed backbone features (clip order).
    pub fn predict_from_features(&self, features: &[FeatureMap<T>]) -> Result<HeadOutput<T>> {
        let mut g = Graph::inference(&self.store);
        let vars: Vec<Var> = features.iter().map(|f| g.input(f.clone())).collect();
        let out = self.forward_features(&mut g, vars)?;
        Ok(outputs(&g, out.head))
    }

    pub fn frame_features(&self, frame: &crate::data::Frame) -> Result<FeatureMap<T>> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(frame_tensor(frame));
        let y = self.backbone.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Post-NMS detections in network-input pixels.
    pub fn detect(&self, clip: &VideoClip, conf: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let out = self.predict(clip)?;
        Ok(nms(&decode(&out, self.stride(), conf), nms_iou))
    }
}
