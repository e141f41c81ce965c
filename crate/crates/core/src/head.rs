//! Anchor-free decoupled detection head at stride 8, decoding, IoU, NMS,
//! centre-prior target assignment and the detection loss terms.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::BBox;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};
use crate::tensor_core::{sigmoid, ConvOpts};

/// Logit of a 0.01 prior probability.
pub const PRIOR_LOGIT: f64 = -4.59;
/// Radius, in cells, of the centre-sampling region.
pub const CENTER_RADIUS: f64 = 1.5;
pub const NMS_IOU: f64 = 0.65;
pub const INFER_CONF: f64 = 0.25;
pub const EVAL_CONF: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub width: usize,
    pub branch_layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            width: 64,
            branch_layers: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
    /// Row-major grid index of the originating cell.
    pub location: usize,
}

impl Detection {
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            bbox: self.bbox.scaled(sx, sy),
            ..*self
        }
    }
}

/// Raw head maps for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    /// `1 x h x w` logits.
    pub cls: Tensor<T>,
    /// `1 x h x w` logits.
    pub obj: Tensor<T>,
    /// `4 x h x w` signed (l, t, r, b) distances in stride units; `l + r` and `t + b` are positive.
    pub reg: Tensor<T>,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.cls.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls: Var,
    pub obj: Var,
    pub reg: Var,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub stem: Conv2d,
    pub cls_convs: Vec<Conv2d>,
    pub reg_convs: Vec<Conv2d>,
    pub cls_pred: Conv2d,
    pub reg_pred: Conv2d,
    pub obj_pred: Conv2d,
    pub stride: usize,
}

impl Head {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &HeadConfig, in_channels: usize, stride: usize) -> Self {
        let mut s = b.scope("head");
        let w = cfg.width;
        let stem = s.conv("stem", in_channels, w, ConvOpts::same(1), true);
        let cls_convs = (0..cfg.branch_layers)
            .map(|i| s.conv(&format!("cls{i}"), w, w, ConvOpts::same(3), true))
            .collect();
        let reg_convs = (0..cfg.branch_layers)
            .map(|i| s.conv(&format!("reg{i}"), w, w, ConvOpts::same(3), true))
            .collect();
        Self {
            stem,
            cls_convs,
            reg_convs,
            cls_pred: s.conv_zeroed("cls_pred", w, 1, ConvOpts::same(1), PRIOR_LOGIT),
            reg_pred: s.conv_zeroed("reg_pred", w, 4, ConvOpts::same(1), 0.0),
            obj_pred: s.conv_zeroed("obj_pred", w, 1, ConvOpts::same(1), PRIOR_LOGIT),
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<HeadVars> {
        let (c, _, _) = g.value(x).chw()?;
        if c != self.stem.in_channels {
            return Err(Error::shape("head", "input channels", self.stem.in_channels, c));
        }
        let stem = self.stem.forward_act(g, x)?;
        let cls_feat = self.cls_convs.iter().try_fold(stem, |h, l| l.forward_act(g, h))?;
        let reg_feat = self.reg_convs.iter().try_fold(stem, |h, l| l.forward_act(g, h))?;
        let cls = self.cls_pred.forward(g, cls_feat)?;
        let raw = self.reg_pred.forward(g, reg_feat)?;
        // raw channels are (dx, dy, log w, log h) about the cell centre
        let offset = g.slice_channels(raw, 0, 2)?;
        let log_size = g.slice_channels(raw, 2, 2)?;
        let size = g.exp(log_size);
        let half = g.scale(size, T::lit(0.5));
        let lt = g.sub(half, offset)?;
        let rb = g.add(half, offset)?;
        let reg = g.concat(&[lt, rb])?;
        let obj = self.obj_pred.forward(g, reg_feat)?;
        Ok(HeadVars { cls, obj, reg })
    }

    pub fn head_forward<T: Scalar>(&self, store: &ParamStore<T>, f_d: &FeatureMap<T>) -> Result<HeadOutput<T>> {
        let mut g = Graph::inference(store);
        let x = g.input(f_d.clone());
        let v = self.forward(&mut g, x)?;
        Ok(outputs(&g, v))
    }
}

pub fn outputs<T: Scalar>(g: &Graph<'_, T>, v: HeadVars) -> HeadOutput<T> {
    HeadOutput {
        cls: g.value(v.cls).clone(),
        obj: g.value(v.obj).clone(),
        reg: g.value(v.reg).clone(),
    }
}

fn cell_center(i: usize, j: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
}

fn ltrb_box(cx: f64, cy: f64, ltrb: [f64; 4], stride: usize) -> BBox {
    let s = stride as f64;
    BBox::new(cx - ltrb[0] * s, cy - ltrb[1] * s, cx + ltrb[2] * s, cy + ltrb[3] * s)
}

/// Boxes in network-input pixels for every cell scoring at least `conf_thresh`.
pub fn decode<T: Scalar>(out: &HeadOutput<T>, stride: usize, conf_thresh: f64) -> Vec<Detection> {
    let (h, w) = out.grid();
    let n = h * w;
    let (cls, obj, reg) = (out.cls.data(), out.obj.data(), out.reg.data());
    let mut dets = Vec::new();
    for idx in 0..n {
        let score = sigmoid(obj[idx].as_f64()) * sigmoid(cls[idx].as_f64());
        if score < conf_thresh {
            continue;
        }
        let (cx, cy) = cell_center(idx / w, idx % w, stride);
        let ltrb = [0, 1, 2, 3].map(|k| reg[k * n + idx].as_f64());
        dets.push(Detection {
            bbox: ltrb_box(cx, cy, ltrb, stride),
            score,
            class_id: 0,
            location: idx,
        });
    }
    dets
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        log::warn!("IoU with a degenerate box: {a:?} / {b:?}");
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Descending score, ties broken by lower grid index.
pub fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.location.cmp(&b.location))
}

/// Greedy suppression of detections overlapping a higher-ranked one by more than `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(score_order);
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            keep.push(d);
        }
    }
    keep
}

/// Per-cell training targets for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// Index into `boxes` of the gt owning each cell.
    pub owner: Vec<Option<usize>>,
    /// (l, t, r, b) of the owning gt relative to the cell centre, stride units.
    /// Cells outside the owning box carry negative entries.
    pub targets: Vec<[f64; 4]>,
    /// Ground truth after clipping to the image.
    pub boxes: Vec<BBox>,
}

impl Assignment {
    pub fn num_positives(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    pub fn positive_mask<T: Scalar>(&self) -> Tensor<T> {
        let data = self.owner.iter().map(|o| if o.is_some() { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("grid")
    }
}

/// Cells whose centre lies strictly inside a gt box or within
/// [`CENTER_RADIUS`] cells of its centre are positive; smaller boxes claim
/// contested cells first.
pub fn assign_targets(gt: &[BBox], height: usize, width: usize, stride: usize) -> Assignment {
    let (img_w, img_h) = ((width * stride) as f64, (height * stride) as f64);
    let boxes: Vec<BBox> = gt
        .iter()
        .filter_map(|b| {
            let c = b.clamped(img_w, img_h);
            if c != *b {
                log::warn!("ground truth {b:?} clipped to the {img_w}x{img_h} input");
            }
            c.is_valid().then_some(c)
        })
        .collect();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[a].area().partial_cmp(&boxes[b].area()).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let n = height * width;
    let mut owner = vec![None; n];
    let mut targets = vec![[0.0; 4]; n];
    let radius = CENTER_RADIUS * stride as f64;
    let s = stride as f64;
    for idx in 0..n {
        let (cx, cy) = cell_center(idx / width, idx % width, stride);
        for &k in &order {
            let b = &boxes[k];
            let inside = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
            let (gx, gy) = b.center();
            let near = (cx - gx).hypot(cy - gy) < radius;
            if inside || near {
                owner[idx] = Some(k);
                targets[idx] = [(cx - b.x1) / s, (cy - b.y1) / s, (b.x2 - cx) / s, (b.y2 - cy) / s];
                break;
            }
        }
    }
    Assignment {
        height,
        width,
        stride,
        owner,
        targets,
        boxes,
    }
}

fn iou_ltrb(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let iw = p[0].min(t[0]) + p[2].min(t[2]);
    let ih = p[1].min(t[1]) + p[3].min(t[3]);
    let (iw_pos, ih_pos) = (iw > 0.0, ih > 0.0);
    let inter = if iw_pos && ih_pos { iw * ih } else { 0.0 };
    let area_p = (p[0] + p[2]) * (p[1] + p[3]);
    let area_t = (t[0] + t[2]) * (t[1] + t[3]);
    let union = area_p + area_t - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    let overlap = iw_pos && ih_pos;
    let d_inter = [
        if overlap && p[0] < t[0] { ih } else { 0.0 },
        if overlap && p[1] < t[1] { iw } else { 0.0 },
        if overlap && p[2] < t[2] { ih } else { 0.0 },
        if overlap && p[3] < t[3] { iw } else { 0.0 },
    ];
    let d_area = [p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]];
    let grad = [0, 1, 2, 3].map(|k| (d_inter[k] * (union + inter) - inter * d_area[k]) / (union * union));
    (iou, grad)
}

/// `(L_reg, L_cls, L_obj)` as graph nodes.
pub fn detection_loss_vars<T: Scalar>(g: &mut Graph<'_, T>, out: HeadVars, asg: &Assignment) -> Result<(Var, Var, Var)> {
    let (_, h, w) = g.value(out.reg).chw()?;
    if (h, w) != (asg.height, asg.width) {
        return Err(Error::shape("detection loss", "grid", (asg.height, asg.width), (h, w)));
    }
    let positives: Vec<(usize, [f64; 4])> = asg
        .owner
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_some())
        .map(|(i, _)| (i, asg.targets[i]))
        .collect();
    let pos_mask = asg.positive_mask::<T>();
    // summed over every cell, normalised by the positive count (at least one)
    let l_obj = g.bce_with_logits(out.obj, &pos_mask, &Tensor::full(&[1, h, w], T::one()))?;
    let l_obj = g.scale(l_obj, T::lit((h * w) as f64 / positives.len().max(1) as f64));
    if positives.is_empty() {
        let l_reg = g.input(Tensor::scalar(T::zero()));
        let l_cls = g.input(Tensor::scalar(T::zero()));
        return Ok((l_reg, l_cls, l_obj));
    }
    let l_cls = g.bce_with_logits(out.cls, &pos_mask, &pos_mask)?;
    let n = h * w;
    let inv = 1.0 / positives.len() as f64;
    let reg = g.value(out.reg);
    let mut loss = 0.0;
    for &(idx, t) in &positives {
        let p = [0, 1, 2, 3].map(|k| reg.data()[k * n + idx].as_f64());
        loss += 1.0 - iou_ltrb(p, t).0;
    }
    let l_reg = g.custom(
        Tensor::scalar(T::lit(loss * inv)),
        &[out.reg],
        Box::new(move |ctx| {
            let gscale = ctx.grad.data()[0].as_f64() * inv;
            let mut d = Tensor::zeros(ctx.inputs[0].shape());
            for &(idx, t) in &positives {
                let p = [0, 1, 2, 3].map(|k| ctx.inputs[0].data()[k * n + idx].as_f64());
                let (_, gr) = iou_ltrb(p, t);
                for k in 0..4 {
                    d.data_mut()[k * n + idx] = T::lit(-gscale * gr[k]);
                }
            }
            vec![Some(d)]
        }),
    );
    Ok((l_reg, l_cls, l_obj))
}

/// Loss terms for fixed head maps.
pub fn detection_loss<T: Scalar>(out: &HeadOutput<T>, asg: &Assignment) -> Result<(f64, f64, f64)> {
    let mut g = Graph::<T>::new();
    let vars = HeadVars {
        cls: g.input(out.cls.clone()),
        obj: g.input(out.obj.clone()),
        reg: g.input(out.reg.clone()),
    };
    let (r, c, o) = detection_loss_vars(&mut g, vars, asg)?;
    let val = |v| g.value(v).data()[0].as_f64();
    Ok((val(r), val(c), val(o)))
}

/// `sequence_id frame_index x1 y1 x2 y2 score`.
pub fn format_detection(sequence_id: &str, frame_index: usize, d: &Detection) -> String {
    let b = &d.bbox;
    format!(
        "{sequence_id} {frame_index} {:.3} {:.3} {:.3} {:.3} {:.6}",
        b.x1, b.y1, b.x2, b.y2, d.score
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn output(h: usize, w: usize, seed: u64) -> HeadOutput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeadOutput {
            cls: Tensor::randn(&[1, h, w], 2.0, &mut rng),
            obj: Tensor::randn(&[1, h, w], 2.0, &mut rng),
            reg: Tensor::uniform(&[4, h, w], 0.1, 3.0, &mut rng),
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((arb_box(), 0.0..1.0f64), 0..25).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (bbox, score))| Detection {
                    bbox,
                    score,
                    class_id: 0,
                    location: i,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (x, y) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn nms_is_idempotent(dets in arb_dets(), thr in 0.05..1.0f64) {
            let once = nms(&dets, thr);
            prop_assert_eq!(nms(&once, thr), once);
        }
    }

    #[test]
    fn decode_unit_distances_at_origin() {
        let mut out = HeadOutput {
            cls: Tensor::full(&[1, 2, 2], 10.0),
            obj: Tensor::full(&[1, 2, 2], 10.0),
            reg: Tensor::full(&[4, 2, 2], 1.0),
        };
        let dets = decode(&out, 8, 0.5);
        assert_eq!(dets.len(), 4);
        assert_eq!(dets[0].bbox, BBox::new(-4.0, -4.0, 12.0, 12.0));
        out.cls = Tensor::full(&[1, 2, 2], 3.0);
        assert!(decode(&out, 8, 1.0).is_empty());
    }

    #[test]
    fn decode_matches_loop_oracle() {
        let out = output(5, 7, 1);
        let dets = decode(&out, 8, 0.3);
        let mut want = Vec::new();
        for i in 0..5 {
            for j in 0..7 {
                let s = 1.0 / (1.0 + (-out.obj.at3(0, i, j)).exp()) / (1.0 + (-out.cls.at3(0, i, j)).exp());
                if s >= 0.3 {
                    let (cx, cy) = (8.0 * j as f64 + 4.0, 8.0 * i as f64 + 4.0);
                    let r = |k| out.reg.at3(k, i, j) * 8.0;
                    want.push((BBox::new(cx - r(0), cy - r(1), cx + r(2), cy + r(3)), s));
                }
            }
        }
        assert_eq!(dets.len(), want.len());
        for (d, (b, s)) in dets.iter().zip(&want) {
            assert!((d.score - s).abs() < 1e-12);
            for (u, v) in [(d.bbox.x1, b.x1), (d.bbox.y1, b.y1), (d.bbox.x2, b.x2), (d.bbox.y2, b.y2)] {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = |score, location| Detection {
            bbox: b,
            score,
            class_id: 0,
            location,
        };
        assert_eq!(nms(&[d(0.4, 0)], 0.65), vec![d(0.4, 0)]);
        assert_eq!(nms(&[d(0.8, 0), d(0.9, 1)], 0.65), vec![d(0.9, 1)]);
        assert_eq!(nms(&[d(0.8, 3), d(0.8, 1)], 0.65), vec![d(0.8, 1)]);
    }

    #[test]
    fn nms_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dets: Vec<Detection> = (0..20)
            .map(|i| {
                let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
                let (w, h) = (rng.random_range(4.0..20.0), rng.random_range(4.0..20.0));
                Detection {
                    bbox: BBox::new(x, y, x + w, y + h),
                    score: rng.random_range(0.0..1.0),
                    class_id: 0,
                    location: i,
                }
            })
            .collect();
        // O(n^2): a box survives iff no surviving higher-ranked box overlaps it
        let mut idx: Vec<usize> = (0..20).collect();
        idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
        let mut alive = vec![true; 20];
        for (r, &i) in idx.iter().enumerate() {
            for &j in &idx[..r] {
                if alive[j] && iou(&dets[i].bbox, &dets[j].bbox) > 0.4 {
                    alive[i] = false;
                }
            }
        }
        let want: Vec<usize> = idx.iter().copied().filter(|&i| alive[i]).collect();
        let got: Vec<usize> = nms(&dets, 0.4).iter().map(|d| d.location).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn centred_16px_box_claims_nine_cells() {
        // centre of cell (4, 4); neighbours at 8 px and diagonals at 11.3 px fall inside 1.5 cells
        let a = assign_targets(&[BBox::new(28.0, 28.0, 44.0, 44.0)], 9, 9, 8);
        let pos: Vec<usize> = (0..81).filter(|&i| a.owner[i].is_some()).collect();
        let mut want = Vec::new();
        for i in 0..9usize {
            for j in 0..9usize {
                let (dy, dx) = (i as f64 - 4.0, j as f64 - 4.0);
                if dy.hypot(dx) < 1.5 {
                    want.push(i * 9 + j);
                }
            }
        }
        assert_eq!(pos, want);
        assert_eq!(pos.len(), 9);
    }

    #[test]
    fn empty_gt_has_no_positives() {
        assert_eq!(assign_targets(&[], 4, 4, 8).num_positives(), 0);
    }

    #[test]
    fn nested_boxes_favour_the_smaller() {
        let big = BBox::new(0.0, 0.0, 64.0, 64.0);
        let small = BBox::new(24.0, 24.0, 40.0, 40.0);
        let a = assign_targets(&[big, small], 8, 8, 8);
        // cell (4, 4) has centre (36, 36), inside both
        assert_eq!(a.owner[4 * 8 + 4], Some(1));
        assert_eq!(a.owner[0], Some(0));
    }

    #[test]
    fn out_of_bounds_gt_is_clipped() {
        let a = assign_targets(&[BBox::new(-10.0, 20.0, 12.0, 40.0)], 8, 8, 8);
        assert_eq!(a.boxes[0], BBox::new(0.0, 20.0, 12.0, 40.0));
    }

    #[test]
    fn decoding_targets_recovers_gt() {
        let gts = [BBox::new(13.3, 17.1, 29.9, 24.2), BBox::new(40.0, 5.0, 47.5, 11.0)];
        let a = assign_targets(&gts, 8, 8, 8);
        assert!(a.num_positives() > 0);
        for idx in 0..64 {
            if let Some(k) = a.owner[idx] {
                let (cx, cy) = cell_center(idx / 8, idx % 8, 8);
                let b = ltrb_box(cx, cy, a.targets[idx], 8);
                for (u, v) in [(b.x1, gts[k].x1), (b.y1, gts[k].y1), (b.x2, gts[k].x2), (b.y2, gts[k].y2)] {
                    assert!((u - v).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn perfect_prediction_has_small_loss() {
        let gt = BBox::new(28.0, 28.0, 44.0, 44.0);
        let a = assign_targets(&[gt], 9, 9, 8);
        let n = 81;
        let mut out = HeadOutput {
            cls: Tensor::full(&[1, 9, 9], 12.0),
            obj: Tensor::full(&[1, 9, 9], -12.0),
            reg: Tensor::full(&[4, 9, 9], 1.0),
        };
        for idx in 0..n {
            if a.owner[idx].is_some() {
                out.obj.data_mut()[idx] = 12.0;
                for k in 0..4 {
                    out.reg.data_mut()[k * n + idx] = a.targets[idx][k];
                }
            }
        }
        let (r, c, o) = detection_loss(&out, &a).unwrap();
        assert!(r < 1e-3 && c < 1e-3 && o < 1e-2, "{r} {c} {o}");
    }

    #[test]
    fn zero_positives_give_zero_reg_and_cls() {
        let a = assign_targets(&[], 3, 3, 8);
        let (r, c, o) = detection_loss(&output(3, 3, 2), &a).unwrap();
        assert_eq!((r, c), (0.0, 0.0));
        assert!(o > 0.0 && o.is_finite());
    }

    #[test]
    fn loss_matches_scalar_oracle_on_3x3() {
        let out = output(3, 3, 3);
        let gt = BBox::new(2.0, 3.0, 10.0, 9.0);
        let a = assign_targets(&[gt], 3, 3, 8);
        let (r, c, o) = detection_loss(&out, &a).unwrap();
        let bce = |x: f64, y: f64| -(y * (1.0 / (1.0 + (-x).exp())).ln() + (1.0 - y) * (1.0 - 1.0 / (1.0 + (-x).exp())).ln());
        let (mut wr, mut wc, mut wo, mut np) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let (cx, cy) = (8.0 * j as f64 + 4.0, 8.0 * i as f64 + 4.0);
                let pos = (cx > gt.x1 && cx < gt.x2 && cy > gt.y1 && cy < gt.y2) || (cx - 6.0).hypot(cy - 6.0) < 12.0;
                wo += bce(out.obj.at3(0, i, j), if pos { 1.0 } else { 0.0 });
                if pos {
                    np += 1.0;
                    wc += bce(out.cls.at3(0, i, j), 1.0);
                    let p = BBox::new(
                        cx - 8.0 * out.reg.at3(0, i, j),
                        cy - 8.0 * out.reg.at3(1, i, j),
                        cx + 8.0 * out.reg.at3(2, i, j),
                        cy + 8.0 * out.reg.at3(3, i, j),
                    );
                    wr += 1.0 - iou(&p, &gt);
                }
            }
        }
        assert_eq!(np, 4.0);
        // objectness sums over all nine cells but divides by the positive count
        assert!((r - wr / np).abs() < 1e-12, "{r} vs {}", wr / np);
        assert!((c - wc / np).abs() < 1e-12);
        assert!((o - wo / np).abs() < 1e-12);
    }

    #[test]
    fn initial_objectness_is_one_percent() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::new(&mut ParamBuilder::new(&mut store, &mut rng), &HeadConfig::default(), 64, 8);
        let x = Tensor::<f32>::randn(&[64, 6, 5], 1.0, &mut rng);
        let out = head.head_forward(&store, &x).unwrap();
        assert_eq!(out.grid(), (6, 5));
        assert!(out.obj.data().iter().all(|&v| (sigmoid(f64::from(v)) - 0.01).abs() < 1e-4));
        // a stride-sized box centred on every cell
        assert!(out.reg.data().iter().all(|&v| v == 0.5));
        assert_eq!(out, head.head_forward(&store, &x).unwrap());
    }
}
