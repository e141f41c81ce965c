//! End-to-end inference over sequences and feature visualisation.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};

use crate::autograd::Graph;
use crate::data::{clip_indices, sample_clip, resize_clip, BBox, Frame, Sequence};
use crate::error::{Error, Result};
use crate::eval::FrameDetection;
use crate::head::{decode, format_detection, nms, outputs, Detection};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    pub input_size: usize,
    pub conf_thresh: f64,
    pub nms_iou: f64,
}

/// Clip composition used for one target frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipTrace {
    pub sequence_id: String,
    pub frame_index: usize,
    pub source_indices: Vec<usize>,
}

/// Detections for every frame in order, in original pixel coordinates.
///
/// Each frame passes through the backbone once; clips are assembled from the
/// cached features with target-frame padding at the sequence ends.
pub fn infer_sequence<T: Scalar>(
    model: &Model<T>,
    seq: &Sequence,
    opts: &InferOptions,
    trace: &mut Vec<ClipTrace>,
) -> Result<Vec<(usize, Vec<Detection>)>> {
    let size = opts.input_size;
    let (w, h) = seq.size();
    let (sx, sy) = (w as f64 / size as f64, h as f64 / size as f64);
    let features = seq
        .frames
        .iter()
        .map(|f| model.frame_features(&f.resized(size, size)))
        .collect::<Result<Vec<FeatureMap<T>>>>()?;
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let idx = clip_indices(seq.len(), t, model.radius())?;
        log::debug!("{} frame {t}: clip {idx:?}", seq.id);
        let clip: Vec<FeatureMap<T>> = idx.iter().map(|&i| features[i].clone()).collect();
        let head = model.predict_from_features(&clip)?;
        let dets = nms(&decode(&head, model.stride(), opts.conf_thresh), opts.nms_iou);
        out.push((t, dets.iter().map(|d| d.scaled(sx, sy)).collect()));
        trace.push(ClipTrace {
            sequence_id: seq.id.clone(),
            frame_index: t,
            source_indices: idx,
        });
    }
    Ok(out)
}

pub fn infer_dataset<T: Scalar>(
    model: &Model<T>,
    dataset: &[Sequence],
    opts: &InferOptions,
    trace: &mut Vec<ClipTrace>,
) -> Result<Vec<FrameDetection>> {
    let mut out = Vec::new();
    for seq in dataset {
        for (t, dets) in infer_sequence(model, seq, opts, trace)? {
            out.extend(dets.into_iter().map(|detection| FrameDetection {
                sequence_id: seq.id.clone(),
                frame_index: t,
                detection,
            }));
        }
    }
    Ok(out)
}

pub fn write_detections(dets: &[FrameDetection], out: &mut dyn Write) -> std::io::Result<()> {
    for d in dets {
        writeln!(out, "{}", format_detection(&d.sequence_id, d.frame_index, &d.detection))?;
    }
    out.flush()
}

/// Channel mean of a `[c, h, w]` map, linearly mapped so the minimum is 0 and the maximum 255.
/// A constant map becomes all zeros.
pub fn heatmap<T: Scalar>(f: &FeatureMap<T>) -> Result<GrayImage> {
    let (c, h, w) = f.chw()?;
    let mean: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|ch| f.data()[ch * h * w + p].as_f64()).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let px: Vec<u8> = mean
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, px).expect("heatmap buffer"))
}

fn upscale(img: &GrayImage, factor: u32) -> GrayImage {
    GrayImage::from_fn(img.width() * factor, img.height() * factor, |x, y| *img.get_pixel(x / factor, y / factor))
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = (b.x1.floor() as i64).clamp(0, w - 1);
    let y1 = (b.y1.floor() as i64).clamp(0, h - 1);
    let x2 = ((b.x2.ceil() as i64) - 1).clamp(0, w - 1);
    let y2 = ((b.y2.ceil() as i64) - 1).clamp(0, h - 1);
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, color);
        img.put_pixel(x as u32, y2 as u32, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, color);
        img.put_pixel(x2 as u32, y as u32, color);
    }
}

/// Target frame with ground truth in green and detections in red.
pub fn overlay(frame: &Frame, gts: &[BBox], dets: &[Detection]) -> RgbImage {
    let gray = frame.to_u8();
    let mut img = RgbImage::from_fn(frame.width as u32, frame.height as u32, |x, y| {
        let v = gray[y as usize * frame.width + x as usize];
        Rgb([v, v, v])
    });
    for b in gts {
        draw_box(&mut img, b, Rgb([0, 255, 0]));
    }
    for d in dets {
        draw_box(&mut img, &d.bbox, Rgb([255, 0, 0]));
    }
    img
}

/// Feature maps shown for one target frame.
pub struct Visualisation<T> {
    /// `(clip slot, map)` for every adjacent slot: aligned features, or raw
    /// backbone features when the model has no alignment stage.
    pub adjacent: Vec<(usize, FeatureMap<T>)>,
    pub target: FeatureMap<T>,
    pub detections: Vec<Detection>,
}

pub fn visualisation<T: Scalar>(model: &Model<T>, seq: &Sequence, t: usize, opts: &InferOptions) -> Result<Visualisation<T>> {
    if t >= seq.len() {
        return Err(Error::IndexOutOfRange { index: t, len: seq.len() });
    }
    let clip = resize_clip(&sample_clip(seq, t, model.radius())?, opts.input_size)?;
    let mut g = Graph::inference(&model.store);
    let vars = model.forward(&mut g, &clip)?;
    let r = model.radius();
    let slots: Vec<usize> = (0..model.frames).filter(|&s| s != r).collect();
    let adjacent = if vars.aligned.is_empty() {
        log::info!("model has no alignment stage; showing unaligned features");
        slots.iter().map(|&s| (s, g.value(vars.features[s]).clone())).collect()
    } else {
        slots.iter().zip(&vars.aligned).map(|(&s, &v)| (s, g.value(v).clone())).collect()
    };
    let (w, h) = seq.size();
    let size = opts.input_size as f64;
    let head = outputs(&g, vars.head);
    let detections = nms(&decode(&head, model.stride(), opts.conf_thresh), opts.nms_iou)
        .iter()
        .map(|d| d.scaled(w as f64 / size, h as f64 / size))
        .collect();
    Ok(Visualisation {
        adjacent,
        target: g.value(vars.features[r]).clone(),
        detections,
    })
}

/// Writes `aligned_<slot>.png` per adjacent slot, `target.png` and `overlay.png`.
pub fn write_visualisation<T: Scalar>(
    model: &Model<T>,
    seq: &Sequence,
    t: usize,
    opts: &InferOptions,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let vis = visualisation(model, seq, t, opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let factor = model.stride() as u32;
    let save_gray = |img: GrayImage, name: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        upscale(&img, factor)
            .save(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        Ok(path)
    };
    let mut written = Vec::new();
    for (slot, f) in &vis.adjacent {
        written.push(save_gray(heatmap(f)?, format!("aligned_{slot}.png"))?);
    }
    written.push(save_gray(heatmap(&vis.target)?, "target.png".into())?);
    let path = out_dir.join("overlay.png");
    overlay(&seq.frames[t], &seq.annotations[t], &vis.detections)
        .save(&path)
        .map_err(|source| Error::Image { path: path.clone(), source })?;
    written.push(path);
    Ok(written)
}
