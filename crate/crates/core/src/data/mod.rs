//! Sequences, clip sampling with target-frame padding, resizing and the
//! on-disk dataset layout.
//!
//! Layout (one directory per sequence):
//!
//! ```text
//! root/<sequence_id>/frames/000000.png   8-bit grayscale
//! root/<sequence_id>/annotations.csv     header `frame_index,x1,y1,x2,y2`
//! ```
//!
//! Box coordinates are original-resolution pixels with `x2`/`y2` exclusive.

mod io;
mod synth;

pub use io::{load_dataset, load_sequence, write_sequence, ANNOTATION_HEADER};
pub use synth::{generate_sequence, generate_synthetic_dataset, SyntheticSpec};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, `x2`/`y2` exclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, half_w: f64, half_h: f64) -> Self {
        Self::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn clamped(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Grayscale frame with intensities normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape("frame", "pixel count", width * height, pixels.len()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_u8(width: usize, height: usize, raw: &[u8]) -> Result<Self> {
        Self::new(width, height, raw.iter().map(|&v| f32::from(v) / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let i0 = s.floor() as usize;
                    (i0, (i0 + 1).min(n_in - 1), (s - i0 as f64) as f32)
                })
                .collect()
        };
        let (ys, xs) = (taps(height, self.height), taps(width, self.width));
        let w = self.width;
        let p = &self.pixels;
        let mut out = Vec::with_capacity(width * height);
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
        Self {
            width,
            height,
            pixels: out,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<Frame>,
    /// Ground-truth boxes per frame.
    pub annotations: Vec<Vec<BBox>>,
}

impl Sequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>, annotations: Vec<Vec<BBox>>) -> Result<Self> {
        let id = id.into();
        if annotations.len() != frames.len() {
            return Err(Error::shape("sequence", "annotation frames", frames.len(), annotations.len()));
        }
        if let Some(f0) = frames.first() {
            if let Some(bad) = frames.iter().find(|f| (f.width, f.height) != (f0.width, f0.height)) {
                return Err(Error::shape("sequence", "frame size", (f0.width, f0.height), (bad.width, bad.height)));
            }
        }
        Ok(Self { id, frames, annotations })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the frames.
    pub fn size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.width, f.height))
    }
}

/// `2R + 1` consecutive frames centred on a target frame.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    /// Source frame index of every slot; padded slots repeat the target index.
    pub frame_indices: Vec<usize>,
    /// Position of the target inside `frames` (always `R`).
    pub target_index: usize,
    /// Ground truth of the target frame in the clip's current resolution.
    pub boxes: Vec<BBox>,
    pub sequence_id: String,
    /// Absolute index of the target frame within its sequence.
    pub frame_index: usize,
    /// `(width, height)` of the source sequence.
    pub original_size: (usize, usize),
}

impl VideoClip {
    pub fn radius(&self) -> usize {
        self.target_index
    }

    pub fn size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.width, f.height))
    }
}

/// Source indices for the clip around `t`: slots outside `[0, len)` repeat `t`.
pub fn clip_indices(len: usize, t: usize, radius: usize) -> Result<Vec<usize>> {
    if t >= len {
        return Err(Error::IndexOutOfRange { index: t, len });
    }
    Ok((0..=2 * radius)
        .map(|slot| {
            let i = t as isize + slot as isize - radius as isize;
            if i < 0 || i >= len as isize {
                t
            } else {
                i as usize
            }
        })
        .collect())
}

pub fn sample_clip(seq: &Sequence, t: usize, radius: usize) -> Result<VideoClip> {
    let indices = clip_indices(seq.len(), t, radius)?;
    Ok(VideoClip {
        frames: indices.iter().map(|&i| seq.frames[i].clone()).collect(),
        frame_indices: indices,
        target_index: radius,
        boxes: seq.annotations[t].clone(),
        sequence_id: seq.id.clone(),
        frame_index: t,
        original_size: seq.size(),
    })
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::InvalidConfig(format!("resize target {size} must be a positive multiple of 8")));
    }
    Ok(())
}

fn scale_boxes(boxes: &[BBox], (w, h): (usize, usize), size: usize, seq: &str, frame: usize) -> Vec<BBox> {
    let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
    boxes
        .iter()
        .map(|b| b.scaled(sx, sy))
        .filter(|b| {
            let ok = b.is_valid();
            if !ok {
                log::warn!("{seq}#{frame}: dropping degenerate box {b:?} after resize");
            }
            ok
        })
        .collect()
}

/// Bilinearly resize every frame to `size x size` and rescale the boxes.
///
/// Boxes that collapse to zero width or height are dropped with a warning.
pub fn resize_clip(clip: &VideoClip, size: usize) -> Result<VideoClip> {
    check_size(size)?;
    Ok(VideoClip {
        frames: clip.frames.iter().map(|f| f.resized(size, size)).collect(),
        boxes: scale_boxes(&clip.boxes, clip.size(), size, &clip.sequence_id, clip.frame_index),
        ..clip.clone()
    })
}

/// [`resize_clip`] applied once to a whole sequence.
pub fn resize_sequence(seq: &Sequence, size: usize) -> Result<Sequence> {
    check_size(size)?;
    let frames = seq.frames.iter().map(|f| f.resized(size, size)).collect();
    let annotations = seq
        .annotations
        .iter()
        .enumerate()
        .map(|(i, b)| scale_boxes(b, seq.size(), size, &seq.id, i))
        .collect();
    Sequence::new(seq.id.clone(), frames, annotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_padding_repeats_target() {
        assert_eq!(clip_indices(10, 0, 2).unwrap(), vec![0, 0, 0, 1, 2]);
        assert_eq!(clip_indices(10, 5, 2).unwrap(), vec![3, 4, 5, 6, 7]);
        assert_eq!(clip_indices(10, 9, 2).unwrap(), vec![7, 8, 9, 9, 9]);
        assert!(matches!(clip_indices(10, 10, 2), Err(Error::IndexOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn clip_has_2r_plus_1_slots_centred_on_t(len in 1usize..40, r in 0usize..6, t_frac in 0.0f64..1.0) {
            let t = ((len as f64 * t_frac) as usize).min(len - 1);
            let idx = clip_indices(len, t, r).unwrap();
            prop_assert_eq!(idx.len(), 2 * r + 1);
            prop_assert_eq!(idx[r], t);
        }
    }

    fn clip_of(w: usize, h: usize, boxes: Vec<BBox>) -> VideoClip {
        VideoClip {
            frames: vec![Frame::new(w, h, vec![0.5; w * h]).unwrap()],
            frame_indices: vec![0],
            target_index: 0,
            boxes,
            sequence_id: "s".into(),
            frame_index: 0,
            original_size: (w, h),
        }
    }

    #[test]
    fn resize_scales_boxes_per_axis() {
        let c = resize_clip(&clip_of(640, 512, vec![BBox::new(100.0, 100.0, 150.0, 150.0)]), 544).unwrap();
        assert_eq!(c.boxes, vec![BBox::new(85.0, 106.25, 127.5, 159.375)]);
        assert_eq!(c.size(), (544, 544));
        assert_eq!(c.original_size, (640, 512));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let b = BBox::new(3.0, 4.0, 20.5, 30.25);
        let mut clip = clip_of(544, 544, vec![b]);
        clip.frames[0].pixels[17] = 0.9;
        let c = resize_clip(&clip, 544).unwrap();
        assert_eq!(c.boxes, vec![b]);
        assert_eq!(c.frames, clip.frames);
    }

    #[test]
    fn tiny_box_stays_valid_or_is_dropped() {
        let c = resize_clip(&clip_of(1000, 1000, vec![BBox::new(10.0, 10.0, 11.0, 11.0)]), 8).unwrap();
        assert!(c.boxes.iter().all(|b| b.is_valid()));
        let c = resize_clip(&clip_of(16, 16, vec![BBox::new(3.0, 3.0, 3.0, 4.0)]), 8).unwrap();
        assert!(c.boxes.is_empty());
    }

    #[test]
    fn resize_rejects_non_multiple_of_eight() {
        assert!(resize_clip(&clip_of(16, 16, vec![]), 100).is_err());
    }
}
