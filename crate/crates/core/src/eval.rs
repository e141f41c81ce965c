//! Detection metrics: greedy IoU matching, precision/recall/F1 at a
//! confidence threshold, all-point interpolated AP at IoU 0.5, PR-curve export
//! and the metrics report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Sequence};
use crate::error::{Error, Result};
use crate::head::{iou, score_order, Detection};

pub const MATCH_IOU: f64 = 0.5;
/// Operating point for the reported precision, recall and F1.
pub const REPORT_CONF: f64 = 0.5;

/// Matching outcome of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatch {
    /// `(score, is_true_positive)` in descending score order.
    pub detections: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl FrameMatch {
    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|d| d.1).count()
    }

    pub fn false_negatives(&self) -> usize {
        self.num_gt - self.true_positives()
    }
}

/// Greedy matching in descending score: each detection takes the unmatched
/// ground truth of highest IoU if that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> FrameMatch {
    let mut sorted = dets.to_vec();
    sorted.sort_by(score_order);
    let mut taken = vec![false; gts.len()];
    let detections = sorted
        .iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            let hit = match best {
                Some((j, v)) if v >= iou_thresh => {
                    taken[j] = true;
                    true
                }
                _ => false,
            };
            (d.score, hit)
        })
        .collect();
    FrameMatch {
        detections,
        num_gt: gts.len(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrF1 {
    /// Precision is 1 without detections, recall is 1 without ground truth, F1 is 0 when both vanish.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Counts only detections scoring at least `conf_thresh`; a true positive
/// dropped by the threshold becomes a false negative.
pub fn compute_pr_f1(matches: &[FrameMatch], conf_thresh: f64) -> PrF1 {
    let (mut tp, mut fp, mut gt) = (0, 0, 0);
    for m in matches {
        gt += m.num_gt;
        for &(s, hit) in &m.detections {
            if s >= conf_thresh {
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    PrF1::from_counts(tp, fp, gt - tp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    /// Lowest score admitted at this cut; infinite for the leading point.
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
    /// Highest precision at this or any larger recall.
    pub envelope: f64,
}

/// One point per distinct score, after a leading `(recall 0, precision 1)` point.
pub fn pr_curve(matches: &[FrameMatch]) -> Vec<PrPoint> {
    let num_gt: usize = matches.iter().map(|m| m.num_gt).sum();
    let mut all: Vec<(f64, bool)> = matches.iter().flat_map(|m| m.detections.iter().copied()).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pts = vec![PrPoint {
        score: f64::INFINITY,
        recall: 0.0,
        precision: 1.0,
        envelope: 1.0,
    }];
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            tp += all[i].1 as usize;
            n += 1;
            i += 1;
        }
        pts.push(PrPoint {
            score: s,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            precision: tp as f64 / n as f64,
            envelope: 0.0,
        });
    }
    let mut run = 0.0f64;
    for p in pts.iter_mut().rev() {
        run = run.max(p.precision);
        p.envelope = run;
    }
    pts
}

/// Area under the precision envelope, summed over recall steps.
pub fn envelope_area(points: &[PrPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * w[1].envelope)
        .sum()
}

/// Single-class AP at IoU 0.5 with all-point interpolation. Zero without ground truth.
pub fn compute_map50(matches: &[FrameMatch]) -> f64 {
    envelope_area(&pr_curve(matches))
}

pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("score,recall,precision,envelope\n");
    for p in points {
        let score = if p.score.is_finite() { format!("{}", p.score) } else { "inf".into() };
        writeln!(s, "{score},{},{},{}", p.recall, p.precision, p.envelope).expect("string write");
    }
    s
}

pub fn export_pr_curve(matches: &[FrameMatch], path: &Path) -> Result<()> {
    std::fs::write(path, pr_curve_csv(&pr_curve(matches))).map_err(|e| Error::io(path, e))
}

/// A detection attributed to a sequence frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetection {
    pub sequence_id: String,
    pub frame_index: usize,
    pub detection: Detection,
}

/// Parse `sequence_id frame_index x1 y1 x2 y2 score` lines; blank lines and `#` comments are skipped.
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<FrameDetection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let frame_index = f[1].parse().map_err(|_| err(format!("bad frame index `{}`", f[1])))?;
        let mut v = [0.0f64; 5];
        for (k, s) in f[2..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| err(format!("bad number `{s}`")))?;
            if !v[k].is_finite() {
                return Err(err(format!("non-finite value `{s}`")));
            }
        }
        out.push(FrameDetection {
            sequence_id: f[0].to_string(),
            frame_index,
            detection: Detection {
                bbox: BBox::new(v[0], v[1], v[2], v[3]),
                score: v[4],
                class_id: 0,
                location: out.len(),
            },
        });
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<FrameDetection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub frames: usize,
    pub ground_truth: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_sequence: BTreeMap<String, SequenceMetrics>,
}

/// Per-frame matches for every frame of every sequence, in dataset order.
pub fn match_dataset(dets: &[FrameDetection], dataset: &[Sequence]) -> Result<Vec<(String, FrameMatch)>> {
    let index: BTreeMap<&str, &Sequence> = dataset.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut grouped: BTreeMap<(&str, usize), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        let seq = index
            .get(d.sequence_id.as_str())
            .ok_or_else(|| Error::UnknownSequence(d.sequence_id.clone()))?;
        if d.frame_index >= seq.len() {
            return Err(Error::IndexOutOfRange {
                index: d.frame_index,
                len: seq.len(),
            });
        }
        grouped.entry((seq.id.as_str(), d.frame_index)).or_default().push(d.detection);
    }
    let mut out = Vec::new();
    for seq in dataset {
        for (t, gts) in seq.annotations.iter().enumerate() {
            let frame_dets = grouped.get(&(seq.id.as_str(), t)).map_or(&[][..], |v| v.as_slice());
            out.push((seq.id.clone(), match_detections(frame_dets, gts, MATCH_IOU)));
        }
    }
    Ok(out)
}

fn summarise(matches: &[FrameMatch], conf: f64) -> (f64, PrF1) {
    (compute_map50(matches), compute_pr_f1(matches, conf))
}

pub fn evaluate(dets: &[FrameDetection], dataset: &[Sequence], conf_thresh: f64) -> Result<MetricsReport> {
    let matched = match_dataset(dets, dataset)?;
    let all: Vec<FrameMatch> = matched.iter().map(|(_, m)| m.clone()).collect();
    let (map50, p) = summarise(&all, conf_thresh);
    let mut per_sequence = BTreeMap::new();
    for seq in dataset {
        let ms: Vec<FrameMatch> = matched
            .iter()
            .filter(|(id, _)| *id == seq.id)
            .map(|(_, m)| m.clone())
            .collect();
        let (m, q) = summarise(&ms, conf_thresh);
        per_sequence.insert(
            seq.id.clone(),
            SequenceMetrics {
                map50: m,
                precision: q.precision,
                recall: q.recall,
                f1: q.f1,
                frames: ms.len(),
                ground_truth: ms.iter().map(|m| m.num_gt).sum(),
                detections: ms.iter().map(|m| m.detections.len()).sum(),
            },
        );
    }
    Ok(MetricsReport {
        map50,
        precision: p.precision,
        recall: p.recall,
        f1: p.f1,
        conf_thresh,
        iou_thresh: MATCH_IOU,
        tp: p.tp,
        fp: p.fp,
        fn_: p.fn_,
        per_sequence,
    })
}

/// Ground truth replayed as detections with score 1.
pub fn ground_truth_detections(dataset: &[Sequence]) -> Vec<FrameDetection> {
    let mut out = Vec::new();
    for seq in dataset {
        for (t, gts) in seq.annotations.iter().enumerate() {
            for (k, b) in gts.iter().enumerate() {
                out.push(FrameDetection {
                    sequence_id: seq.id.clone(),
                    frame_index: t,
                    detection: Detection {
                        bbox: *b,
                        score: 1.0,
                        class_id: 0,
                        location: k,
                    },
                });
            }
        }
    }
    out
}
