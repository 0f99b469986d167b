//! Boxes, tracklets and the positional features derived from them.
//!
//! Boxes are stored in center format (`x_c`, `y_c`, `w`, `h`) in pixels.
//! Frame indices are in sampled-frame coordinates and spans are inclusive on
//! both ends.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Width of the absolute positional feature: 4 normalized coordinates and
/// their 4 frame-to-frame offsets.
pub const ABS_POS_DIM: usize = 8;
/// Width of the relative subject-object positional feature.
pub const REL_POS_DIM: usize = 5;

/// Smallest object center coordinate used as a denominator in the relative
/// positional feature.
const MIN_CENTER_DENOM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_c: f64,
    pub y_c: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x_c: f64, y_c: f64, w: f64, h: f64) -> Self {
        Self { x_c, y_c, w, h }
    }

    /// Builds a center-format box from corner coordinates.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x_c: 0.5 * (x1 + x2),
            y_c: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.x_c - 0.5 * self.w,
            self.y_c - 0.5 * self.h,
            self.x_c + 0.5 * self.w,
            self.y_c + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x_c.is_finite()
            && self.y_c.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }
}

/// Inclusive range of frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemporalSpan {
    pub begin: usize,
    pub end: usize,
}

impl TemporalSpan {
    pub fn new(begin: usize, end: usize) -> Self {
        debug_assert!(begin <= end, "span begin {begin} > end {end}");
        Self { begin, end }
    }

    /// Number of frames covered, counting both ends.
    pub fn len(&self) -> usize {
        self.end - self.begin + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.begin <= frame && frame <= self.end
    }

    pub fn contains_span(&self, other: &TemporalSpan) -> bool {
        self.begin <= other.begin && other.end <= self.end
    }

    pub fn intersect(&self, other: &TemporalSpan) -> Option<TemporalSpan> {
        let begin = self.begin.max(other.begin);
        let end = self.end.min(other.end);
        (begin <= end).then(|| TemporalSpan::new(begin, end))
    }
}

/// One entity's boxes and visual features over consecutive sampled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub entity_id: u32,
    pub category: String,
    pub start_frame: usize,
    pub confidence: f64,
    pub boxes: Vec<BBox>,
    /// `len × C` visual features, one row per frame.
    pub features: Array2<f32>,
    /// Optional precomputed extra features, `len × C_extra`.
    pub extra: Option<Array2<f32>>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn span(&self) -> TemporalSpan {
        TemporalSpan::new(self.start_frame, self.start_frame + self.boxes.len() - 1)
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
    }

    /// Boxes restricted to `span`, which must lie within the tracklet.
    pub fn boxes_in(&self, span: &TemporalSpan) -> Result<&[BBox]> {
        if !self.span().contains_span(span) {
            return Err(Error::Precondition(format!(
                "span {}..={} outside tracklet {} extent {}..={}",
                span.begin,
                span.end,
                self.entity_id,
                self.start_frame,
                self.span().end
            )));
        }
        let lo = span.begin - self.start_frame;
        Ok(&self.boxes[lo..lo + span.len()])
    }
}

/// Frames present in both tracklets, or `None` when they are disjoint.
pub fn temporal_overlap(a: &Tracklet, b: &Tracklet) -> Option<TemporalSpan> {
    a.span().intersect(&b.span())
}

/// Per-frame absolute positional features over `span`.
///
/// Columns 0..4 are `(x_c/W, y_c/H, w/W, h/H)`; columns 4..8 hold the first
/// difference of columns 0..4 against the previous frame of the span, with
/// zeros on the first row.
pub fn abs_pos_features(
    t: &Tracklet,
    frame_w: f64,
    frame_h: f64,
    span: &TemporalSpan,
) -> Result<Array2<f64>> {
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(Error::Precondition(format!(
            "frame size must be positive, got {frame_w}x{frame_h}"
        )));
    }
    let boxes = t.boxes_in(span)?;
    let mut out = Array2::<f64>::zeros((boxes.len(), ABS_POS_DIM));
    for (i, b) in boxes.iter().enumerate() {
        let norm = [b.x_c / frame_w, b.y_c / frame_h, b.w / frame_w, b.h / frame_h];
        for (k, v) in norm.iter().enumerate() {
            out[[i, k]] = *v;
        }
        if i > 0 {
            for k in 0..4 {
                out[[i, 4 + k]] = out[[i, k]] - out[[i - 1, k]];
            }
        }
    }
    Ok(out)
}

/// Relative subject-object positional features, one row per frame:
/// `[(x_s-x_o)/x_o, (y_s-y_o)/y_o, ln(w_s/w_o), ln(h_s/h_o), ln(A_s/A_o)]`.
///
/// Object center coordinates are clamped to at least one pixel in the
/// denominators.
pub fn rel_pos_features(sub: &[BBox], obj: &[BBox]) -> Result<Array2<f64>> {
    ensure_len("rel_pos_features", sub.len(), obj.len())?;
    let mut out = Array2::<f64>::zeros((sub.len(), REL_POS_DIM));
    for (i, (s, o)) in sub.iter().zip(obj).enumerate() {
        let xo = o.x_c.max(MIN_CENTER_DENOM);
        let yo = o.y_c.max(MIN_CENTER_DENOM);
        out[[i, 0]] = (s.x_c - o.x_c) / xo;
        out[[i, 1]] = (s.y_c - o.y_c) / yo;
        out[[i, 2]] = (s.w / o.w).ln();
        out[[i, 3]] = (s.h / o.h).ln();
        out[[i, 4]] = (s.area() / o.area()).ln();
    }
    Ok(out)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
