//! Videos, relation annotations and the subject-object pair samples fed to
//! the model.

pub mod io;
pub mod synth;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bsa::BsaInput;
use crate::error::{Error, Result};
use crate::geom::{abs_pos_features, rel_pos_features, temporal_overlap, TemporalSpan, Tracklet};
use crate::loss::GroundTruthSet;

/// Relations shorter than this after cropping are discarded, unless the
/// relation was already shorter before the crop.
pub const MIN_CROPPED_RELATION_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: usize,
    pub span: TemporalSpan,
}

/// One video: frame geometry, entity tracklets and (for training and
/// evaluation) relation annotations. Frame indices are sampled-frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_w: f64,
    pub frame_h: f64,
    pub sample_stride: usize,
    pub tracklets: Vec<Tracklet>,
    pub relations: Vec<RelationAnnotation>,
}

impl VideoRecord {
    pub fn tracklet(&self, entity_id: u32) -> Option<&Tracklet> {
        self.tracklets.iter().find(|t| t.entity_id == entity_id)
    }
}

/// Model input for one ordered subject-object pair over `span`. Matrices hold
/// `span.len()` rows; `padded_len` is the timeline length the pair is padded
/// to when batched on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub video_id: String,
    pub subject_id: u32,
    pub object_id: u32,
    pub span: TemporalSpan,
    pub padded_len: usize,
    pub features_s: Array2<f32>,
    pub features_o: Array2<f32>,
    pub extra_s: Option<Array2<f32>>,
    pub extra_o: Option<Array2<f32>>,
    pub theta_a_s: Array2<f32>,
    pub theta_a_o: Array2<f32>,
    pub theta_r: Array2<f32>,
    /// Ground truth with masks over the `span.len()` valid frames.
    pub gt: Option<GroundTruthSet>,
}

impl PairSample {
    pub fn len(&self) -> usize {
        self.span.len()
    }

    pub fn is_empty(&self) -> bool {
        self.span.is_empty()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.padded_len.max(self.len())).map(|t| t < self.len()).collect()
    }
}

/// Binary mask of `span` over the frames of `window`.
pub fn rasterize(span: &TemporalSpan, window: &TemporalSpan) -> Vec<f32> {
    (window.begin..=window.end)
        .map(|t| if span.contains(t) { 1.0 } else { 0.0 })
        .collect()
}

/// First and last valid frame whose probability exceeds `thresh`; interior
/// gaps are kept inside the span.
pub fn mask_to_boundaries(probs: &[f64], valid: &[bool], thresh: f64) -> Option<TemporalSpan> {
    let hit = |t: &usize| valid.get(*t).copied().unwrap_or(false) && probs[*t] > thresh;
    let first = (0..probs.len()).find(hit)?;
    let last = (0..probs.len()).rev().find(hit)?;
    Some(TemporalSpan::new(first, last))
}

fn to_f32(a: Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

/// Assembles features for the pair `(sub, obj)` over `span`, which must lie
/// in both tracklets.
pub fn assemble_pair(
    v: &VideoRecord,
    sub: &Tracklet,
    obj: &Tracklet,
    span: TemporalSpan,
    padded_len: usize,
) -> Result<PairSample> {
    let rows = |t: &Tracklet, m: &Array2<f32>, what: &str| -> Result<Array2<f32>> {
        if m.nrows() != t.len() {
            return Err(Error::Precondition(format!(
                "tracklet {} of {} has {} {what} rows for {} frames",
                t.entity_id,
                v.video_id,
                m.nrows(),
                t.len()
            )));
        }
        let lo = span.begin - t.start_frame;
        Ok(m.slice(s![lo..lo + span.len(), ..]).to_owned())
    };
    let features_s = rows(sub, &sub.features, "feature")?;
    let features_o = rows(obj, &obj.features, "feature")?;
    let (extra_s, extra_o) = match (&sub.extra, &obj.extra) {
        (Some(a), Some(b)) => (Some(rows(sub, a, "extra")?), Some(rows(obj, b, "extra")?)),
        _ => (None, None),
    };
    let theta_a_s = to_f32(abs_pos_features(sub, v.frame_w, v.frame_h, &span)?);
    let theta_a_o = to_f32(abs_pos_features(obj, v.frame_w, v.frame_h, &span)?);
    let theta_r = to_f32(rel_pos_features(sub.boxes_in(&span)?, obj.boxes_in(&span)?)?);
    Ok(PairSample {
        video_id: v.video_id.clone(),
        subject_id: sub.entity_id,
        object_id: obj.entity_id,
        span,
        padded_len: padded_len.max(span.len()),
        features_s,
        features_o,
        extra_s,
        extra_o,
        theta_a_s,
        theta_a_o,
        theta_r,
        gt: None,
    })
}

/// Training pairs of one video: every annotated subject-object pair whose
/// tracklets overlap, cropped to `max_len` frames at a random offset drawn
/// from `rng`. Relations longer than `2 · max_len` are ignored, pairs with
/// more than `num_queries` remaining relations are skipped, and relations
/// partially outside the crop are clipped. The set of pairs returned does not
/// depend on `rng`.
pub fn build_training_pairs<R: Rng>(
    v: &VideoRecord,
    max_len: usize,
    num_queries: usize,
    rng: &mut R,
) -> Result<Vec<PairSample>> {
    let mut groups: BTreeMap<(u32, u32), Vec<&RelationAnnotation>> = BTreeMap::new();
    for r in &v.relations {
        groups.entry((r.subject_id, r.object_id)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((s, o), rels) in groups {
        let (Some(sub), Some(obj)) = (v.tracklet(s), v.tracklet(o)) else {
            return Err(Error::Precondition(format!(
                "relation references missing tracklet in {}",
                v.video_id
            )));
        };
        let Some(overlap) = temporal_overlap(sub, obj) else {
            continue;
        };
        let eligible = rels.iter().filter(|r| r.span.len() <= 2 * max_len).count();
        if eligible > num_queries {
            continue;
        }
        let window = if overlap.len() > max_len {
            let begin = rng.random_range(overlap.begin..=overlap.end + 1 - max_len);
            TemporalSpan::new(begin, begin + max_len - 1)
        } else {
            overlap
        };
        let mut kept: Vec<(usize, TemporalSpan)> = rels
            .iter()
            .filter(|r| r.span.len() <= 2 * max_len)
            .filter_map(|r| {
                let clipped = r.span.intersect(&window)?;
                (clipped.len() >= MIN_CROPPED_RELATION_LEN.min(r.span.len()))
                    .then_some((r.predicate, clipped))
            })
            .collect();
        kept.sort();
        let mut pair = assemble_pair(v, sub, obj, window, max_len)?;
        let mut masks = Array2::zeros((kept.len(), window.len()));
        for (j, (_, span)) in kept.iter().enumerate() {
            for (t, m) in rasterize(span, &window).into_iter().enumerate() {
                masks[[j, t]] = m;
            }
        }
        pair.gt = Some(GroundTruthSet::new(kept.iter().map(|k| k.0).collect(), masks)?);
        out.push(pair);
    }
    Ok(out)
}

/// Inference pairs split into those fitting in `max_len` frames and longer
/// ones, which are padded to the longest among them.
#[derive(Debug, Clone, Default)]
pub struct InferencePairs {
    pub short: Vec<PairSample>,
    pub long: Vec<PairSample>,
}

impl InferencePairs {
    pub fn len(&self) -> usize {
        self.short.len() + self.long.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All ordered pairs of distinct tracklets with confidence above
/// `conf_thresh` and overlapping extents. Pairs whose features are missing
/// are skipped with a warning.
pub fn build_inference_pairs(v: &VideoRecord, conf_thresh: f64, max_len: usize) -> InferencePairs {
    let kept: Vec<&Tracklet> = v
        .tracklets
        .iter()
        .filter(|t| t.confidence > conf_thresh)
        .collect();
    let mut pairs = InferencePairs::default();
    for sub in &kept {
        for obj in &kept {
            if sub.entity_id == obj.entity_id {
                continue;
            }
            let Some(overlap) = temporal_overlap(sub, obj) else {
                continue;
            };
            match assemble_pair(v, sub, obj, overlap, max_len) {
                Ok(p) if overlap.len() <= max_len => pairs.short.push(p),
                Ok(p) => pairs.long.push(p),
                Err(e) => log::warn!("skipping pair ({}, {}): {e}", sub.entity_id, obj.entity_id),
            }
        }
    }
    let longest = pairs.long.iter().map(|p| p.len()).max().unwrap_or(0);
    for p in &mut pairs.long {
        p.padded_len = longest;
    }
    pairs
}

/// A padded batch of pairs ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: BsaInput,
    pub gts: Vec<GroundTruthSet>,
    pub len: usize,
}

/// Stacks pairs into `B × L × ·` tensors with
/// `L = max(min_len, longest pair)`; features are zero-padded. Ground-truth
/// sets are padded alongside when every pair carries one.
pub fn collate(pairs: &[&PairSample], min_len: usize, dtype: DType, device: &Device) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::Precondition("cannot collate an empty batch".into()));
    }
    let len = pairs.iter().map(|p| p.len()).max().unwrap_or(0).max(min_len);
    let stack = |get: &dyn Fn(&PairSample) -> &Array2<f32>| -> Result<Tensor> {
        let width = get(pairs[0]).ncols();
        let mut buf = vec![0f32; pairs.len() * len * width];
        for (b, p) in pairs.iter().enumerate() {
            let m = get(p);
            if m.ncols() != width {
                return Err(Error::LengthMismatch {
                    context: "feature width within batch",
                    left: width,
                    right: m.ncols(),
                });
            }
            for (t, row) in m.outer_iter().enumerate() {
                let off = (b * len + t) * width;
                for (k, v) in row.iter().enumerate() {
                    buf[off + k] = *v;
                }
            }
        }
        Ok(Tensor::from_vec(buf, (pairs.len(), len, width), device)?.to_dtype(dtype)?)
    };
    let has_extra = pairs.iter().all(|p| p.extra_s.is_some() && p.extra_o.is_some());
    let (extra_s, extra_o) = if has_extra {
        (
            Some(stack(&|p| p.extra_s.as_ref().expect("checked above"))?),
            Some(stack(&|p| p.extra_o.as_ref().expect("checked above"))?),
        )
    } else {
        (None, None)
    };
    let mut valid = vec![0f32; pairs.len() * len];
    for (b, p) in pairs.iter().enumerate() {
        for t in 0..p.len() {
            valid[b * len + t] = 1.0;
        }
    }
    let input = BsaInput {
        features_s: stack(&|p| &p.features_s)?,
        features_o: stack(&|p| &p.features_o)?,
        extra_s,
        extra_o,
        theta_a_s: stack(&|p| &p.theta_a_s)?,
        theta_a_o: stack(&|p| &p.theta_a_o)?,
        theta_r: stack(&|p| &p.theta_r)?,
        valid: Tensor::from_vec(valid, (pairs.len(), len), device)?.to_dtype(dtype)?,
    };
    let gts = if pairs.iter().all(|p| p.gt.is_some()) {
        pairs
            .iter()
            .map(|p| {
                let gt = p.gt.as_ref().expect("checked above");
                let mut masks = Array2::zeros((gt.len(), len));
                masks.slice_mut(s![.., ..gt.timeline_len()]).assign(&gt.masks);
                GroundTruthSet::new(gt.classes.clone(), masks)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Batch { input, gts, len })
}
