//! Prediction file format and assembly of per-video evaluation inputs.
//!
//! A prediction file is a JSON document listing, per video, the tracklets
//! referenced by its relations and the scored relations themselves. Frame
//! indices are raw video frames, as in manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectedTriplet, Triplet, VideoEval};
use crate::data::io::{read_json, write_json};
use crate::data::VideoRecord;
use crate::error::{Error, Result};
use crate::geom::{BBox, TemporalSpan, Tracklet};

pub const PREDICTION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedTracklet {
    pub entity_id: u32,
    pub category: String,
    pub start_frame: usize,
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedRelation {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: usize,
    pub begin: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoPredictions {
    pub video_id: String,
    pub sample_stride: usize,
    pub tracklets: Vec<PredictedTracklet>,
    pub relations: Vec<PredictedRelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub version: u32,
    pub videos: Vec<VideoPredictions>,
}

impl PredictionFile {
    pub fn new(videos: Vec<VideoPredictions>) -> Self {
        Self {
            version: PREDICTION_VERSION,
            videos,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        if f.version != PREDICTION_VERSION {
            return Err(Error::schema(
                "version",
                format!("unsupported prediction file version {}", f.version),
            ));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn predicted_tracklet(t: &Tracklet, stride: usize) -> PredictedTracklet {
    PredictedTracklet {
        entity_id: t.entity_id,
        category: t.category.clone(),
        start_frame: t.start_frame * stride,
        boxes: t.boxes.iter().map(|b| [b.x_c, b.y_c, b.w, b.h]).collect(),
    }
}

struct Track<'a> {
    category: &'a str,
    start: usize,
    boxes: Vec<BBox>,
}

impl Track<'_> {
    fn slice(&self, span: &TemporalSpan) -> Option<Vec<BBox>> {
        let lo = span.begin.checked_sub(self.start)?;
        let hi = lo + span.len();
        (hi <= self.boxes.len()).then(|| self.boxes[lo..hi].to_vec())
    }
}

fn triplet(
    tracks: &BTreeMap<u32, Track>,
    subject_id: u32,
    object_id: u32,
    predicate: usize,
    span: TemporalSpan,
    at: &str,
) -> Result<Triplet> {
    let get = |id: u32| {
        tracks
            .get(&id)
            .ok_or_else(|| Error::schema(at.to_string(), format!("unknown tracklet {id}")))
    };
    let (s, o) = (get(subject_id)?, get(object_id)?);
    let outside = || Error::schema(at.to_string(), "span outside the referenced tracklets");
    Ok(Triplet {
        subject_id,
        object_id,
        subject_category: s.category.to_string(),
        object_category: o.category.to_string(),
        predicate,
        span,
        subject_boxes: s.slice(&span).ok_or_else(outside)?,
        object_boxes: o.slice(&span).ok_or_else(outside)?,
    })
}

fn gt_eval(v: &VideoRecord) -> Result<Vec<Triplet>> {
    let tracks: BTreeMap<u32, Track> = v
        .tracklets
        .iter()
        .map(|t| {
            (
                t.entity_id,
                Track {
                    category: &t.category,
                    start: t.start_frame,
                    boxes: t.boxes.clone(),
                },
            )
        })
        .collect();
    v.relations
        .iter()
        .enumerate()
        .map(|(i, r)| {
            triplet(
                &tracks,
                r.subject_id,
                r.object_id,
                r.predicate,
                r.span,
                &format!("{}: relations[{i}]", v.video_id),
            )
        })
        .collect()
}

fn pred_eval(p: &VideoPredictions) -> Result<Vec<DetectedTriplet>> {
    let stride = p.sample_stride.max(1);
    let tracks: BTreeMap<u32, Track> = p
        .tracklets
        .iter()
        .map(|t| {
            (
                t.entity_id,
                Track {
                    category: &t.category,
                    start: t.start_frame / stride,
                    boxes: t.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
                },
            )
        })
        .collect();
    p.relations
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let at = format!("{}: relations[{i}]", p.video_id);
            if r.begin > r.end || !r.score.is_finite() {
                return Err(Error::schema(at, "invalid span or score"));
            }
            let span = TemporalSpan::new(r.begin / stride, r.end / stride);
            Ok(DetectedTriplet {
                triplet: triplet(&tracks, r.subject_id, r.object_id, r.predicate, span, &at)?,
                score: r.score,
            })
        })
        .collect()
}

/// Pairs predictions with ground truth video by video. A prediction file
/// with no videos evaluates every ground-truth video with empty predictions;
/// otherwise both sides must cover the same video ids.
pub fn assemble(preds: &PredictionFile, gts: &[VideoRecord]) -> Result<Vec<VideoEval>> {
    let by_id: BTreeMap<&str, &VideoPredictions> =
        preds.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    if by_id.len() != preds.videos.len() {
        return Err(Error::Eval("duplicate video ids in prediction file".into()));
    }
    if !preds.videos.is_empty() {
        let gt_ids: BTreeSet<&str> = gts.iter().map(|v| v.video_id.as_str()).collect();
        let pred_ids: BTreeSet<&str> = by_id.keys().copied().collect();
        let missing: Vec<&str> = gt_ids.difference(&pred_ids).copied().collect();
        let extra: Vec<&str> = pred_ids.difference(&gt_ids).copied().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Eval(format!(
                "video id mismatch; missing from predictions: [{}]; not in ground truth: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
    }
    gts.iter()
        .map(|g| {
            Ok(VideoEval {
                video_id: g.video_id.clone(),
                gts: gt_eval(g)?,
                preds: match by_id.get(g.video_id.as_str()) {
                    Some(p) => pred_eval(p)?,
                    None => Vec::new(),
                },
            })
        })
        .collect()
}

/// Predictions identical to the annotations of `v`, each with score 1.
pub fn oracle_predictions(v: &VideoRecord) -> VideoPredictions {
    VideoPredictions {
        video_id: v.video_id.clone(),
        sample_stride: v.sample_stride,
        tracklets: v
            .tracklets
            .iter()
            .map(|t| predicted_tracklet(t, v.sample_stride))
            .collect(),
        relations: v
            .relations
            .iter()
            .map(|r| PredictedRelation {
                subject_id: r.subject_id,
                object_id: r.object_id,
                predicate: r.predicate,
                begin: r.span.begin * v.sample_stride,
                end: r.span.end * v.sample_stride,
                score: 1.0,
            })
            .collect(),
    }
}
