//! Inference: pairs → per-query relation instances → ranked triplets.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};

use super::config::DataConfig;
use crate::data::{build_inference_pairs, collate, mask_to_boundaries, PairSample, VideoRecord};
use crate::detector::VrdOne;
use crate::error::Result;
use crate::geom::TemporalSpan;
use crate::metrics::files::{predicted_tracklet, PredictedRelation, PredictionFile, VideoPredictions};
use crate::nn::{sigmoid, softmax_last, Ctx};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub conf_thresh: f64,
    pub max_len: usize,
    pub batch_size: usize,
    pub topk_predicates: usize,
    pub topk_video: usize,
    pub mask_thresh: f64,
}

impl InferOptions {
    pub fn from_config(d: &DataConfig) -> Self {
        Self {
            conf_thresh: d.conf_thresh,
            max_len: d.max_len,
            batch_size: d.batch_size,
            topk_predicates: d.topk_predicates,
            topk_video: d.topk_video,
            mask_thresh: d.mask_thresh,
        }
    }
}

/// One predicted relation in sampled-frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: usize,
    pub span: TemporalSpan,
    pub score: f64,
}

/// Decodes one query: the span from its mask and the `topk` most likely
/// predicates (∅ excluded) with their probabilities.
pub fn decode_query(
    class_probs: &[f64],
    mask_probs: &[f64],
    valid: &[bool],
    topk: usize,
    mask_thresh: f64,
) -> Option<(TemporalSpan, Vec<(usize, f64)>)> {
    let span = mask_to_boundaries(mask_probs, valid, mask_thresh)?;
    let k = class_probs.len() - 1;
    let mut preds: Vec<(usize, f64)> = class_probs[..k].iter().copied().enumerate().collect();
    preds.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    preds.truncate(topk);
    Some((span, preds))
}

fn rows(t: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec3::<f64>()?)
}

fn detect_batch(model: &VrdOne, pairs: &[&PairSample], dtype: DType, opts: &InferOptions) -> Result<Vec<Detection>> {
    let min_len = pairs
        .iter()
        .map(|p| p.padded_len)
        .max()
        .unwrap_or(0)
        .max(model.encoder.min_len());
    let batch = collate(pairs, min_len, dtype, &Device::Cpu)?;
    let out = model.forward(&batch.input, &mut Ctx::eval())?.main;
    let cls = rows(&softmax_last(&out.class_logits)?)?;
    let msk = rows(&sigmoid(&out.mask_logits)?)?;
    let mut dets = Vec::new();
    for (b, pair) in pairs.iter().enumerate() {
        let valid: Vec<bool> = (0..batch.len).map(|t| t < pair.len()).collect();
        for q in 0..cls[b].len() {
            let Some((span, preds)) = decode_query(&cls[b][q], &msk[b][q], &valid, opts.topk_predicates, opts.mask_thresh)
            else {
                continue;
            };
            let abs = TemporalSpan::new(pair.span.begin + span.begin, pair.span.begin + span.end);
            dets.extend(preds.into_iter().map(|(predicate, score)| Detection {
                subject_id: pair.subject_id,
                object_id: pair.object_id,
                predicate,
                span: abs,
                score,
            }));
        }
    }
    Ok(dets)
}

/// All detections of a video, ranked and cut to `topk_video`.
pub fn detect_video(model: &VrdOne, dtype: DType, v: &VideoRecord, opts: &InferOptions) -> Result<Vec<Detection>> {
    let pairs = build_inference_pairs(v, opts.conf_thresh, opts.max_len);
    let mut dets = Vec::new();
    for bucket in [&pairs.short, &pairs.long] {
        let refs: Vec<&PairSample> = bucket.iter().collect();
        for chunk in refs.chunks(opts.batch_size) {
            dets.extend(detect_batch(model, chunk, dtype, opts)?);
        }
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.subject_id.cmp(&b.subject_id))
            .then(a.object_id.cmp(&b.object_id))
            .then(a.predicate.cmp(&b.predicate))
            .then(a.span.cmp(&b.span))
    });
    dets.truncate(opts.topk_video);
    Ok(dets)
}

pub fn predict_video(model: &VrdOne, dtype: DType, v: &VideoRecord, opts: &InferOptions) -> Result<VideoPredictions> {
    let dets = detect_video(model, dtype, v, opts)?;
    let used: BTreeSet<u32> = dets.iter().flat_map(|d| [d.subject_id, d.object_id]).collect();
    let s = v.sample_stride;
    Ok(VideoPredictions {
        video_id: v.video_id.clone(),
        sample_stride: s,
        tracklets: v
            .tracklets
            .iter()
            .filter(|t| used.contains(&t.entity_id))
            .map(|t| predicted_tracklet(t, s))
            .collect(),
        relations: dets
            .into_iter()
            .map(|d| PredictedRelation {
                subject_id: d.subject_id,
                object_id: d.object_id,
                predicate: d.predicate,
                begin: d.span.begin * s,
                end: d.span.end * s,
                score: d.score,
            })
            .collect(),
    })
}

pub fn predict(model: &VrdOne, dtype: DType, videos: &[VideoRecord], opts: &InferOptions) -> Result<PredictionFile> {
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        out.push(predict_video(model, dtype, v, opts)?);
        log::debug!("predicted {}", v.video_id);
    }
    Ok(PredictionFile::new(out))
}
