//! Relation detection and relation tagging evaluation.
//!
//! Spans are inclusive frame ranges; every count below (intersection, union,
//! span length) counts frames that way.

pub mod files;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geom::{box_iou, BBox, TemporalSpan};

/// A relation instance with its subject and object boxes over `span`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub subject_id: u32,
    pub object_id: u32,
    pub subject_category: String,
    pub object_category: String,
    pub predicate: usize,
    pub span: TemporalSpan,
    pub subject_boxes: Vec<BBox>,
    pub object_boxes: Vec<BBox>,
}

impl Triplet {
    pub fn class(&self) -> TripletClass {
        (self.subject_category.clone(), self.predicate, self.object_category.clone())
    }
}

pub type TripletClass = (String, usize, String);

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedTriplet {
    pub triplet: Triplet,
    pub score: f64,
}

/// Predictions and ground truth of one video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VideoEval {
    pub video_id: String,
    pub gts: Vec<Triplet>,
    pub preds: Vec<DetectedTriplet>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VIouDenominator {
    /// `|span_pred ∪ span_gt|`.
    #[default]
    Union,
    /// `|span_gt|`.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// AP of each video's ranked list, averaged over videos with ground truth.
    #[default]
    PerVideo,
    /// AP of each triplet class over the pooled ranking, averaged over classes.
    PerTripletClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub viou_thresh: f64,
    pub tiou_thresh: f64,
    pub viou_denominator: VIouDenominator,
    pub ap_mode: ApMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            viou_thresh: 0.5,
            tiou_thresh: 0.5,
            viou_denominator: VIouDenominator::Union,
            ap_mode: ApMode::PerVideo,
        }
    }
}

pub fn t_iou(a: &TemporalSpan, b: &TemporalSpan) -> f64 {
    let inter = a.intersect(b).map_or(0, |s| s.len());
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Volumetric IoU of two box sequences covering `span_a` and `span_b`.
pub fn v_iou(
    span_a: &TemporalSpan,
    boxes_a: &[BBox],
    span_b: &TemporalSpan,
    boxes_b: &[BBox],
    denominator: VIouDenominator,
) -> f64 {
    let overlap = span_a.intersect(span_b);
    let inter = overlap.map_or(0, |s| s.len());
    let denom = match denominator {
        VIouDenominator::Union => span_a.len() + span_b.len() - inter,
        VIouDenominator::GroundTruth => span_b.len(),
    };
    let Some(o) = overlap else {
        return 0.0;
    };
    let sum: f64 = (o.begin..=o.end)
        .map(|t| box_iou(&boxes_a[t - span_a.begin], &boxes_b[t - span_b.begin]))
        .sum();
    sum / denom as f64
}

fn ranking_order(a: &DetectedTriplet, b: &DetectedTriplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.triplet.subject_id.cmp(&b.triplet.subject_id))
        .then(a.triplet.object_id.cmp(&b.triplet.object_id))
        .then(a.triplet.predicate.cmp(&b.triplet.predicate))
        .then(a.triplet.span.cmp(&b.triplet.span))
}

/// Predictions sorted by descending score with deterministic tie-breaking.
pub fn ranked(preds: &[DetectedTriplet]) -> Vec<&DetectedTriplet> {
    let mut out: Vec<&DetectedTriplet> = preds.iter().collect();
    out.sort_by(|a, b| ranking_order(a, b));
    out
}

/// Greedy matching of ranked predictions to ground truth. Returns one
/// true-positive flag per ranked prediction.
pub fn match_video(ranked: &[&DetectedTriplet], gts: &[Triplet], opts: &EvalOptions) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|p| {
            let p = &p.triplet;
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class() != p.class() {
                    continue;
                }
                if t_iou(&p.span, &g.span) <= opts.tiou_thresh {
                    continue;
                }
                let vs = v_iou(&p.span, &p.subject_boxes, &g.span, &g.subject_boxes, opts.viou_denominator);
                let vo = v_iou(&p.span, &p.object_boxes, &g.span, &g.object_boxes, opts.viou_denominator);
                if vs <= opts.viou_thresh || vo <= opts.viou_thresh {
                    continue;
                }
                let ov = vs.min(vo);
                if best.is_none_or(|(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// All-point interpolated average precision of a ranked list of
/// true-positive flags against `num_gt` positives.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(tp.len() + 2);
    let mut prec = Vec::with_capacity(tp.len() + 2);
    rec.push(0.0);
    prec.push(0.0);
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        rec.push(hits as f64 / num_gt as f64);
        prec.push(hits as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelDetResult {
    pub map: f64,
    pub recall_50: f64,
    pub recall_100: f64,
    /// Videos with at least one ground-truth relation.
    pub videos: usize,
}

/// Relation detection mAP and recall at 50 and 100. Videos without ground
/// truth carry no positives and are left out of every average.
pub fn eval_reldet(videos: &[VideoEval], opts: &EvalOptions) -> RelDetResult {
    let mut aps = Vec::new();
    let (mut r50, mut r100) = (0.0, 0.0);
    let mut pooled: BTreeMap<TripletClass, (Vec<(f64, bool)>, usize)> = BTreeMap::new();
    for v in videos {
        let order = ranked(&v.preds);
        let tp = match_video(&order, &v.gts, opts);
        for g in &v.gts {
            pooled.entry(g.class()).or_default().1 += 1;
        }
        for (p, &t) in order.iter().zip(&tp) {
            pooled.entry(p.triplet.class()).or_default().0.push((p.score, t));
        }
        if v.gts.is_empty() {
            continue;
        }
        aps.push(average_precision(&tp, v.gts.len()));
        let recall = |k: usize| tp.iter().take(k).filter(|&&t| t).count() as f64 / v.gts.len() as f64;
        r50 += recall(50);
        r100 += recall(100);
    }
    let n = aps.len();
    if n == 0 {
        return RelDetResult::default();
    }
    let map = match opts.ap_mode {
        ApMode::PerVideo => aps.iter().sum::<f64>() / n as f64,
        ApMode::PerTripletClass => {
            let per_class: Vec<f64> = pooled
                .into_values()
                .filter(|(_, num_gt)| *num_gt > 0)
                .map(|(mut hits, num_gt)| {
                    // stable sort keeps the per-video ranking among equal scores
                    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
                    let tp: Vec<bool> = hits.iter().map(|h| h.1).collect();
                    average_precision(&tp, num_gt)
                })
                .collect();
            per_class.iter().sum::<f64>() / per_class.len() as f64
        }
    };
    RelDetResult {
        map,
        recall_50: r50 / n as f64,
        recall_100: r100 / n as f64,
        videos: n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelTagResult {
    pub precision_1: f64,
    pub precision_5: f64,
    pub precision_10: f64,
}

/// Precision of the top-K distinct predicted triplet classes, averaged over
/// videos. Missing slots below K count as misses; a video without ground
/// truth scores zero.
pub fn eval_reltag(videos: &[VideoEval]) -> RelTagResult {
    if videos.is_empty() {
        return RelTagResult::default();
    }
    let mut sums = [0.0; 3];
    for v in videos {
        let gt: BTreeSet<TripletClass> = v.gts.iter().map(Triplet::class).collect();
        let mut seen = BTreeSet::new();
        let classes: Vec<TripletClass> = ranked(&v.preds)
            .into_iter()
            .map(|p| p.triplet.class())
            .filter(|c| seen.insert(c.clone()))
            .collect();
        for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
            let hits = classes.iter().take(k).filter(|c| gt.contains(*c)).count();
            sums[slot] += hits as f64 / k as f64;
        }
    }
    let n = videos.len() as f64;
    RelTagResult {
        precision_1: sums[0] / n,
        precision_5: sums[1] / n,
        precision_10: sums[2] / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub reldet_map: f64,
    pub reldet_r50: f64,
    pub reldet_r100: f64,
    pub reltag_p1: f64,
    pub reltag_p5: f64,
    pub reltag_p10: f64,
}

pub fn evaluate(videos: &[VideoEval], opts: &EvalOptions) -> EvalReport {
    let det = eval_reldet(videos, opts);
    let tag = eval_reltag(videos);
    EvalReport {
        reldet_map: det.map,
        reldet_r50: det.recall_50,
        reldet_r100: det.recall_100,
        reltag_p1: tag.precision_1,
        reltag_p5: tag.precision_5,
        reltag_p10: tag.precision_10,
    }
}

impl EvalReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.reldet_map,
            self.reldet_r50,
            self.reldet_r100,
            self.reltag_p1,
            self.reltag_p5,
            self.reltag_p10,
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| {:^26} | {:^26} |", "Relation Detection", "Relation Tagging")?;
        writeln!(
            f,
            "| {:>7} {:>8} {:>9} | {:>7} {:>8} {:>9} |",
            "mAP", "R@50", "R@100", "P@1", "P@5", "P@10"
        )?;
        let v = self.values().map(|x| x * 100.0);
        write!(
            f,
            "| {:>7.2} {:>8.2} {:>9.2} | {:>7.2} {:>8.2} {:>9.2} |",
            v[0], v[1], v[2], v[3], v[4], v[5]
        )
    }
}
