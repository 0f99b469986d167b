//! Procedural videos whose relation labels follow exactly from box geometry.
//!
//! Entities move with piecewise-constant velocity and growth rate, bouncing
//! off the frame border. Relations are maximal runs of frames where a
//! geometric predicate holds, at least `min_relation_len` frames long.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{DatasetInfo, SCHEMA_VERSION};
use super::{RelationAnnotation, VideoRecord};
use crate::error::{Error, Result};
use crate::geom::{temporal_overlap, BBox, TemporalSpan, Tracklet};

pub const PREDICATES: [&str; 8] = [
    "left_of",
    "right_of",
    "above",
    "below",
    "larger",
    "smaller",
    "approaching",
    "departing",
];

const MIN_SIZE: f64 = 8.0;
const MAX_SIZE: f64 = 140.0;
/// Geometry columns appended after the category one-hot in each feature row.
const GEOMETRY_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub frame_w: f64,
    pub frame_h: f64,
    pub sample_stride: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub categories: Vec<String>,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Relative jitter applied to the stored boxes; labels always come from
    /// the clean trajectories.
    pub box_noise: f64,
    pub min_relation_len: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Largest per-frame speed in pixels.
    pub max_speed: f64,
    /// Probability that an entity is visible for only part of the video.
    pub partial_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 20,
            frame_w: 320.0,
            frame_h: 240.0,
            sample_stride: 4,
            min_frames: 32,
            max_frames: 64,
            min_entities: 2,
            max_entities: 3,
            categories: ["person", "dog", "car", "ball"].map(String::from).to_vec(),
            feature_dim: 32,
            feature_noise: 0.05,
            box_noise: 0.0,
            min_relation_len: 3,
            min_segment: 8,
            max_segment: 32,
            max_speed: 4.0,
            partial_prob: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return bad("need 2 <= min_frames <= max_frames");
        }
        if self.min_entities < 1 || self.min_entities > self.max_entities {
            return bad("need 1 <= min_entities <= max_entities");
        }
        if self.categories.is_empty() {
            return bad("categories must not be empty");
        }
        if self.feature_dim < self.categories.len() + GEOMETRY_DIM {
            return bad("feature_dim must hold the category one-hot plus 8 geometry columns");
        }
        if !(self.frame_w > 2.0 * MAX_SIZE && self.frame_h > 2.0 * MAX_SIZE / 2.0) {
            return bad("frame too small");
        }
        if self.sample_stride == 0 || self.min_relation_len == 0 {
            return bad("sample_stride and min_relation_len must be positive");
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return bad("need 1 <= min_segment <= max_segment");
        }
        if self.feature_noise < 0.0 || self.box_noise < 0.0 || self.max_speed < 0.0 {
            return bad("noise levels and speed must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.partial_prob) {
            return bad("partial_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn dataset_info(&self) -> DatasetInfo {
        DatasetInfo {
            schema_version: SCHEMA_VERSION,
            predicates: PREDICATES.map(String::from).to_vec(),
            categories: self.categories.clone(),
        }
    }
}

/// Maximal runs of `true` at least `min_len` long, as spans offset by `base`.
fn runs(flags: &[bool], min_len: usize, base: usize) -> Vec<TemporalSpan> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_len {
                    out.push(TemporalSpan::new(base + s, base + i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Maximal runs where `d` is strictly monotone in the given direction. A
/// run covers frames `a..=b` with every step `t-1 → t` in `a+1..=b`
/// satisfying the comparison.
fn monotone_runs(d: &[f64], decreasing: bool, min_len: usize, base: usize) -> Vec<TemporalSpan> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=d.len() {
        let continues = t < d.len() && if decreasing { d[t] < d[t - 1] } else { d[t] > d[t - 1] };
        if !continues {
            if t - start >= min_len && t - start >= 2 {
                out.push(TemporalSpan::new(base + start, base + t - 1));
            }
            start = t;
        }
    }
    out
}

/// Relations between `sub` and `obj` over their common frames, derived from
/// the given box sequences (`boxes_*[0]` is the first overlapping frame).
pub fn derive_pair_relations(
    sub: &[BBox],
    obj: &[BBox],
    overlap: TemporalSpan,
    min_len: usize,
) -> Vec<(usize, TemporalSpan)> {
    let pred = |f: &dyn Fn(&BBox, &BBox) -> bool| -> Vec<bool> {
        sub.iter().zip(obj).map(|(s, o)| f(s, o)).collect()
    };
    let base = overlap.begin;
    let mut out = Vec::new();
    let flags: [Vec<bool>; 6] = [
        pred(&|s, o| s.x_c < o.x_c),
        pred(&|s, o| s.x_c > o.x_c),
        pred(&|s, o| s.y_c < o.y_c),
        pred(&|s, o| s.y_c > o.y_c),
        pred(&|s, o| s.area() > 2.0 * o.area()),
        pred(&|s, o| 2.0 * s.area() < o.area()),
    ];
    for (p, f) in flags.iter().enumerate() {
        out.extend(runs(f, min_len, base).into_iter().map(|s| (p, s)));
    }
    let dist: Vec<f64> = sub
        .iter()
        .zip(obj)
        .map(|(s, o)| (s.x_c - o.x_c).hypot(s.y_c - o.y_c))
        .collect();
    out.extend(monotone_runs(&dist, true, min_len, base).into_iter().map(|s| (6, s)));
    out.extend(monotone_runs(&dist, false, min_len, base).into_iter().map(|s| (7, s)));
    out
}

/// Relations of every ordered tracklet pair of a video, sorted.
pub fn derive_relations(tracklets: &[Tracklet], min_len: usize) -> Vec<RelationAnnotation> {
    let mut out = Vec::new();
    for s in tracklets {
        for o in tracklets {
            if s.entity_id == o.entity_id {
                continue;
            }
            let Some(overlap) = temporal_overlap(s, o) else {
                continue;
            };
            let sb = s.boxes_in(&overlap).expect("overlap inside tracklet");
            let ob = o.boxes_in(&overlap).expect("overlap inside tracklet");
            for (predicate, span) in derive_pair_relations(sb, ob, overlap, min_len) {
                out.push(RelationAnnotation {
                    subject_id: s.entity_id,
                    object_id: o.entity_id,
                    predicate,
                    span,
                });
            }
        }
    }
    out.sort();
    out
}

fn trajectory(rng: &mut ChaCha8Rng, cfg: &SynthConfig, len: usize) -> Vec<BBox> {
    let (fw, fh) = (cfg.frame_w, cfg.frame_h);
    let mut w = rng.random_range(16.0..96.0);
    let mut h = rng.random_range(16.0..MAX_SIZE / 2.0);
    let mut x = rng.random_range(w / 2.0..fw - w / 2.0);
    let mut y = rng.random_range(h / 2.0..fh - h / 2.0);
    let mut boxes = Vec::with_capacity(len);
    let (mut vx, mut vy, mut g) = (0.0, 0.0, 0.0);
    let mut left = 0;
    for _ in 0..len {
        if left == 0 {
            left = rng.random_range(cfg.min_segment..=cfg.max_segment);
            if rng.random_bool(0.2) {
                (vx, vy) = (0.0, 0.0);
            } else {
                vx = rng.random_range(-cfg.max_speed..=cfg.max_speed);
                vy = rng.random_range(-cfg.max_speed..=cfg.max_speed);
            }
            g = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-0.03..0.03) };
        }
        left -= 1;
        boxes.push(BBox::new(x, y, w, h));
        w = (w * (1.0 + g)).clamp(MIN_SIZE, MAX_SIZE);
        h = (h * (1.0 + g)).clamp(MIN_SIZE, MAX_SIZE / 2.0);
        x += vx;
        y += vy;
        if x < w / 2.0 || x > fw - w / 2.0 {
            vx = -vx;
            x = x.clamp(w / 2.0, fw - w / 2.0);
        }
        if y < h / 2.0 || y > fh - h / 2.0 {
            vy = -vy;
            y = y.clamp(h / 2.0, fh - h / 2.0);
        }
    }
    boxes
}

fn features(rng: &mut ChaCha8Rng, cfg: &SynthConfig, category: usize, boxes: &[BBox]) -> Array2<f32> {
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("valid std");
    let n_cat = cfg.categories.len();
    let mut out = Array2::<f32>::zeros((boxes.len(), cfg.feature_dim));
    for (t, b) in boxes.iter().enumerate() {
        let prev = if t > 0 { &boxes[t - 1] } else { b };
        let geo = [
            b.x_c / cfg.frame_w,
            b.y_c / cfg.frame_h,
            b.w / cfg.frame_w,
            b.h / cfg.frame_h,
            (b.x_c - prev.x_c) / cfg.max_speed.max(1.0),
            (b.y_c - prev.y_c) / cfg.max_speed.max(1.0),
            (b.w / prev.w).ln() * 10.0,
            (b.h / prev.h).ln() * 10.0,
        ];
        for k in 0..cfg.feature_dim {
            let clean = if k < n_cat {
                (k == category) as u8 as f64
            } else if k < n_cat + GEOMETRY_DIM {
                geo[k - n_cat]
            } else {
                0.0
            };
            out[[t, k]] = (clean + noise.sample(rng)) as f32;
        }
    }
    out
}

fn jitter(rng: &mut ChaCha8Rng, level: f64, b: &BBox) -> BBox {
    if level == 0.0 {
        return *b;
    }
    let n = Normal::new(0.0, level).expect("valid std");
    BBox::new(
        b.x_c + n.sample(rng) * b.w,
        b.y_c + n.sample(rng) * b.h,
        b.w * n.sample(rng).exp(),
        b.h * n.sample(rng).exp(),
    )
}

/// Generates video `index` of the corpus described by `cfg`.
pub fn generate_video(cfg: &SynthConfig, index: usize) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let len = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let n = rng.random_range(cfg.min_entities..=cfg.max_entities);
    let mut clean = Vec::with_capacity(n);
    let mut tracklets = Vec::with_capacity(n);
    for id in 0..n {
        let (start, end) = if rng.random_bool(cfg.partial_prob) && len >= 6 {
            (rng.random_range(0..len / 3), rng.random_range(2 * len / 3..len))
        } else {
            (0, len - 1)
        };
        let boxes = trajectory(&mut rng, cfg, end - start + 1);
        let category = rng.random_range(0..cfg.categories.len());
        let feats = features(&mut rng, cfg, category, &boxes);
        let stored: Vec<BBox> = boxes.iter().map(|b| jitter(&mut rng, cfg.box_noise, b)).collect();
        clean.push(Tracklet {
            entity_id: id as u32,
            category: cfg.categories[category].clone(),
            start_frame: start,
            confidence: 1.0,
            boxes,
            features: Array2::zeros((0, 0)),
            extra: None,
        });
        tracklets.push(Tracklet {
            entity_id: id as u32,
            category: cfg.categories[category].clone(),
            start_frame: start,
            confidence: 1.0,
            boxes: stored,
            features: feats,
            extra: None,
        });
    }
    VideoRecord {
        video_id: format!("synth_{:05}", index),
        frame_w: cfg.frame_w,
        frame_h: cfg.frame_h,
        sample_stride: cfg.sample_stride,
        relations: derive_relations(&clean, cfg.min_relation_len),
        tracklets,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<VideoRecord>> {
    cfg.validate()?;
    Ok((0..cfg.num_videos).map(|i| generate_video(cfg, i)).collect())
}

/// Predicate counts and the distribution of relation duration as a fraction
/// of the pair's overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub videos: usize,
    pub relations: usize,
    pub predicate_counts: Vec<usize>,
    /// Ten bins over (0, 1] of duration / overlap.
    pub duration_histogram: [usize; 10],
    pub short_lived: usize,
    pub enduring: usize,
}

pub fn corpus_stats(videos: &[VideoRecord], num_predicates: usize) -> CorpusStats {
    let mut stats = CorpusStats {
        videos: videos.len(),
        relations: 0,
        predicate_counts: vec![0; num_predicates],
        duration_histogram: [0; 10],
        short_lived: 0,
        enduring: 0,
    };
    for v in videos {
        for r in &v.relations {
            let (Some(s), Some(o)) = (v.tracklet(r.subject_id), v.tracklet(r.object_id)) else {
                continue;
            };
            let Some(overlap) = temporal_overlap(s, o) else {
                continue;
            };
            stats.relations += 1;
            if let Some(c) = stats.predicate_counts.get_mut(r.predicate) {
                *c += 1;
            }
            let frac = r.span.len() as f64 / overlap.len() as f64;
            let bin = ((frac * 10.0).ceil() as usize).clamp(1, 10) - 1;
            stats.duration_histogram[bin] += 1;
            stats.short_lived += (frac < 0.1) as usize;
            stats.enduring += (frac > 0.8) as usize;
        }
    }
    stats
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "videos: {}  relations: {}", self.videos, self.relations)?;
        for (p, c) in self.predicate_counts.iter().enumerate() {
            let name = PREDICATES.get(p).copied().unwrap_or("?");
            writeln!(f, "  {name:<12} {c}")?;
        }
        writeln!(f, "duration / overlap:")?;
        let peak = self.duration_histogram.iter().copied().max().unwrap_or(1).max(1);
        for (i, c) in self.duration_histogram.iter().enumerate() {
            let bar = "#".repeat((40 * c).div_ceil(peak));
            writeln!(f, "  ({:.1}, {:.1}] {c:>6} {bar}", i as f64 / 10.0, (i + 1) as f64 / 10.0)?;
        }
        write!(f, "short-lived (<10%): {}  enduring (>80%): {}", self.short_lived, self.enduring)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_track(id: u32, x: f64, len: usize) -> Tracklet {
        Tracklet {
            entity_id: id,
            category: "person".into(),
            start_frame: 0,
            confidence: 1.0,
            boxes: vec![BBox::new(x, 100.0, 30.0, 30.0); len],
            features: Array2::zeros((0, 0)),
            extra: None,
        }
    }

    #[test]
    fn static_left_of() {
        let rels = derive_relations(&[static_track(0, 50.0, 20), static_track(1, 200.0, 20)], 3);
        let from0: Vec<_> = rels.iter().filter(|r| r.subject_id == 0).collect();
        assert_eq!(from0.len(), 1);
        assert_eq!(from0[0].predicate, 0);
        assert_eq!(from0[0].span, TemporalSpan::new(0, 19));
    }

    #[test]
    fn monotone_run_boundaries() {
        let d = [5.0, 4.0, 3.0, 3.0, 4.0, 5.0, 6.0, 2.0];
        assert_eq!(monotone_runs(&d, true, 2, 0), vec![TemporalSpan::new(0, 2), TemporalSpan::new(6, 7)]);
        assert_eq!(monotone_runs(&d, false, 3, 10), vec![TemporalSpan::new(13, 16)]);
        assert_eq!(runs(&[true, true, false, true], 1, 0), vec![TemporalSpan::new(0, 1), TemporalSpan::new(3, 3)]);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            num_videos: 3,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn labels_rederive_from_stored_boxes() {
        let cfg = SynthConfig {
            num_videos: 10,
            ..Default::default()
        };
        for v in generate(&cfg).unwrap() {
            assert_eq!(derive_relations(&v.tracklets, cfg.min_relation_len), v.relations);
            for t in &v.tracklets {
                assert!(t.boxes.iter().all(BBox::is_valid));
                assert_eq!(t.features.dim(), (t.len(), cfg.feature_dim));
            }
        }
    }

    #[test]
    fn durations_cover_both_regimes() {
        let cfg = SynthConfig {
            num_videos: 40,
            ..Default::default()
        };
        let stats = corpus_stats(&generate(&cfg).unwrap(), PREDICATES.len());
        assert!(stats.short_lived > 0, "{stats}");
        assert!(stats.enduring > 0, "{stats}");
        assert!(stats.predicate_counts.iter().all(|&c| c > 0), "{stats}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            feature_dim: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
