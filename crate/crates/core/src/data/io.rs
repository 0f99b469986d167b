//! On-disk dataset layout.
//!
//! A dataset directory holds `dataset.json` (vocabularies) and one manifest
//! per video under `videos/<video_id>.json`, next to a safetensors feature
//! container `videos/<video_id>.safetensors` with one `features/<entity_id>`
//! matrix (`len × C`, f32) per tracklet and optional `extra/<entity_id>`
//! matrices. Frame indices in manifests are raw video frames; they are
//! divided by `sample_stride` on load.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{RelationAnnotation, VideoRecord};
use crate::error::{Error, Result};
use crate::geom::{temporal_overlap, BBox, TemporalSpan, Tracklet};

pub const SCHEMA_VERSION: u32 = 1;
pub const VIDEOS_DIR: &str = "videos";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    #[default]
    Cxcywh,
    Xyxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTracklet {
    pub entity_id: u32,
    pub category: String,
    pub start_frame: usize,
    #[serde(default = "one")]
    pub confidence: f64,
    pub boxes: Vec<[f64; 4]>,
}

fn one() -> f64 {
    1.0
}

fn default_stride() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRelation {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: usize,
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub video_id: String,
    pub frame_w: f64,
    pub frame_h: f64,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default)]
    pub box_format: BoxFormat,
    /// Feature container path relative to the manifest; defaults to
    /// `<video_id>.safetensors`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub tracklets: Vec<ManifestTracklet>,
    #[serde(default)]
    pub relations: Vec<ManifestRelation>,
}

/// Vocabulary shared by all videos of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub schema_version: u32,
    pub predicates: Vec<String>,
    #[serde(default)]
    pub categories: Vec<String>,
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Error::schema(format!("{}: {at}", path.display()), e.inner().to_string())
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

/// Validates a manifest and converts it to sampled-frame coordinates.
/// Feature matrices are left empty.
pub fn manifest_to_record(m: &Manifest) -> Result<VideoRecord> {
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::schema(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", m.schema_version),
        ));
    }
    if m.video_id.is_empty() || m.video_id.contains(['/', '\\']) {
        return Err(Error::schema("video_id", "must be a non-empty file-name-safe string"));
    }
    for (name, v) in [("frame_w", m.frame_w), ("frame_h", m.frame_h)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::schema(name, format!("must be positive, got {v}")));
        }
    }
    let stride = m.sample_stride;
    if stride == 0 {
        return Err(Error::schema("sample_stride", "must be at least 1"));
    }
    let sampled = |path: String, raw: usize| -> Result<usize> {
        if !raw.is_multiple_of(stride) {
            return Err(Error::schema(path, format!("frame {raw} is not a multiple of stride {stride}")));
        }
        Ok(raw / stride)
    };

    let mut seen = BTreeSet::new();
    let mut tracklets = Vec::with_capacity(m.tracklets.len());
    for (i, t) in m.tracklets.iter().enumerate() {
        let at = format!("tracklets[{i}]");
        if !seen.insert(t.entity_id) {
            return Err(Error::schema(format!("{at}.entity_id"), format!("duplicate id {}", t.entity_id)));
        }
        if t.boxes.is_empty() {
            return Err(Error::schema(format!("{at}.boxes"), "tracklet has no boxes"));
        }
        if !(0.0..=1.0).contains(&t.confidence) {
            return Err(Error::schema(format!("{at}.confidence"), "must lie in [0, 1]"));
        }
        let boxes = t
            .boxes
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let bb = match m.box_format {
                    BoxFormat::Cxcywh => BBox::new(b[0], b[1], b[2], b[3]),
                    BoxFormat::Xyxy => BBox::from_corners(b[0], b[1], b[2], b[3]),
                };
                if !bb.is_valid() {
                    let what = if !(bb.w > 0.0) {
                        "non-positive width"
                    } else if !(bb.h > 0.0) {
                        "non-positive height"
                    } else {
                        "non-finite coordinate"
                    };
                    return Err(Error::schema(format!("{at}.boxes[{k}]"), what));
                }
                Ok(bb)
            })
            .collect::<Result<Vec<_>>>()?;
        tracklets.push(Tracklet {
            entity_id: t.entity_id,
            category: t.category.clone(),
            start_frame: sampled(format!("{at}.start_frame"), t.start_frame)?,
            confidence: t.confidence,
            boxes,
            features: Array2::zeros((0, 0)),
            extra: None,
        });
    }

    let mut relations = Vec::with_capacity(m.relations.len());
    for (i, r) in m.relations.iter().enumerate() {
        let at = format!("relations[{i}]");
        let find = |id: u32, field: &str| {
            tracklets
                .iter()
                .find(|t| t.entity_id == id)
                .ok_or_else(|| Error::schema(format!("{at}.{field}"), format!("unknown entity {id}")))
        };
        let sub = find(r.subject_id, "subject_id")?;
        let obj = find(r.object_id, "object_id")?;
        if r.subject_id == r.object_id {
            return Err(Error::schema(at, "subject and object must differ"));
        }
        let begin = sampled(format!("{at}.begin"), r.begin)?;
        let end = sampled(format!("{at}.end"), r.end)?;
        if begin > end {
            return Err(Error::schema(at, format!("begin {} after end {}", r.begin, r.end)));
        }
        let span = TemporalSpan::new(begin, end);
        if !temporal_overlap(sub, obj).is_some_and(|o| o.contains_span(&span)) {
            return Err(Error::schema(at, "span lies outside the tracklets' overlap"));
        }
        relations.push(RelationAnnotation {
            subject_id: r.subject_id,
            object_id: r.object_id,
            predicate: r.predicate,
            span,
        });
    }

    Ok(VideoRecord {
        video_id: m.video_id.clone(),
        frame_w: m.frame_w,
        frame_h: m.frame_h,
        sample_stride: stride,
        tracklets,
        relations,
    })
}

pub fn record_to_manifest(v: &VideoRecord) -> Manifest {
    let raw = |f: usize| f * v.sample_stride;
    Manifest {
        schema_version: SCHEMA_VERSION,
        video_id: v.video_id.clone(),
        frame_w: v.frame_w,
        frame_h: v.frame_h,
        sample_stride: v.sample_stride,
        box_format: BoxFormat::Cxcywh,
        features: None,
        tracklets: v
            .tracklets
            .iter()
            .map(|t| ManifestTracklet {
                entity_id: t.entity_id,
                category: t.category.clone(),
                start_frame: raw(t.start_frame),
                confidence: t.confidence,
                boxes: t.boxes.iter().map(|b| [b.x_c, b.y_c, b.w, b.h]).collect(),
            })
            .collect(),
        relations: v
            .relations
            .iter()
            .map(|r| ManifestRelation {
                subject_id: r.subject_id,
                object_id: r.object_id,
                predicate: r.predicate,
                begin: raw(r.span.begin),
                end: raw(r.span.end),
            })
            .collect(),
    }
}

fn features_path(manifest_path: &Path, m: &Manifest) -> PathBuf {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    dir.join(m.features.clone().unwrap_or_else(|| format!("{}.safetensors", m.video_id)))
}

fn to_array(t: &Tensor, key: &str) -> Result<Array2<f32>> {
    let (rows, cols) = t
        .dims2()
        .map_err(|_| Error::schema(key.to_string(), "feature matrix must be 2-D"))?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape from tensor"))
}

/// Loads and validates one video. Tracklets without a feature matrix are
/// kept with an empty matrix and a warning; pairs involving them are skipped
/// downstream.
pub fn load_video(manifest_path: &Path) -> Result<VideoRecord> {
    let m = read_manifest(manifest_path)?;
    let mut v = manifest_to_record(&m)?;
    let fpath = features_path(manifest_path, &m);
    let container = candle_core::safetensors::load(&fpath, &Device::Cpu)
        .map_err(|e| Error::schema(fpath.display().to_string(), e.to_string()))?;
    let mut width = None;
    let mut extra_width = None;
    for (i, t) in v.tracklets.iter_mut().enumerate() {
        let key = format!("features/{}", t.entity_id);
        let Some(f) = container.get(&key) else {
            log::warn!("{}: no features for entity {}", v.video_id, t.entity_id);
            continue;
        };
        let f = to_array(f, &key)?;
        let at = format!("{}: {key}", fpath.display());
        if f.nrows() != t.boxes.len() {
            return Err(Error::schema(
                at,
                format!("{} rows for tracklets[{i}] with {} boxes", f.nrows(), t.boxes.len()),
            ));
        }
        if *width.get_or_insert(f.ncols()) != f.ncols() {
            return Err(Error::schema(at, "feature width differs between tracklets"));
        }
        t.features = f;
        let ekey = format!("extra/{}", t.entity_id);
        if let Some(e) = container.get(&ekey) {
            let e = to_array(e, &ekey)?;
            if e.nrows() != t.boxes.len() || *extra_width.get_or_insert(e.ncols()) != e.ncols() {
                return Err(Error::schema(format!("{}: {ekey}", fpath.display()), "bad extra feature shape"));
            }
            t.extra = Some(e);
        }
    }
    Ok(v)
}

/// Writes the manifest and feature container of `v` into `dir`.
pub fn save_video(dir: &Path, v: &VideoRecord) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = record_to_manifest(v);
    let path = dir.join(format!("{}.json", v.video_id));
    write_json(&path, &manifest)?;
    let mut tensors = HashMap::new();
    for t in &v.tracklets {
        if t.features.nrows() == 0 {
            continue;
        }
        let put = |m: &Array2<f32>| -> Result<Tensor> {
            let data: Vec<f32> = m.iter().copied().collect();
            Ok(Tensor::from_vec(data, m.dim(), &Device::Cpu)?)
        };
        tensors.insert(format!("features/{}", t.entity_id), put(&t.features)?);
        if let Some(e) = &t.extra {
            tensors.insert(format!("extra/{}", t.entity_id), put(e)?);
        }
    }
    let fpath = features_path(&path, &manifest);
    candle_core::safetensors::save(&tensors, &fpath)?;
    Ok(path)
}

fn manifest_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let videos = dir.join(VIDEOS_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&videos)
        .map_err(|e| Error::io(&videos, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every video of a dataset directory, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<VideoRecord>> {
    manifest_paths(dir)?.iter().map(|p| load_video(p)).collect()
}

/// Loads only the validated manifests of a dataset (no feature matrices).
pub fn load_annotations(dir: &Path) -> Result<Vec<VideoRecord>> {
    manifest_paths(dir)?
        .iter()
        .map(|p| manifest_to_record(&read_manifest(p)?))
        .collect()
}

pub fn save_dataset(dir: &Path, info: &DatasetInfo, videos: &[VideoRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(DATASET_FILE), info)?;
    let vdir = dir.join(VIDEOS_DIR);
    for v in videos {
        save_video(&vdir, v)?;
    }
    Ok(())
}

pub fn load_dataset_info(dir: &Path) -> Result<DatasetInfo> {
    read_json(&dir.join(DATASET_FILE))
}
