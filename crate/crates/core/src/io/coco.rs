use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_json, read_file, to_json_bytes, write_file};
use crate::detmetrics::{Detection, GroundTruth};
use crate::error::{Error, Result};
use crate::primitives::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl AnnotationSet {
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|a| GroundTruth {
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox,
            })
            .collect()
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Referential integrity and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = HashSet::new();
        for i in &self.images {
            if !image_ids.insert(i.id) {
                return Err(Error::Integrity(format!("duplicate image id {}", i.id)));
            }
            if i.width == 0 || i.height == 0 {
                return Err(Error::Integrity(format!("image {} has zero size", i.id)));
            }
        }
        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if c.id == 0 || !cat_ids.insert(c.id) {
                return Err(Error::Integrity(format!("bad or duplicate category id {}", c.id)));
            }
        }
        let mut ann_ids = HashSet::new();
        for a in &self.annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::Integrity(format!("duplicate annotation id {}", a.id)));
            }
            if !image_ids.contains(&a.image_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references missing image id {}",
                    a.id, a.image_id
                )));
            }
            if !cat_ids.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references missing category id {}",
                    a.id, a.category_id
                )));
            }
        }
        Ok(())
    }
}

// File-level shapes: boxes are read raw so that a bad box is an integrity
// error rather than a parse error.
#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawAnnotationSet {
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

#[derive(Deserialize)]
struct RawDetection {
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    score: f64,
}

fn checked_box(raw: [f64; 4], what: impl FnOnce() -> String) -> Result<BBox> {
    BBox::try_from(raw).map_err(|e| Error::Integrity(format!("{}: {e}", what())))
}

pub fn parse_annotations(path: &Path, bytes: &[u8]) -> Result<AnnotationSet> {
    let raw: RawAnnotationSet = parse_json(path, bytes)?;
    let annotations = raw
        .annotations
        .into_iter()
        .map(|a| {
            Ok(Annotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: checked_box(a.bbox, || format!("annotation {}", a.id))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = AnnotationSet {
        images: raw.images,
        annotations,
        categories: raw.categories,
    };
    set.validate()?;
    Ok(set)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    parse_annotations(path, &read_file(path)?)
}

pub fn write_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    set.validate()?;
    write_file(path.as_ref(), &to_json_bytes(set))
}

pub fn parse_detections(path: &Path, bytes: &[u8]) -> Result<Vec<Detection>> {
    let raw: Vec<RawDetection> = parse_json(path, bytes)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, d)| {
            if d.category_id == 0 {
                return Err(Error::Integrity(format!("detection {i}: category_id must be >= 1")));
            }
            Ok(Detection {
                image_id: d.image_id,
                category_id: d.category_id,
                bbox: checked_box(d.bbox, || format!("detection {i}"))?,
                score: d.score,
            })
        })
        .collect()
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    parse_detections(path, &read_file(path)?)
}

pub fn write_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &to_json_bytes(&dets))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionEntry {
    pub detection_index: usize,
    pub image_id: u64,
    pub category_id: u32,
    /// Relative paths resolve against the manifest's directory.
    pub grid_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionManifest {
    pub entries: Vec<AttributionEntry>,
}

impl AttributionManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.detection_index) {
                return Err(Error::Integrity(format!(
                    "duplicate detection_index {}",
                    e.detection_index
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<AttributionManifest> {
    let path = path.as_ref();
    let m: AttributionManifest = parse_json(path, &read_file(path)?)?;
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(manifest: &AttributionManifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    write_file(path.as_ref(), &to_json_bytes(manifest))
}
