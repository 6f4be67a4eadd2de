use std::path::Path;

use serde::{Deserialize, Serialize};

use super::coco::{Annotation, AnnotationSet, Category, ImageInfo};
use super::pnm::{image_to_tensor, read_image, tensor_to_image, write_image};
use super::{parse_json, read_annotations, read_file, to_json_bytes, write_annotations, write_file};
use crate::detmetrics::GroundTruth;
use crate::error::{Error, Result};
use crate::synthdata::{DatasetBundle, DomainSpec, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub domain: DomainSpec,
    pub seed: u64,
    pub count: usize,
}

/// Writes `images/<id>.ppm`, `annotations.json` and `manifest.json`.
pub fn write_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut set = AnnotationSet {
        images: Vec::with_capacity(bundle.len()),
        annotations: Vec::with_capacity(bundle.len()),
        categories: CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| Category { id: i as u32 + 1, name: n.to_string() })
            .collect(),
    };
    for (k, (image, gt)) in bundle.images.iter().zip(&bundle.ground_truths).enumerate() {
        let file_name = format!("images/{:06}.ppm", gt.image_id);
        let img = tensor_to_image(image)?;
        write_image(&img, dir.join(&file_name))?;
        set.images.push(ImageInfo {
            id: gt.image_id,
            width: img.width,
            height: img.height,
            file_name,
        });
        set.annotations.push(Annotation {
            id: k as u64 + 1,
            image_id: gt.image_id,
            category_id: gt.category_id,
            bbox: gt.bbox,
        });
    }
    write_annotations(&set, dir.join("annotations.json"))?;
    let manifest = BundleManifest {
        domain: bundle.domain.clone(),
        seed: bundle.seed,
        count: bundle.len(),
    };
    write_file(&dir.join("manifest.json"), &to_json_bytes(&manifest))
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let manifest: BundleManifest = parse_json(&mpath, &read_file(&mpath)?)?;
    let set = read_annotations(dir.join("annotations.json"))?;
    if set.images.len() != manifest.count || set.annotations.len() != manifest.count {
        return Err(Error::Integrity(format!(
            "bundle lists {} images and {} annotations, manifest says {}",
            set.images.len(),
            set.annotations.len(),
            manifest.count
        )));
    }
    let mut images = Vec::with_capacity(set.images.len());
    let mut ground_truths = Vec::with_capacity(set.images.len());
    for info in &set.images {
        let mut anns = set.annotations.iter().filter(|a| a.image_id == info.id);
        let (Some(ann), None) = (anns.next(), anns.next()) else {
            return Err(Error::Integrity(format!(
                "image {} must have exactly one annotation",
                info.id
            )));
        };
        let img = read_image(dir.join(&info.file_name))?;
        if (img.width, img.height) != (info.width, info.height) {
            return Err(Error::Integrity(format!("image {} size disagrees with annotations", info.id)));
        }
        images.push(image_to_tensor(&img));
        ground_truths.push(GroundTruth {
            image_id: ann.image_id,
            category_id: ann.category_id,
            bbox: ann.bbox,
        });
    }
    Ok(DatasetBundle {
        images,
        ground_truths,
        domain: manifest.domain,
        seed: manifest.seed,
    })
}
