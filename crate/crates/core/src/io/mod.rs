//! Readers and writers for the interchange formats: COCO-subset annotation
//! and result JSON, NPY attribution grids, binary PPM/PGM images, model
//! checkpoints (see [`crate::micromodel::checkpoint`]) and dataset bundles.

mod bundle;
mod coco;
mod npy;
mod pnm;

use std::fs;
use std::path::Path;

pub use bundle::{read_bundle, write_bundle, BundleManifest};
pub use coco::{
    read_annotations, read_detections, read_manifest, write_annotations, write_detections,
    write_manifest, Annotation, AnnotationSet, AttributionEntry, AttributionManifest, Category,
    ImageInfo,
};
pub use npy::{decode_grid, encode_grid, read_grid, write_grid};
pub use pnm::{
    decode_pnm, encode_pnm, grid_to_heatmap, image_to_tensor, read_image, tensor_to_image,
    write_image, Image,
};

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub(crate) fn to_json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}
