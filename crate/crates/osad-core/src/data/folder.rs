//! Generic folder-of-images ingestion with declared crop/resize
//! preprocessing, used for OOD sources and on-disk datasets.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array3;

use super::{DatasetId, DatasetStore, RawPartition};
use crate::config::DataConfig;
use crate::error::{Error, Result};

/// Preprocessing applied to every loaded image: center crop first (if set),
/// then resize (if set).
#[derive(Debug, Clone, Copy, Default)]
pub struct FolderPreproc {
    pub center_crop: Option<usize>,
    pub resize_to: Option<usize>,
}

fn decode_image(path: &Path, preproc: &FolderPreproc) -> Result<Array3<f64>> {
    let mut img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    if let Some(crop) = preproc.center_crop {
        let (w, h) = (img.width(), img.height());
        let side = (crop as u32).min(w).min(h);
        let x = (w - side) / 2;
        let y = (h - side) / 2;
        img = img.crop_imm(x, y, side, side);
    }
    if let Some(size) = preproc.resize_to {
        if img.width() != size as u32 || img.height() != size as u32 {
            img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
        }
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn collect_image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(cur) = stack.pop() {
        for entry in std::fs::read_dir(&cur)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg") | Some("bmp")
            ) {
                paths.push(path);
            }
        }
    }
    paths.sort();
    Ok(paths)
}

/// Load every image under `dir` (recursively, sorted by path).
pub fn load_image_folder(dir: &Path, preproc: &FolderPreproc) -> Result<Vec<Array3<f64>>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("image folder {} does not exist", dir.display())));
    }
    let paths = collect_image_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images found under {}", dir.display())));
    }
    paths.iter().map(|p| decode_image(p, preproc)).collect()
}

/// Load an on-disk dataset laid out as
/// `<root>/<dataset>/{train,test}/<class_id>/*.png`.
pub(crate) fn load_class_tree(cfg: &DataConfig, dataset: DatasetId) -> Result<DatasetStore> {
    let root = cfg.root.as_ref().ok_or_else(|| {
        Error::config(format!("missing required key `data.root` for dataset `{dataset}`"))
    })?;
    let base = root.join(dataset.as_str());
    if !base.is_dir() {
        return Err(Error::Data(format!(
            "dataset `{dataset}` not found on disk at {}",
            base.display()
        )));
    }
    let split = crate::data::load_split(dataset, 1)?;
    let preproc = FolderPreproc { center_crop: None, resize_to: Some(split.input_size) };

    let mut store = DatasetStore {
        train: RawPartition::default(),
        test: RawPartition::default(),
    };
    for (name, part) in [("train", &mut store.train), ("test", &mut store.test)] {
        let dir = base.join(name);
        if !dir.is_dir() {
            return Err(Error::Data(format!("missing partition directory {}", dir.display())));
        }
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        for class_dir in class_dirs {
            let class: usize = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "class directory {} is not a numeric class id",
                        class_dir.display()
                    ))
                })?;
            for path in collect_image_paths(&class_dir)? {
                part.push(decode_image(&path, &preproc)?, class);
            }
        }
        if part.is_empty() {
            return Err(Error::Data(format!("no images under {}", dir.display())));
        }
    }
    Ok(store)
}
