//! Dataset ingestion from `root/{train,test}/<class>/*.{png,ppm,jpg}`.

use std::path::{Path, PathBuf};

use agnet::numerics::Tensor;
use agnet::training::LabeledImage;
use agnet::Scalar;
use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

const EXTENSIONS: [&str; 6] = ["png", "ppm", "pnm", "pgm", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Class names in lexicographic order; the index is the class label.
    pub classes: Vec<String>,
    pub train: Vec<DatasetItem>,
    pub test: Vec<DatasetItem>,
}

impl DatasetManifest {
    pub fn items(&self, split: Split) -> &[DatasetItem] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn dataset_err(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Dataset { path: path.to_path_buf(), message: message.into() }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> =
        std::fs::read_dir(dir).map_err(io_err(dir))?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|source| CliError::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

/// Scans and validates a dataset directory.
pub fn ingest_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut per_split: Vec<Vec<(String, Vec<PathBuf>)>> = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            return Err(dataset_err(root, format!("missing {} directory", split.dir_name())));
        }
        let mut classes = Vec::new();
        for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| dataset_err(&class_dir, "class directory name is not UTF-8"))?
                .to_string();
            let files: Vec<PathBuf> = sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
            if files.is_empty() {
                return Err(dataset_err(&class_dir, "empty class directory"));
            }
            classes.push((name, files));
        }
        if classes.is_empty() {
            return Err(dataset_err(&dir, "no class directories"));
        }
        per_split.push(classes);
    }
    let mut classes: Vec<String> = per_split.iter().flatten().map(|(n, _)| n.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(dataset_err(root, format!("need at least 2 classes, found {classes:?}")));
    }
    let mut splits = per_split.into_iter().map(|entries| {
        let mut items = Vec::new();
        for (name, files) in entries {
            let class = classes.binary_search(&name).expect("collected above");
            for f in files {
                decode_rgb(&f)?;
                let path = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
                items.push(DatasetItem { path, class });
            }
        }
        Ok::<_, CliError>(items)
    });
    let train = splits.next().expect("two splits")?;
    let test = splits.next().expect("two splits")?;
    Ok(DatasetManifest { root: root.to_path_buf(), classes, train, test })
}

/// Converts to an `[H, W, 3]` tensor in `[0, 1]`, resizing to `size x size`
/// when given and different.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage, size: Option<usize>) -> Tensor<T> {
    let resized;
    let img = match size {
        Some(s) if (img.width() as usize, img.height() as usize) != (s, s) => {
            resized = image::imageops::resize(img, s as u32, s as u32, FilterType::Triangle);
            &resized
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let inv = T::lit(1.0 / 255.0);
    Tensor::new(&[h, w, 3], img.as_raw().iter().map(|&v| T::lit(v as f64) * inv).collect()).expect("rgb buffer")
}

pub fn load_image<T: Scalar>(path: &Path, size: Option<usize>) -> Result<Tensor<T>> {
    Ok(rgb_to_tensor(&decode_rgb(path)?, size))
}

/// Decodes every item of a split at `size x size`.
pub fn load_split<T: Scalar>(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Vec<LabeledImage<T>>> {
    manifest
        .items(split)
        .iter()
        .map(|item| {
            Ok(LabeledImage {
                image: load_image(&manifest.root.join(&item.path), Some(size))?,
                label: item.class,
                id: item.path.to_string_lossy().into_owned(),
            })
        })
        .collect()
}
