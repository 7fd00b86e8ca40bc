//! Dataset ingestion, image preprocessing, synthetic data and checkpoints.

mod checkpoint;
mod imageio;
mod market;
mod synthetic;

pub use checkpoint::{
    AdamSnapshot, Checkpoint, EntryKind, RngState, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use imageio::{load_image, rgb_to_tensor, save_png, Normalization};
pub use market::{
    format_market_filename, parse_market_filename, scan_split, ImageRecord, MarketName, Split,
    GALLERY_DIR, QUERY_DIR, TRAIN_DIR,
};
pub use synthetic::{export_market_layout, generate_synthetic, SyntheticImage, SyntheticSet, SyntheticSpec};

use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A preprocessed image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub person_id: i32,
    pub camera_id: u32,
    /// Normalized `[3×H×W]`.
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    /// Sorted training identities; class `k` is `classes[k]`.
    pub classes: Vec<i32>,
}

impl Dataset {
    pub fn new(train: Vec<Sample>, query: Vec<Sample>, gallery: Vec<Sample>) -> Self {
        let mut classes: Vec<i32> = train.iter().map(|s| s.person_id).collect();
        classes.sort_unstable();
        classes.dedup();
        Self {
            train,
            query,
            gallery,
            classes,
        }
    }

    pub fn from_synthetic(spec: &SyntheticSpec, norm: &Normalization) -> Result<Self> {
        let set = generate_synthetic(spec)?;
        let convert = |v: Vec<SyntheticImage>| {
            v.into_iter()
                .map(|s| {
                    let mut image = s.image;
                    norm.apply(&mut image);
                    Sample {
                        name: s.name,
                        person_id: s.person_id,
                        camera_id: s.camera_id,
                        image,
                    }
                })
                .collect()
        };
        Ok(Self::new(convert(set.train), convert(set.query), convert(set.gallery)))
    }

    /// Loads a Market-1501-style directory tree, decoding images in parallel.
    pub fn load_market(root: &Path, height: usize, width: usize, norm: &Normalization) -> Result<Self> {
        let load = |split| -> Result<Vec<Sample>> {
            let records = scan_split(root, split)?;
            load_records(&records, height, width, norm)
        };
        Ok(Self::new(load(Split::Train)?, load(Split::Query)?, load(Split::Gallery)?))
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, person_id: i32) -> Option<usize> {
        self.classes.binary_search(&person_id).ok()
    }

    /// Class index of every training sample.
    pub fn train_labels(&self) -> Vec<usize> {
        self.train
            .iter()
            .map(|s| self.class_of(s.person_id).expect("classes built from train"))
            .collect()
    }
}

pub fn load_records(
    records: &[ImageRecord],
    height: usize,
    width: usize,
    norm: &Normalization,
) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            Ok(Sample {
                name: r.path.file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string(),
                person_id: r.person_id,
                camera_id: r.camera_id,
                image: load_image(&r.path, height, width, norm)?,
            })
        })
        .collect()
}

/// Loads every image of a flat directory in file-name order. Labels come from
/// Market-1501 names when they parse; otherwise person -1, camera 0.
pub fn load_directory(dir: &Path, height: usize, width: usize, norm: &Normalization) -> Result<Vec<Sample>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.retain(|p| {
        p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
    });
    paths.sort();
    let records: Vec<ImageRecord> = paths
        .into_iter()
        .map(|path| {
            let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
            let (person_id, camera_id) = match parse_market_filename(file) {
                Ok(n) => (n.person_id, n.camera_id),
                Err(_) => {
                    warn!("{file}: not a Market-1501 name, labeling as person -1 camera 0");
                    (-1, 0)
                }
            };
            ImageRecord {
                path,
                person_id,
                camera_id,
                split: Split::Gallery,
            }
        })
        .collect();
    load_records(&records, height, width, norm)
}
