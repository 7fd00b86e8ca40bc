//! Deterministic synthetic identities: each identity is a base image of colored
//! horizontal bands with a vertical stripe texture; every sample adds Gaussian noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::imageio::save_png;
use crate::data::market::{format_market_filename, MarketName, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BANDS: usize = 4;

fn default_two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_two")]
    pub query_per_identity: usize,
    #[serde(default = "default_two")]
    pub gallery_per_identity: usize,
}

impl SyntheticSpec {
    pub fn toy() -> Self {
        Self {
            num_identities: 8,
            images_per_identity: 16,
            height: 32,
            width: 32,
            noise_std: 0.05,
            seed: 0,
            query_per_identity: 2,
            gallery_per_identity: 2,
        }
    }

    pub fn train_per_identity(&self) -> usize {
        self.images_per_identity
            .saturating_sub(self.query_per_identity + self.gallery_per_identity)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("num_identities", self.num_identities),
            ("images_per_identity", self.images_per_identity),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                out.push(format!("synthetic.{name} must be positive"));
            }
        }
        if self.num_identities > 9999 {
            out.push("synthetic.num_identities must be at most 9999".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            out.push(format!("synthetic.noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.train_per_identity() == 0 {
            out.push(format!(
                "synthetic: {} images per identity leave none for training after {} query and {} gallery",
                self.images_per_identity, self.query_per_identity, self.gallery_per_identity
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub name: String,
    pub person_id: i32,
    pub camera_id: u32,
    pub split: Split,
    /// `[3×H×W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub train: Vec<SyntheticImage>,
    pub query: Vec<SyntheticImage>,
    pub gallery: Vec<SyntheticImage>,
}

impl SyntheticSet {
    pub fn split(&self, split: Split) -> &[SyntheticImage] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.query.len() + self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn base_pattern(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let colors: Vec<[f64; 3]> = (0..BANDS)
        .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
        .collect();
    let freq = rng.random_range(1..=4) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let band = (y * BANDS / h).min(BANDS - 1);
            for x in 0..w {
                let stripe = 0.1 * (2.0 * PI * freq * x as f64 / w as f64 + phase).sin();
                out[c * h * w + y * w + x] = colors[band][c] + stripe;
            }
        }
    }
    out
}

/// Per identity, the first `train_per_identity` samples go to train, then
/// `query_per_identity` to query, then `gallery_per_identity` to gallery.
/// Sample `k` is taken by camera `k % 2 + 1`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bases: Vec<Vec<f64>> = (0..spec.num_identities).map(|_| base_pattern(&mut rng, h, w)).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let n_train = spec.train_per_identity();
    let mut set = SyntheticSet {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for (id, base) in bases.iter().enumerate() {
        let person_id = id as i32 + 1;
        for k in 0..spec.images_per_identity {
            let data: Vec<f32> = base
                .iter()
                .map(|&b| {
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (b + n).clamp(0.0, 1.0) as f32
                })
                .collect();
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + spec.query_per_identity {
                Split::Query
            } else {
                Split::Gallery
            };
            let camera_id = (k % 2) as u32 + 1;
            let name = format_market_filename(&MarketName {
                person_id,
                camera_id,
                sequence: 1,
                frame: k as u32,
                index: 0,
                extension: "png".into(),
            });
            let sample = SyntheticImage {
                name,
                person_id,
                camera_id,
                split,
                image: Tensor::new(vec![3, h, w], data)?,
            };
            match split {
                Split::Train => set.train.push(sample),
                Split::Query => set.query.push(sample),
                Split::Gallery => set.gallery.push(sample),
            }
        }
    }
    Ok(set)
}

/// Writes the set as PNG files in the Market-1501 directory layout under `root`.
pub fn export_market_layout(set: &SyntheticSet, root: &Path) -> Result<()> {
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in set.split(split) {
            save_png(&dir.join(&s.name), &s.image)?;
        }
    }
    Ok(())
}
