use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Cifar10,
    Synthetic,
}

/// Labeled images with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, n_classes: usize, provenance: Provenance) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                len: n_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            n_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            provenance: self.provenance,
        }
    }

    /// `count` distinct indices drawn uniformly without replacement, seeded.
    pub fn sample_indices(&self, count: usize, seed: u64) -> Result<Vec<usize>> {
        if count == 0 || count > self.len() {
            return Err(Error::Input(format!(
                "cannot sample {count} of {} images",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(rand::seq::index::sample(&mut rng, self.len(), count).into_vec())
    }
}

/// Side length of synthetic images.
pub const SYNTHETIC_SIDE: usize = 16;

/// Class-conditional oriented gratings plus seeded Gaussian noise.
///
/// Class `c` uses orientation `π·c / n_classes`; frequency, phase and
/// contrast are jittered per image. Classes are interleaved so any prefix is
/// close to balanced.
pub fn gen_synthetic(n_classes: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_sized(n_classes, n_per_class, SYNTHETIC_SIDE, seed)
}

pub fn gen_synthetic_sized(n_classes: usize, n_per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || n_per_class == 0 || side == 0 {
        return Err(Error::Input("synthetic dataset counts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("std");
    let mut images = Vec::with_capacity(n_classes * n_per_class);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    let s = side as f64;
    for _ in 0..n_per_class {
        for class in 0..n_classes {
            let theta = std::f64::consts::PI * class as f64 / n_classes as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            let freq: f64 = rng.random_range(1.5..2.5);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let contrast: f64 = rng.random_range(0.25..0.45);
            let offset: f64 = rng.random_range(0.4..0.6);
            let mut data = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let u = (x as f64 * ct + y as f64 * st) / s;
                    let v = offset + contrast * (std::f64::consts::TAU * freq * u + phase).sin();
                    data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
            images.push(Tensor::new(vec![1, side, side], data)?);
            labels.push(class);
        }
    }
    Dataset::new(images, labels, n_classes, Provenance::Synthetic)
}
