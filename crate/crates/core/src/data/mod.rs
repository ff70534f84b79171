//! Client population construction: datasets, heterogeneous splits, and the
//! seen/unseen partition.

mod io;
mod manifest;
mod split;
mod synth;

use thiserror::Error;

use crate::models::{ExampleBatch, ImageGeometry};
use crate::nn::Scalar;

pub use io::{dataset_to_csv, load_cifar_binary, load_csv, load_dataset, load_idx_pair, DatasetFormat, CIFAR_RECORD_LEN};
pub use manifest::{read_manifest, write_manifest};
pub use split::{
    dirichlet_split, dirichlet_split_with_quota, extrapolation_population, fixed_classes_split, label_entropy,
    partition_seen_unseen, proportion_distance, sample_dirichlet, unseen_count, SEEN_FRACTION,
};
pub use synth::{synth_dataset, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("cannot split {examples} examples among {clients} clients: {msg}")]
    InsufficientData { clients: usize, examples: usize, msg: String },
    #[error("invalid split parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

/// Per-channel standardisation applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

/// Labeled images with raw pixel values in `0..=255`, stored channels-first.
#[derive(Clone, Debug)]
pub struct Dataset {
    geometry: ImageGeometry,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    classes: usize,
    norm: Normalization,
}

impl Dataset {
    pub fn new(geometry: ImageGeometry, pixels: Vec<u8>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let per = geometry.pixels();
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(DataError::Invalid(format!(
                "{} pixel values do not match {} images of {per} values",
                pixels.len(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(DataError::Invalid(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let norm = channel_stats(geometry, &pixels);
        Ok(Dataset { geometry, pixels, labels, classes, norm })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let per = self.geometry.pixels();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// Replaces the standardisation statistics, e.g. with those of the
    /// training population when preparing data for a new client.
    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self, DataError> {
        if norm.mean.len() != self.geometry.channels || norm.std.len() != self.geometry.channels {
            return Err(DataError::Invalid("normalisation channel count mismatch".into()));
        }
        self.norm = norm;
        Ok(self)
    }

    /// Indices of all examples of each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Normalised batch of the given examples.
    pub fn batch<T: Scalar>(&self, idx: &[usize], labeled: bool) -> ExampleBatch<T> {
        let g = self.geometry;
        let plane = g.size * g.size;
        let mut out = Vec::with_capacity(idx.len() * g.pixels());
        for &i in idx {
            for (c, chan) in self.raw_image(i).chunks_exact(plane).enumerate() {
                let (m, s) = (self.norm.mean[c], self.norm.std[c]);
                out.extend(chan.iter().map(|&p| T::of((((p as f32) / 255.0 - m) / s) as f64)));
            }
        }
        let labels = labeled.then(|| idx.iter().map(|&i| self.labels[i]).collect());
        ExampleBatch::new([g.channels, g.size, g.size], out, labels).expect("dataset images have consistent size")
    }

    /// Sub-dataset holding the given examples, keeping these statistics.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(idx.len() * self.geometry.pixels());
        for &i in idx {
            pixels.extend_from_slice(self.raw_image(i));
        }
        Dataset {
            geometry: self.geometry,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            norm: self.norm.clone(),
        }
    }
}

fn channel_stats(g: ImageGeometry, pixels: &[u8]) -> Normalization {
    let plane = g.size * g.size;
    let mut sum = vec![0.0f64; g.channels];
    let mut sq = vec![0.0f64; g.channels];
    let mut count = 0usize;
    for img in pixels.chunks_exact(g.pixels()) {
        for (c, chan) in img.chunks_exact(plane).enumerate() {
            for &p in chan {
                let v = p as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += plane;
    }
    if count == 0 {
        return Normalization::identity(g.channels);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / count as f64 - m * m).max(0.0).sqrt()).max(1e-3) as f32)
        .collect();
    Normalization { mean: mean.into_iter().map(|m| m as f32).collect(), std }
}

/// One client: its examples (indices into the shared [`Dataset`]) and its
/// ground-truth class proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub proportions: Vec<f64>,
}

impl ClientDataset {
    pub fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().chain(&self.val).chain(&self.test).copied()
    }

    /// Sorted distinct labels present in the client's data.
    pub fn label_set(&self, dataset: &Dataset) -> Vec<usize> {
        let mut seen = vec![false; dataset.classes()];
        for i in self.all_indices() {
            seen[dataset.label(i)] = true;
        }
        seen.iter().enumerate().filter(|(_, &s)| s).map(|(c, _)| c).collect()
    }
}

/// All clients plus the seen (training) / unseen (held-out) partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub clients: Vec<ClientDataset>,
    pub seen_ids: Vec<u32>,
    pub unseen_ids: Vec<u32>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn client(&self, id: u32) -> &ClientDataset {
        &self.clients[id as usize]
    }

    /// `‖π_i − π_j‖` for all pairs.
    pub fn proportion_distances(&self) -> Vec<Vec<f64>> {
        let n = self.clients.len();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = proportion_distance(&self.clients[i].proportions, &self.clients[j].proportions);
                d[i][j] = v;
                d[j][i] = v;
            }
        }
        d
    }
}
