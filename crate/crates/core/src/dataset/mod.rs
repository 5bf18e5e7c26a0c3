//! Synthetic glyph corpus, external-image ingestion and input normalization.

mod cache;
mod glyph;
mod image;
mod ingest;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::cache::{load_corpus, save_corpus, CORPUS_MAGIC};
pub use self::glyph::{class_glyph, render, Shape, MAX_CLASSES};
pub use self::image::{Image, LabeledImage, CHANNELS, IMAGE_LEN, PLANE, SIDE};
pub use self::ingest::{ingest_directory, IngestLayout, IngestReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub class_count: usize,
    pub samples_per_class: usize,
    /// Additive uniform noise amplitude per class.
    pub noise_levels: Vec<f32>,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for CorpusConfig {
    /// Eight classes, the last two visually noisy.
    fn default() -> Self {
        Self {
            class_count: 8,
            samples_per_class: 500,
            noise_levels: vec![0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.3, 0.3],
            seed: 42,
            train_fraction: 0.8,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.class_count < 2 {
            return bad(format!(
                "corpus.class_count must be >= 2, got {}",
                self.class_count
            ));
        }
        if self.class_count > MAX_CLASSES {
            return bad(format!(
                "corpus.class_count {} exceeds the {MAX_CLASSES} available glyph/color combinations",
                self.class_count
            ));
        }
        if self.samples_per_class == 0 {
            return bad("corpus.samples_per_class must be >= 1".into());
        }
        if self.noise_levels.len() != self.class_count {
            return bad(format!(
                "corpus.noise_levels has {} entries for {} classes",
                self.noise_levels.len(),
                self.class_count
            ));
        }
        if let Some(n) = self.noise_levels.iter().find(|n| !(0.0..=1.0).contains(*n)) {
            return bad(format!("corpus.noise_levels entry {n} outside [0, 1]"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "corpus.train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        Ok(())
    }

    /// Training samples drawn per class under the stratified split.
    pub fn train_per_class(&self) -> usize {
        (self.samples_per_class as f64 * self.train_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_count: usize,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Corpus {
    pub fn images_of_class(&self, split: &[LabeledImage], class: usize) -> Vec<usize> {
        split
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Renders the corpus class by class; the first `train_per_class` samples of
/// each class form the training split.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_train = config.train_per_class();
    let mut train = Vec::with_capacity(n_train * config.class_count);
    let mut test = Vec::with_capacity((config.samples_per_class - n_train) * config.class_count);
    for (label, &noise) in config.noise_levels.iter().enumerate() {
        for i in 0..config.samples_per_class {
            let sample = LabeledImage {
                image: render(label, noise, &mut rng),
                label,
            };
            if i < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(Corpus {
        class_count: config.class_count,
        train,
        test,
    })
}

/// Per-channel affine normalization applied at the classifier boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormalizationSpec {
    /// ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| *s <= 0.0 || !s.is_finite())
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "normalization std must be positive and finite, got {:?}",
                self.std
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, image: &Image) -> Vec<f32> {
        let mut out = image.data().to_vec();
        self.normalize_into(image.data(), &mut out);
        out
    }

    pub fn normalize_into(&self, src: &[f32], dst: &mut [f32]) {
        for (c, (s, d)) in src.chunks(PLANE).zip(dst.chunks_mut(PLANE)).enumerate() {
            let (m, inv) = (self.mean[c], 1.0 / self.std[c]);
            for (x, y) in s.iter().zip(d.iter_mut()) {
                *y = (x - m) * inv;
            }
        }
    }

    pub fn denormalize(&self, data: &[f32]) -> Vec<f32> {
        data.chunks(PLANE)
            .enumerate()
            .flat_map(|(c, plane)| plane.iter().map(move |v| v * self.std[c] + self.mean[c]))
            .collect()
    }
}
