//! The target CNN: definition, training, inference and checkpoints.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Image, LabeledImage, NormalizationSpec, CHANNELS, IMAGE_LEN, SIDE};
use crate::error::{Error, Result};
use crate::numnet::checkpoint::{self, read_f32s, write_f32s};
use crate::numnet::{
    argmax, cross_entropy, softmax_in_place, AdamConfig, AdamState, LayerSpec, Network,
    Parameterized,
};
use crate::tensor::Tensor;

/// conv 3->16 / relu / conv 16->32 s2 / relu / conv 32->32 s2 / relu /
/// flatten / dense 64 / relu / dense classes.
pub fn architecture(class_count: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            out_channels: 32,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            out_channels: 32,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { out_features: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense {
            out_features: class_count,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    network: Network,
    normalization: NormalizationSpec,
    class_count: usize,
}

/// Classifier output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 42,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "classifier.epochs and classifier.batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "classifier.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f32>,
    pub train_accuracy_curve: Vec<f64>,
    pub test_accuracy_curve: Vec<f64>,
    pub parameter_count: usize,
}

const EVAL_BATCH: usize = 256;

impl ClassifierModel {
    pub fn new(class_count: usize, normalization: NormalizationSpec, seed: u64) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::InvalidConfig(
                "classifier needs at least 2 classes".into(),
            ));
        }
        normalization.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let network = Network::new(
            &[CHANNELS, SIDE, SIDE],
            &architecture(class_count),
            &mut rng,
        )?;
        Ok(Self {
            network,
            normalization,
            class_count,
        })
    }

    /// Wraps an existing network; it must map `[3, 32, 32]` to a class vector.
    pub fn from_network(network: Network, normalization: NormalizationSpec) -> Result<Self> {
        normalization.validate()?;
        let out = network.output_shape();
        if network.input_shape() != [CHANNELS, SIDE, SIDE] || out.len() != 1 || out[0] < 2 {
            return Err(Error::Inconsistent(format!(
                "classifier network must map [3, 32, 32] to >= 2 classes, got {:?} -> {:?}",
                network.input_shape(),
                out
            )));
        }
        Ok(Self {
            class_count: out[0],
            network,
            normalization,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> &NormalizationSpec {
        &self.normalization
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    fn batch_tensor<'a, I: IntoIterator<Item = &'a Image>>(&self, images: I) -> Tensor {
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            let start = data.len();
            data.resize(start + IMAGE_LEN, 0.0);
            self.normalization
                .normalize_into(img.data(), &mut data[start..]);
            n += 1;
        }
        Tensor::new(vec![n, CHANNELS, SIDE, SIDE], data).expect("batch tensor")
    }

    /// Normalizes, runs the network and applies softmax. Deterministic and
    /// safe to call from several threads at once.
    pub fn predict_probs(&self, image: &Image) -> Prediction {
        self.predict_batch(std::slice::from_ref(image))
            .pop()
            .expect("one prediction")
    }

    pub fn predict_batch(&self, images: &[Image]) -> Vec<Prediction> {
        if images.is_empty() {
            return Vec::new();
        }
        let logits = self
            .network
            .infer(&self.batch_tensor(images))
            .expect("classifier input shape is fixed");
        logits
            .data()
            .chunks(self.class_count)
            .map(|row| {
                let mut probs = row.to_vec();
                softmax_in_place(&mut probs);
                let label = argmax(&probs);
                Prediction { probs, label }
            })
            .collect()
    }

    /// Fraction of samples whose predicted label matches.
    pub fn accuracy(&self, samples: &[LabeledImage]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let mut correct = 0usize;
        for chunk in samples.chunks(EVAL_BATCH) {
            let logits = self
                .network
                .infer(&self.batch_tensor(chunk.iter().map(|s| &s.image)))
                .expect("classifier input shape is fixed");
            correct += logits
                .data()
                .chunks(self.class_count)
                .zip(chunk)
                .filter(|(row, s)| argmax(row) == s.label)
                .count();
        }
        correct as f64 / samples.len() as f64
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        checkpoint::write_header(w, checkpoint::NETWORK_MAGIC)?;
        checkpoint::write_layers(w, &self.network)?;
        write_f32s(w, &self.normalization.mean)?;
        write_f32s(w, &self.normalization.std)
    }

    /// Loads a checkpoint written by [`ClassifierModel::save`]: an `EVNN`
    /// network followed by the six normalization constants.
    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        checkpoint::read_header(r, checkpoint::NETWORK_MAGIC)?;
        let network = checkpoint::read_layers(r)?;
        let mean = read_f32s(r, 3)?;
        let std = read_f32s(r, 3)?;
        if network.input_shape() != [CHANNELS, SIDE, SIDE] {
            return Err(Error::Checkpoint(format!(
                "classifier input must be [3, 32, 32], found {:?}",
                network.input_shape()
            )));
        }
        let class_count = match network.output_shape().as_slice() {
            [n] if *n >= 2 => *n,
            other => {
                return Err(Error::Checkpoint(format!(
                    "bad classifier output shape {other:?}"
                )))
            }
        };
        let normalization = NormalizationSpec {
            mean: [mean[0], mean[1], mean[2]],
            std: [std[0], std[1], std[2]],
        };
        normalization
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            network,
            normalization,
            class_count,
        })
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut slice = bytes.as_slice();
        let model = Self::load(&mut slice)?;
        if !slice.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", slice.len())));
        }
        Ok(model)
    }
}

/// Minimizes cross-entropy with Adam over shuffled minibatches.
pub fn train_classifier(
    corpus: &Corpus,
    normalization: NormalizationSpec,
    params: &TrainParams,
) -> Result<(ClassifierModel, TrainReport)> {
    params.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    if let Some(s) = corpus
        .train
        .iter()
        .chain(&corpus.test)
        .find(|s| s.label >= corpus.class_count)
    {
        return Err(Error::InvalidConfig(format!(
            "label {} outside [0, {})",
            s.label, corpus.class_count
        )));
    }
    let mut model = ClassifierModel::new(corpus.class_count, normalization, params.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));
    let mut adam = AdamState::new(
        &mut model.network,
        AdamConfig::with_lr(params.learning_rate),
    );
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut report = TrainReport {
        epochs_run: 0,
        final_train_accuracy: 0.0,
        final_test_accuracy: 0.0,
        loss_curve: Vec::with_capacity(params.epochs),
        train_accuracy_curve: Vec::with_capacity(params.epochs),
        test_accuracy_curve: Vec::with_capacity(params.epochs),
        parameter_count: model.network.param_count(),
    };

    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(params.batch_size) {
            let x = model.batch_tensor(chunk.iter().map(|&i| &corpus.train[i].image));
            let labels: Vec<usize> = chunk.iter().map(|&i| corpus.train[i].label).collect();
            let logits = model.network.forward(&x)?;
            let (loss, grad) = cross_entropy(logits.data(), model.class_count, &labels);
            if !loss.is_finite() {
                model.network.clear_cache();
                return Err(Error::Divergence(format!(
                    "classifier loss became {loss} in epoch {epoch}, batch {batches}"
                )));
            }
            let grad = Tensor::new(logits.shape().to_vec(), grad)?;
            model.network.backward_params(&grad)?;
            adam.step(&mut model.network);
            loss_sum += loss as f64;
            batches += 1;
        }
        let epoch_loss = (loss_sum / batches as f64) as f32;
        let train_acc = model.accuracy(&corpus.train);
        let test_acc = model.accuracy(&corpus.test);
        log::info!(
            "classifier epoch {}/{}: loss {epoch_loss:.4} train {train_acc:.4} test {test_acc:.4}",
            epoch + 1,
            params.epochs
        );
        report.loss_curve.push(epoch_loss);
        report.train_accuracy_curve.push(train_acc);
        report.test_accuracy_curve.push(test_acc);
        report.epochs_run = epoch + 1;
        report.final_train_accuracy = train_acc;
        report.final_test_accuracy = test_acc;
    }
    model.network.zero_grad();
    Ok((model, report))
}
