//! Small CNNs trained on the synthetic data: the target classifier, the
//! multi-label attribute oracle (whose penultimate layer is also the FID
//! encoder), the identity embedder, and a denoising autoencoder used as the
//! self-supervised encoder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttributeVector, LabeledDataset, NUM_IDENTITIES};
use crate::checkpoint::{self, Header};
use crate::denoiser::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::cnn::{CnnConfig, SmallCnn};
use crate::nn::optim::{clip_grad_norm, AdamW};
use crate::pipeline::{BlackBoxClassifier, Prediction};
use crate::tensor::LatentBatch;

const CHUNK: usize = 256;

/// Training target of a CNN.
pub enum Objective<'a> {
    /// Softmax cross-entropy over class ids.
    Classes(&'a [usize]),
    /// Independent sigmoid cross-entropy per output.
    Bits(&'a [AttributeVector]),
    /// Mean squared error against the clean input.
    Reconstruct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Upper bound of the Gaussian noise level added to half of the inputs
    /// (to every input when reconstructing).
    pub input_noise: f64,
}

impl CnnTrainConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            train: TrainConfig {
                iterations,
                batch_size: 64,
                learning_rate: 2e-3,
                weight_decay: 1e-4,
                seed,
            },
            input_noise: 0.1,
        }
    }
}

/// A trained [`SmallCnn`] with its weights.
#[derive(Clone, Debug)]
pub struct CnnModel {
    net: SmallCnn,
    params: Vec<f32>,
}

pub struct CnnBatchOutput {
    pub logits: Vec<f32>,
    pub features: Vec<f32>,
}

impl CnnModel {
    pub fn new(cfg: CnnConfig, params: Vec<f32>) -> Result<Self> {
        let net = SmallCnn::new(cfg);
        if params.len() != net.layout().len() {
            return Err(Error::Shape(format!(
                "cnn expects {} parameters, got {}",
                net.layout().len(),
                params.len()
            )));
        }
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &CnnConfig {
        self.net.config()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn flops_per_image(&self) -> u64 {
        self.net.flops_per_image()
    }

    pub fn forward(&self, images: &LatentBatch<f32>) -> Result<CnnBatchOutput> {
        let c = self.config();
        let want = (c.in_channels, c.image_size, c.image_size);
        let s = images.shape();
        if (s.channels, s.height, s.width) != want {
            return Err(Error::Shape(format!("cnn expects {want:?}, got {s:?}")));
        }
        let d = s.numel();
        let mut logits = Vec::with_capacity(images.len() * c.outputs);
        let mut features = Vec::with_capacity(images.len() * c.feature_dim);
        for start in (0..images.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(images.len());
            let (out, _) = self.net.forward(
                &self.params,
                &images.data()[start * d..end * d],
                end - start,
            );
            logits.extend(out.logits);
            features.extend(out.features);
        }
        Ok(CnnBatchOutput { logits, features })
    }

    /// Per-image penultimate feature vectors in `f64`.
    pub fn features(&self, images: &LatentBatch<f32>) -> Result<Vec<Vec<f64>>> {
        let out = self.forward(images)?;
        let k = self.config().feature_dim;
        Ok(out
            .features
            .chunks(k)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect())
    }

    pub fn save(&self, path: &Path, kind: &str, seed: u64) -> Result<()> {
        let header = Header {
            kind: kind.into(),
            seed,
            config: serde_json::to_value(self.config())?,
            tensors: self.net.layout().specs().to_vec(),
            tokens: vec![],
        };
        checkpoint::write(path, &header, &self.params)
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let (h, v) = checkpoint::read_kind(path, kind)?;
        let cfg: CnnConfig = serde_json::from_value(h.config)?;
        Self::new(cfg, v)
    }
}

/// Trains a [`SmallCnn`] with AdamW and per-iteration random batches.
pub fn train_cnn(
    images: &LatentBatch<f32>,
    cfg: CnnConfig,
    objective: Objective<'_>,
    tc: &CnnTrainConfig,
) -> Result<(CnnModel, Vec<f64>)> {
    tc.train.validate()?;
    let n = images.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    match objective {
        Objective::Classes(l) if l.len() != n => {
            return Err(Error::Shape("one label per image".into()))
        }
        Objective::Bits(b) if b.len() != n => {
            return Err(Error::Shape("one attribute vector per image".into()))
        }
        _ => {}
    }
    let net = SmallCnn::new(cfg.clone());
    let mut params = net.layout().init::<f32>(tc.train.seed);
    let mut opt = AdamW::new(params.len(), tc.train.learning_rate, tc.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.train.seed.wrapping_add(17));
    let b = tc.train.batch_size;
    let d = images.shape().numel();
    let k = cfg.outputs;
    let mut losses = Vec::with_capacity(tc.train.iterations);
    let mut grads = vec![0.0f32; params.len()];
    for iter in 0..tc.train.iterations {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let clean = images.select(&idx);
        let mut x = clean.data().to_vec();
        for img in x.chunks_mut(d) {
            let noisy = matches!(objective, Objective::Reconstruct) || rng.random_bool(0.5);
            if noisy {
                let sigma = rng.random_range(0.0..=tc.input_noise);
                for v in img {
                    *v += (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
                }
            }
        }
        let (out, cache) = net.forward(&params, &x, b);
        let mut dl = vec![0.0f32; b * k];
        let mut loss = 0.0;
        match objective {
            Objective::Classes(labels) => {
                for (r, &i) in idx.iter().enumerate() {
                    let p = softmax(&out.logits[r * k..(r + 1) * k]);
                    loss -= p[labels[i]].max(1e-12).ln();
                    for c in 0..k {
                        let y = if c == labels[i] { 1.0 } else { 0.0 };
                        dl[r * k + c] = ((p[c] - y) / b as f64) as f32;
                    }
                }
            }
            Objective::Bits(bits) => {
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..k {
                        let z = out.logits[r * k + c] as f64;
                        let y = bits[i].get(c) as f64;
                        let s = 1.0 / (1.0 + (-z).exp());
                        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                        dl[r * k + c] = ((s - y) / b as f64) as f32;
                    }
                }
            }
            Objective::Reconstruct => {
                let scale = 2.0 / (b * d) as f64;
                for (j, (&o, &t)) in out.logits.iter().zip(clean.data()).enumerate() {
                    let e = (o - t) as f64;
                    loss += e * e / d as f64;
                    dl[j] = (scale * e) as f32;
                }
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                phase: "cnn training",
                iteration: iter,
                loss,
            });
        }
        losses.push(loss);
        grads.iter_mut().for_each(|g| *g = 0.0);
        net.backward(&params, &cache, &dl, None, &mut grads);
        clip_grad_norm(&mut grads, 5.0);
        opt.step_with_lr(&mut params, &grads, tc.train.lr_at(iter));
    }
    Ok((CnnModel { net, params }, losses))
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The target classifier. Only [`BlackBoxClassifier::predict`] is exposed
/// to the explanation pipeline.
#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    model: CnnModel,
}

pub const CLASSIFIER_KIND: &str = "classifier";
pub const ORACLE_KIND: &str = "attribute_oracle";
pub const IDENTITY_KIND: &str = "identity_embedder";
pub const ENCODER_KIND: &str = "self_supervised_encoder";

impl TrainedClassifier {
    pub fn model(&self) -> &CnnModel {
        &self.model
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.model.save(path, CLASSIFIER_KIND, seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            model: CnnModel::load(path, CLASSIFIER_KIND)?,
        })
    }
}

impl BlackBoxClassifier for TrainedClassifier {
    fn num_classes(&self) -> usize {
        self.model.config().outputs
    }

    fn predict(&self, images: &LatentBatch<f32>) -> Result<Vec<Prediction>> {
        let out = self.model.forward(images)?;
        Ok(out
            .logits
            .chunks(self.num_classes())
            .map(|z| Prediction::from_probs(softmax(z)))
            .collect())
    }
}

/// Trains the binary classifier on the dataset labels.
pub fn train_classifier(dataset: &LabeledDataset, cfg: &CnnTrainConfig) -> Result<TrainedClassifier> {
    let s = dataset.images.shape();
    let ccfg = CnnConfig::new(s.channels, s.height, 2);
    let (model, _) = train_cnn(&dataset.images, ccfg, Objective::Classes(&dataset.labels), cfg)?;
    Ok(TrainedClassifier { model })
}

/// Fraction of images whose predicted label equals the dataset label.
pub fn accuracy(classifier: &dyn BlackBoxClassifier, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = classifier.predict(&dataset.images)?;
    let hits = preds
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, &l)| p.label == l)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Multi-label attribute network used as the oracle on generated images.
#[derive(Clone, Debug)]
pub struct AttributeOracle {
    model: CnnModel,
}

impl AttributeOracle {
    pub fn model(&self) -> &CnnModel {
        &self.model
    }

    pub fn predict(&self, images: &LatentBatch<f32>) -> Result<Vec<AttributeVector>> {
        let out = self.model.forward(images)?;
        Ok(out
            .logits
            .chunks(self.model.config().outputs)
            .map(|z| AttributeVector::new(z.iter().map(|&v| u8::from(v > 0.0)).collect()))
            .collect())
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.model.save(path, ORACLE_KIND, seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            model: CnnModel::load(path, ORACLE_KIND)?,
        })
    }
}

pub fn train_attribute_oracle(dataset: &LabeledDataset, cfg: &CnnTrainConfig) -> Result<AttributeOracle> {
    let s = dataset.images.shape();
    let k = dataset.attributes.first().map_or(0, |a| a.len());
    let ccfg = CnnConfig::new(s.channels, s.height, k);
    let (model, _) = train_cnn(&dataset.images, ccfg, Objective::Bits(&dataset.attributes), cfg)?;
    Ok(AttributeOracle { model })
}

/// Per-attribute agreement between the oracle and the ground truth.
pub fn oracle_accuracy(oracle: &AttributeOracle, dataset: &LabeledDataset) -> Result<Vec<f64>> {
    let pred = oracle.predict(&dataset.images)?;
    let k = dataset.attributes.first().map_or(0, |a| a.len());
    let mut hits = vec![0usize; k];
    for (p, a) in pred.iter().zip(&dataset.attributes) {
        for (i, h) in hits.iter_mut().enumerate() {
            *h += usize::from(p.get(i) == a.get(i));
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / dataset.len().max(1) as f64).collect())
}

/// Feature network trained to recognise the identity texture, or the
/// self-supervised encoder; either maps images to embedding vectors.
#[derive(Clone, Debug)]
pub struct Embedder {
    model: CnnModel,
    kind: &'static str,
}

impl Embedder {
    pub fn model(&self) -> &CnnModel {
        &self.model
    }

    pub fn embed(&self, images: &LatentBatch<f32>) -> Result<Vec<Vec<f64>>> {
        self.model.features(images)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.model.save(path, self.kind, seed)
    }

    pub fn load_identity(path: &Path) -> Result<Self> {
        Ok(Self {
            model: CnnModel::load(path, IDENTITY_KIND)?,
            kind: IDENTITY_KIND,
        })
    }

    pub fn load_encoder(path: &Path) -> Result<Self> {
        Ok(Self {
            model: CnnModel::load(path, ENCODER_KIND)?,
            kind: ENCODER_KIND,
        })
    }
}

pub fn train_identity_embedder(dataset: &LabeledDataset, cfg: &CnnTrainConfig) -> Result<Embedder> {
    let s = dataset.images.shape();
    let ccfg = CnnConfig::new(s.channels, s.height, NUM_IDENTITIES);
    let (model, _) = train_cnn(&dataset.images, ccfg, Objective::Classes(&dataset.identities), cfg)?;
    Ok(Embedder {
        model,
        kind: IDENTITY_KIND,
    })
}

/// Denoising autoencoder whose bottleneck features serve as the
/// self-supervised embedding.
pub fn train_self_supervised_encoder(dataset: &LabeledDataset, cfg: &CnnTrainConfig) -> Result<Embedder> {
    let s = dataset.images.shape();
    let ccfg = CnnConfig::new(s.channels, s.height, s.numel());
    let (model, _) = train_cnn(&dataset.images, ccfg, Objective::Reconstruct, cfg)?;
    Ok(Embedder {
        model,
        kind: ENCODER_KIND,
    })
}

/// Fraction of images whose identity is recovered by the embedder's head.
pub fn identity_accuracy(embedder: &Embedder, dataset: &LabeledDataset) -> Result<f64> {
    let out = embedder.model.forward(&dataset.images)?;
    let k = embedder.model.config().outputs;
    let hits = out
        .logits
        .chunks(k)
        .zip(&dataset.identities)
        .filter(|(z, &id)| argmax(&z.iter().map(|&v| v as f64).collect::<Vec<_>>()) == id)
        .count();
    Ok(hits as f64 / dataset.len().max(1) as f64)
}
