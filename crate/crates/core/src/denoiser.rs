//! The conditional noise predictor `ε_θ(x_t, t, C)` and its training loop.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Header};
use crate::data::LabeledDataset;
use crate::diffusion::{forward_noise_batch, gaussian_batch, NoiseSchedule};
use crate::distill::{render_tokens, tokens, ConditioningSequence, EmbeddingTable};
use crate::error::{Error, Result};
use crate::nn::optim::{clip_grad_norm, AdamW};
use crate::nn::unet::{Unet, UnetConfig};
use crate::nn::cast_params;
use crate::scalar::Scalar;
use crate::tensor::{ImageShape, LatentBatch, LatentImage};

/// Images per forward pass when predicting large batches.
const CHUNK: usize = 64;

/// Anything that predicts the noise residual of a batch of noisy images.
pub trait NoisePredictor<T: Scalar>: Sync {
    fn input_shape(&self) -> ImageShape;

    fn cond_dim(&self) -> usize;

    fn max_cond_len(&self) -> usize;

    /// Approximate floating point operations of one single-image
    /// evaluation with a conditioning sequence of `cond_len` tokens.
    fn flops_per_image(&self, cond_len: usize) -> u64;

    fn predict_batch(
        &self,
        x: &LatentBatch<T>,
        t: &[usize],
        conds: &[&ConditioningSequence<T>],
    ) -> Result<LatentBatch<T>>;

    fn predict_noise(
        &self,
        x: &LatentImage<T>,
        t: usize,
        cond: &ConditioningSequence<T>,
    ) -> Result<LatentImage<T>> {
        let b = LatentBatch::stack(std::slice::from_ref(x))?;
        Ok(self.predict_batch(&b, &[t], &[cond])?.image(0))
    }
}

/// Training hyperparameters shared by the denoiser and auxiliary networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "training needs iterations > 0, batch_size > 0 and learning_rate > 0".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Cosine decay to a tenth of the base rate after a short warmup.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let warm = (self.iterations / 50).max(1);
        if iter < warm {
            return self.learning_rate * (iter + 1) as f64 / warm as f64;
        }
        let frac = (iter - warm) as f64 / (self.iterations - warm).max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.learning_rate * (0.1 + 0.9 * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Probability of replacing a caption with the null prompt.
    pub cond_dropout: f64,
    pub grad_clip: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                iterations: 6000,
                batch_size: 32,
                learning_rate: 2e-3,
                weight_decay: 0.0,
                seed: 0,
            },
            cond_dropout: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// The U-Net with its weights and the training step count it validates
/// timesteps against.
#[derive(Clone, Debug)]
pub struct UnetDenoiser<T = f32> {
    net: Unet,
    params: Vec<T>,
    t_train: usize,
}

impl<T: Scalar> UnetDenoiser<T> {
    pub fn new(cfg: UnetConfig, seed: u64, t_train: usize) -> Self {
        let net = Unet::new(cfg);
        let params = net.layout().init(seed);
        Self {
            net,
            params,
            t_train,
        }
    }

    pub fn from_params(cfg: UnetConfig, params: Vec<T>, t_train: usize) -> Result<Self> {
        let net = Unet::new(cfg);
        if params.len() != net.layout().len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                net.layout().len(),
                params.len()
            )));
        }
        Ok(Self {
            net,
            params,
            t_train,
        })
    }

    pub fn net(&self) -> &Unet {
        &self.net
    }

    pub fn config(&self) -> &UnetConfig {
        self.net.config()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn cast<U: Scalar>(&self) -> UnetDenoiser<U> {
        UnetDenoiser {
            net: self.net.clone(),
            params: cast_params(&self.params),
            t_train: self.t_train,
        }
    }

    fn validate(
        &self,
        x: &LatentBatch<T>,
        t: &[usize],
        conds: &[&ConditioningSequence<T>],
    ) -> Result<()> {
        let cfg = self.net.config();
        if x.shape() != cfg.image_shape() {
            return Err(Error::Shape(format!(
                "denoiser expects {:?}, got {:?}",
                cfg.image_shape(),
                x.shape()
            )));
        }
        if t.len() != x.len() || conds.len() != x.len() {
            return Err(Error::Shape("one timestep and conditioning per image".into()));
        }
        for &ti in t {
            if ti == 0 || ti > self.t_train {
                return Err(Error::TimestepOutOfRange {
                    t: ti,
                    max: self.t_train,
                });
            }
        }
        for c in conds {
            if c.dim() != cfg.cond_dim {
                return Err(Error::Shape(format!(
                    "conditioning dim {} but the model uses {}",
                    c.dim(),
                    cfg.cond_dim
                )));
            }
            if c.len() > cfg.max_cond_len {
                return Err(Error::ConditioningTooLong {
                    len: c.len(),
                    max: cfg.max_cond_len,
                });
            }
        }
        Ok(())
    }

    /// Mean (over the batch) of the per-image summed squared error against
    /// `eps`, and its gradient with respect to every conditioning row of
    /// every sample. Weights are not differentiated.
    pub fn loss_and_cond_grad(
        &self,
        xt: &LatentBatch<T>,
        t: &[usize],
        conds: &[&ConditioningSequence<T>],
        eps: &LatentBatch<T>,
    ) -> Result<(f64, Vec<Vec<T>>)> {
        self.validate(xt, t, conds)?;
        xt.same_layout(eps)?;
        let n = xt.len();
        let slices: Vec<&[T]> = conds.iter().map(|c| c.data()).collect();
        let (pred, cache) = self.net.forward(&self.params, xt.data(), n, t, &slices);
        let (loss, dout) = mse_grad(&pred, eps.data(), n);
        let dcond = self
            .net
            .backward(&self.params, &cache, &dout, None, true)
            .expect("conditioning gradients requested");
        Ok((loss, dcond))
    }

    /// Same loss with gradients for the weights accumulated into `grads`.
    pub fn loss_and_param_grad(
        &self,
        xt: &LatentBatch<T>,
        t: &[usize],
        conds: &[&ConditioningSequence<T>],
        eps: &LatentBatch<T>,
        grads: &mut [T],
    ) -> Result<f64> {
        self.validate(xt, t, conds)?;
        xt.same_layout(eps)?;
        let n = xt.len();
        let slices: Vec<&[T]> = conds.iter().map(|c| c.data()).collect();
        let (pred, cache) = self.net.forward(&self.params, xt.data(), n, t, &slices);
        let (loss, dout) = mse_grad(&pred, eps.data(), n);
        self.net
            .backward(&self.params, &cache, &dout, Some(grads), false);
        Ok(loss)
    }
}

pub const DENOISER_KIND: &str = "denoiser";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedConfig {
    unet: UnetConfig,
    t_train: usize,
}

impl UnetDenoiser<f32> {
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let header = Header {
            kind: DENOISER_KIND.into(),
            seed,
            config: serde_json::to_value(SavedConfig {
                unet: self.config().clone(),
                t_train: self.t_train,
            })?,
            tensors: self.net.layout().specs().to_vec(),
            tokens: vec![],
        };
        checkpoint::write(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, v) = checkpoint::read_kind(path, DENOISER_KIND)?;
        let cfg: SavedConfig = serde_json::from_value(h.config)?;
        Self::from_params(cfg.unet, v, cfg.t_train)
    }
}

fn mse_grad<T: Scalar>(pred: &[T], target: &[T], n: usize) -> (f64, Vec<T>) {
    let scale = 2.0 / n as f64;
    let mut loss = 0.0;
    let dout = pred
        .iter()
        .zip(target)
        .map(|(&p, &e)| {
            let d = p.as_f64() - e.as_f64();
            loss += d * d;
            T::lit(scale * d)
        })
        .collect();
    (loss / n as f64, dout)
}

impl<T: Scalar> NoisePredictor<T> for UnetDenoiser<T> {
    fn input_shape(&self) -> ImageShape {
        self.net.config().image_shape()
    }

    fn cond_dim(&self) -> usize {
        self.net.config().cond_dim
    }

    fn max_cond_len(&self) -> usize {
        self.net.config().max_cond_len
    }

    fn flops_per_image(&self, cond_len: usize) -> u64 {
        self.net.flops_per_image(cond_len)
    }

    fn predict_batch(
        &self,
        x: &LatentBatch<T>,
        t: &[usize],
        conds: &[&ConditioningSequence<T>],
    ) -> Result<LatentBatch<T>> {
        self.validate(x, t, conds)?;
        let n = x.len();
        let d = x.shape().numel();
        let mut out = Vec::with_capacity(n * d);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let slices: Vec<&[T]> = conds[start..end].iter().map(|c| c.data()).collect();
            let (pred, _) = self.net.forward(
                &self.params,
                &x.data()[start * d..end * d],
                end - start,
                &t[start..end],
                &slices,
            );
            out.extend(pred);
        }
        LatentBatch::new(n, x.shape(), out)
    }
}

/// Wraps a predictor and counts single-image evaluations.
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicU64,
}

impl<'a, D: ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) -> u64 {
        self.calls.swap(0, Ordering::SeqCst)
    }
}

impl<T: Scalar, D: NoisePredictor<T> + ?Sized> NoisePredictor<T> for CountingDenoiser<'_, D> {
    fn input_shape(&self) -> ImageShape {
        self.inner.input_shape()
    }

    fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }

    fn max_cond_len(&self) -> usize {
        self.inner.max_cond_len()
    }

    fn flops_per_image(&self, cond_len: usize) -> u64 {
        self.inner.flops_per_image(cond_len)
    }

    fn predict_batch(
        &self,
        x: &LatentBatch<T>,
        t: &[usize],
        conds: &[&ConditioningSequence<T>],
    ) -> Result<LatentBatch<T>> {
        self.calls.fetch_add(x.len() as u64, Ordering::SeqCst);
        self.inner.predict_batch(x, t, conds)
    }
}

/// Token sequence of a random pretraining caption for an image with the
/// given attribute bits: `A picture|image with a <some attribute words>`.
pub fn sample_caption<R: Rng + ?Sized>(bits: &[u8], rng: &mut R) -> Vec<u32> {
    let mut ids = vec![tokens::A];
    if rng.random_bool(0.5) {
        ids.push(tokens::PICTURE);
    } else {
        ids.push(tokens::IMAGE);
    }
    ids.extend([tokens::WITH, tokens::A_LOWER]);
    for (a, &b) in bits.iter().enumerate() {
        if rng.random_bool(0.5) {
            ids.push(tokens::attribute_word(a, b));
        }
    }
    ids
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-image loss of every iteration.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over a window of iterations.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Trains a fresh U-Net on `dataset` with random attribute captions, each
/// replaced by the null prompt with probability `cond_dropout`. The
/// embedding table is read but never modified.
pub fn train_denoiser(
    dataset: &LabeledDataset,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    unet: &UnetConfig,
    embeddings: &EmbeddingTable,
) -> Result<(UnetDenoiser<f32>, TrainReport)> {
    cfg.train.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if embeddings.cond_dim() != unet.cond_dim {
        return Err(Error::Config("embedding and model conditioning dims differ".into()));
    }
    let seed = cfg.train.seed;
    let mut model = UnetDenoiser::<f32>::new(unet.clone(), seed, schedule.t_train());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut opt = AdamW::new(model.params.len(), cfg.train.learning_rate, cfg.train.weight_decay);
    let null = render_tokens::<f32>(&[tokens::NULL], embeddings)?;
    let b = cfg.train.batch_size;
    let mut losses = Vec::with_capacity(cfg.train.iterations);
    let mut grads = vec![0.0f32; model.params.len()];
    for iter in 0..cfg.train.iterations {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..dataset.len())).collect();
        let t: Vec<usize> = (0..b)
            .map(|_| rng.random_range(1..=schedule.t_train()))
            .collect();
        let mut seqs = Vec::with_capacity(b);
        for &i in &idx {
            if rng.random_bool(cfg.cond_dropout) {
                seqs.push(null.clone());
            } else {
                let ids = sample_caption(dataset.attributes[i].bits(), &mut rng);
                seqs.push(render_tokens::<f32>(&ids, embeddings)?);
            }
        }
        let x0 = dataset.images.select(&idx);
        let eps = gaussian_batch::<f32, _>(&mut rng, b, x0.shape());
        let xt = forward_noise_batch(&x0, &t, &eps, schedule)?;
        let conds: Vec<&ConditioningSequence<f32>> = seqs.iter().collect();
        grads.iter_mut().for_each(|g| *g = 0.0);
        let loss = model.loss_and_param_grad(&xt, &t, &conds, &eps, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                phase: "denoiser training",
                iteration: iter,
                loss,
            });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step_with_lr(&mut model.params, &grads, cfg.train.lr_at(iter));
        losses.push(loss);
        if iter % 500 == 0 {
            log::info!("denoiser iteration {iter}: loss {loss:.2}");
        }
    }
    Ok((model, TrainReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::PromptTemplate;

    fn seq<T: Scalar>(len: usize, dim: usize, s: f64) -> ConditioningSequence<T> {
        let data = (0..len * dim).map(|i| T::lit((i as f64 * s).sin())).collect();
        ConditioningSequence::new(vec![tokens::A; len], dim, data).unwrap()
    }

    #[test]
    fn prediction_is_deterministic_and_shape_preserving() {
        let d = UnetDenoiser::<f32>::new(UnetConfig::tiny(), 4, 1000);
        let shape = d.input_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_batch::<f32, _>(&mut rng, 3, shape);
        let c = seq::<f32>(5, 4, 0.3);
        let a = d.predict_batch(&x, &[1, 500, 1000], &[&c, &c, &c]).unwrap();
        let b = d.predict_batch(&x, &[1, 500, 1000], &[&c, &c, &c]).unwrap();
        assert_eq!(a.shape(), shape);
        assert_eq!(a.data(), b.data());
        let single = d.predict_noise(&x.image(1), 500, &c).unwrap();
        assert!(single.max_abs_diff(&a.image(1)) < 1e-6);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let d = UnetDenoiser::<f32>::new(UnetConfig::tiny(), 4, 1000);
        let x = LatentBatch::<f32>::zeros(1, d.input_shape());
        let c = seq::<f32>(3, 4, 0.1);
        assert!(matches!(
            d.predict_batch(&x, &[0], &[&c]),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(d.predict_batch(&x, &[1001], &[&c]).is_err());
        let long = seq::<f32>(17, 4, 0.1);
        assert!(matches!(
            d.predict_batch(&x, &[3], &[&long]),
            Err(Error::ConditioningTooLong { len: 17, max: 16 })
        ));
        let wrong_dim = seq::<f32>(2, 5, 0.1);
        assert!(d.predict_batch(&x, &[3], &[&wrong_dim]).is_err());
        let other = LatentBatch::<f32>::zeros(1, ImageShape::new(1, 4, 4));
        assert!(d.predict_batch(&other, &[3], &[&c]).is_err());
    }

    #[test]
    fn counting_wrapper_counts_images() {
        let d = UnetDenoiser::<f32>::new(UnetConfig::tiny(), 4, 1000);
        let counted = CountingDenoiser::new(&d);
        let x = LatentBatch::<f32>::zeros(3, d.input_shape());
        let c = seq::<f32>(3, 4, 0.1);
        counted.predict_batch(&x, &[1, 2, 3], &[&c, &c, &c]).unwrap();
        counted.predict_noise(&x.image(0), 7, &c).unwrap();
        assert_eq!(counted.calls(), 4);
        assert_eq!(counted.reset(), 4);
        assert_eq!(counted.calls(), 0);
    }

    #[test]
    fn loss_gradient_wrt_embedding_matches_finite_differences() {
        let d = UnetDenoiser::<f64>::new(UnetConfig::tiny(), 11, 1000);
        assert!(d.params().len() <= 10_000);
        let mut table = EmbeddingTable::with_vocabulary(4, 6, 2);
        let tpl = PromptTemplate::class(1, 1, 2);
        table.add_learnable(&tpl.context_token_ids, 5).unwrap();
        table.add_learnable(&tpl.class_token_ids, 5).unwrap();
        let c: ConditioningSequence<f64> = crate::distill::render_prompt(&tpl, &table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = gaussian_batch::<f64, _>(&mut rng, 2, d.input_shape());
        let eps = gaussian_batch::<f64, _>(&mut rng, 2, d.input_shape());
        let t = [120, 640];
        let (_, g) = d.loss_and_cond_grad(&xt, &t, &[&c, &c], &eps).unwrap();
        let pos = c.tokens().iter().position(|&i| i == tpl.class_token_ids[1]).unwrap();
        for k in 0..4 {
            let analytic = g[0][pos * 4 + k] + g[1][pos * 4 + k];
            let loss_at = |delta: f64| {
                let mut cc = c.clone();
                cc.data_mut()[pos * 4 + k] += delta;
                d.loss_and_cond_grad(&xt, &t, &[&cc, &cc], &eps).unwrap().0
            };
            let h = 1e-5;
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-3, "component {k}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn captions_have_template_prefix_and_known_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bits = [1u8, 0, 1, 0, 0, 1];
        for _ in 0..50 {
            let ids = sample_caption(&bits, &mut rng);
            assert_eq!(ids[0], tokens::A);
            assert!(ids.len() >= 4 && ids.len() <= 10);
            for &id in &ids[4..] {
                let a = ((id - 16) / 2) as usize;
                assert_eq!(id, tokens::attribute_word(a, bits[a]));
            }
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig {
            iterations: 100,
            batch_size: 1,
            learning_rate: 1.0,
            weight_decay: 0.0,
            seed: 0,
        };
        assert!((c.lr_at(1) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(99) - 0.1).abs() < 1e-3);
        assert!(c.lr_at(50) < c.lr_at(10));
    }
}
