//! Conditioning tokens: the embedding table, prompt templates, and the
//! textual-inversion style distillation of context and class tokens into a
//! frozen denoiser.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::denoiser::{NoisePredictor, UnetDenoiser};
use crate::diffusion::{forward_noise_batch, gaussian_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::optim::AdamW;
use crate::pipeline::BlackBoxClassifier;
use crate::scalar::Scalar;
use crate::tensor::LatentBatch;

/// Token ids. Fixed vocabulary words live below [`tokens::LEARNABLE_BASE`].
pub mod tokens {
    pub const NULL: u32 = 0;
    pub const A: u32 = 1;
    pub const PICTURE: u32 = 2;
    pub const IMAGE: u32 = 3;
    pub const WITH: u32 = 4;
    pub const A_LOWER: u32 = 5;
    pub const TEMPLATE_WORDS: [u32; 6] = [NULL, A, PICTURE, IMAGE, WITH, A_LOWER];

    pub const LEARNABLE_BASE: u32 = 1000;
    const CONTEXT_BASE: u32 = 1000;
    const CLASS_BASE: u32 = 2000;

    /// Caption word describing `value` of attribute `attr`, used only while
    /// pretraining the denoiser.
    pub fn attribute_word(attr: usize, value: u8) -> u32 {
        16 + 2 * attr as u32 + value as u32
    }

    pub fn context(j: usize) -> u32 {
        CONTEXT_BASE + j as u32
    }

    pub fn class(class_id: usize, j: usize) -> u32 {
        CLASS_BASE + 100 * class_id as u32 + j as u32
    }

    pub fn is_learnable(id: u32) -> bool {
        id >= LEARNABLE_BASE
    }
}

/// An ordered sequence of conditioning embeddings, `len × dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSequence<T = f32> {
    tokens: Vec<u32>,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> ConditioningSequence<T> {
    pub fn new(tokens: Vec<u32>, dim: usize, data: Vec<T>) -> Result<Self> {
        if tokens.is_empty() || dim == 0 || data.len() != tokens.len() * dim {
            return Err(Error::Shape(format!(
                "{} tokens of dim {dim} need {} values, got {}",
                tokens.len(),
                tokens.len() * dim,
                data.len()
            )));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cast<U: Scalar>(&self) -> ConditioningSequence<U> {
        ConditioningSequence {
            tokens: self.tokens.clone(),
            dim: self.dim,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Context,
    Class,
    Null,
}

/// Token layout of a prompt: `A <ctx…> picture`, `A <ctx…> image with a
/// <cls…>`, or the null prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub context_token_ids: Vec<u32>,
    pub class_token_ids: Vec<u32>,
}

impl PromptTemplate {
    pub fn context(n_context: usize) -> Self {
        Self {
            kind: TemplateKind::Context,
            context_token_ids: (0..n_context).map(tokens::context).collect(),
            class_token_ids: Vec::new(),
        }
    }

    /// Class prompt; `n_context = 0` drops the context tokens entirely.
    pub fn class(class_id: usize, n_context: usize, n_class: usize) -> Self {
        Self {
            kind: TemplateKind::Class,
            context_token_ids: (0..n_context).map(tokens::context).collect(),
            class_token_ids: (0..n_class).map(|j| tokens::class(class_id, j)).collect(),
        }
    }

    pub fn null() -> Self {
        Self {
            kind: TemplateKind::Null,
            context_token_ids: Vec::new(),
            class_token_ids: Vec::new(),
        }
    }

    pub fn token_ids(&self) -> Vec<u32> {
        use tokens::*;
        match self.kind {
            TemplateKind::Null => vec![NULL],
            TemplateKind::Context => {
                let mut v = vec![A];
                v.extend(&self.context_token_ids);
                v.push(PICTURE);
                v
            }
            TemplateKind::Class => {
                let mut v = vec![A];
                v.extend(&self.context_token_ids);
                v.extend([IMAGE, WITH, A_LOWER]);
                v.extend(&self.class_token_ids);
                v
            }
        }
    }
}

/// Frozen vocabulary embeddings plus learnable token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    cond_dim: usize,
    fixed: BTreeMap<u32, Vec<f32>>,
    learnable: BTreeMap<u32, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn empty(cond_dim: usize) -> Self {
        Self {
            cond_dim,
            fixed: BTreeMap::new(),
            learnable: BTreeMap::new(),
        }
    }

    /// Template words plus two caption words per attribute, each a seeded
    /// standard-normal vector.
    pub fn with_vocabulary(cond_dim: usize, num_attributes: usize, seed: u64) -> Self {
        let mut t = Self::empty(cond_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<u32> = tokens::TEMPLATE_WORDS.to_vec();
        for a in 0..num_attributes {
            ids.push(tokens::attribute_word(a, 0));
            ids.push(tokens::attribute_word(a, 1));
        }
        for id in ids {
            let v = (0..cond_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect();
            t.fixed.insert(id, v);
        }
        t
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn fixed(&self) -> &BTreeMap<u32, Vec<f32>> {
        &self.fixed
    }

    pub fn learnable(&self) -> &BTreeMap<u32, Vec<f32>> {
        &self.learnable
    }

    pub fn insert_fixed(&mut self, id: u32, v: Vec<f32>) -> Result<()> {
        if tokens::is_learnable(id) || v.len() != self.cond_dim {
            return Err(Error::Config(format!("invalid fixed token {id}")));
        }
        self.fixed.insert(id, v);
        Ok(())
    }

    pub fn insert_learnable(&mut self, id: u32, v: Vec<f32>) -> Result<()> {
        if !tokens::is_learnable(id) || v.len() != self.cond_dim {
            return Err(Error::Config(format!("invalid learnable token {id}")));
        }
        self.learnable.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&[f32]> {
        self.fixed
            .get(&id)
            .or_else(|| self.learnable.get(&id))
            .map(|v| v.as_slice())
    }

    /// Root mean square over all fixed embedding entries.
    pub fn fixed_rms(&self) -> f64 {
        let (s, n) = self.fixed.values().flatten().fold((0.0, 0usize), |(s, n), &v| {
            (s + (v as f64).powi(2), n + 1)
        });
        if n == 0 {
            1.0
        } else {
            (s / n as f64).sqrt()
        }
    }

    /// Adds learnable tokens not yet present, drawn from a standard normal
    /// scaled by [`Self::fixed_rms`]. Existing rows are left untouched.
    pub fn add_learnable(&mut self, ids: &[u32], seed: u64) -> Result<()> {
        let scale = self.fixed_rms();
        for &id in ids {
            if !tokens::is_learnable(id) {
                return Err(Error::Config(format!("token {id} is in the fixed range")));
            }
            if self.learnable.contains_key(&id) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9));
            let v = (0..self.cond_dim)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
                .collect();
            self.learnable.insert(id, v);
        }
        Ok(())
    }

    pub fn fixed_digest(&self) -> String {
        digest_rows(&self.fixed)
    }

    pub fn learnable_digest(&self, exclude: &[u32]) -> String {
        let rows = self
            .learnable
            .iter()
            .filter(|(id, _)| !exclude.contains(id))
            .map(|(&id, v)| (id, v.clone()))
            .collect();
        digest_rows(&rows)
    }
}

fn digest_rows(rows: &BTreeMap<u32, Vec<f32>>) -> String {
    let mut h = Sha256::new();
    for (id, v) in rows {
        h.update(id.to_le_bytes());
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn render_prompt<T: Scalar>(
    template: &PromptTemplate,
    table: &EmbeddingTable,
) -> Result<ConditioningSequence<T>> {
    render_tokens(&template.token_ids(), table)
}

pub fn render_tokens<T: Scalar>(ids: &[u32], table: &EmbeddingTable) -> Result<ConditioningSequence<T>> {
    let mut data = Vec::with_capacity(ids.len() * table.cond_dim);
    for &id in ids {
        let row = table.get(id).ok_or(Error::UnknownToken(id))?;
        data.extend(row.iter().map(|&v| T::lit(v as f64)));
    }
    ConditioningSequence::new(ids.to_vec(), table.cond_dim, data)
}

/// Number of learnable tokens per concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    Single,
    Multi,
}

impl TokenMode {
    pub fn count(self) -> usize {
        match self {
            TokenMode::Single => 1,
            TokenMode::Multi => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingOptimizer {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: EmbeddingOptimizer,
    pub tokens: TokenMode,
    /// Whether class prompts include the context tokens.
    pub use_context: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 800,
            batch_size: 64,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            seed: 0,
            optimizer: EmbeddingOptimizer::Sgd,
            tokens: TokenMode::Multi,
            use_context: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("distillation needs batch_size > 0, lr > 0, wd >= 0".into()));
        }
        Ok(())
    }

    pub fn context_template(&self) -> PromptTemplate {
        PromptTemplate::context(self.tokens.count())
    }

    pub fn class_template(&self, class_id: usize) -> PromptTemplate {
        let n_ctx = if self.use_context { self.tokens.count() } else { 0 };
        PromptTemplate::class(class_id, n_ctx, self.tokens.count())
    }
}

/// Per-iteration mean loss (per image, summed over pixels).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub losses: Vec<f64>,
    pub subset_size: usize,
}

/// Learns the context tokens on every image of `dataset`.
pub fn train_context_embeddings(
    dataset: &LabeledDataset,
    denoiser: &UnetDenoiser<f32>,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    table: &EmbeddingTable,
) -> Result<(EmbeddingTable, DistillReport)> {
    let template = cfg.context_template();
    let mut out = table.clone();
    out.add_learnable(&template.context_token_ids, cfg.seed)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let losses = optimize_tokens(
        &dataset.images,
        &all,
        denoiser,
        schedule,
        cfg,
        &mut out,
        &template,
        &template.context_token_ids,
        cfg.seed,
        "context distillation",
    )?;
    Ok((
        out,
        DistillReport {
            losses,
            subset_size: all.len(),
        },
    ))
}

/// Learns the class tokens of `class_id` on the images the classifier
/// assigns to that class. Context tokens are frozen.
pub fn train_class_embeddings(
    dataset: &LabeledDataset,
    classifier: &dyn BlackBoxClassifier,
    class_id: usize,
    denoiser: &UnetDenoiser<f32>,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    table: &EmbeddingTable,
) -> Result<(EmbeddingTable, DistillReport)> {
    let preds = classifier.predict(&dataset.images)?;
    let subset: Vec<usize> = preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.label == class_id)
        .map(|(i, _)| i)
        .collect();
    if subset.is_empty() {
        return Err(Error::EmptyClassSubset(class_id));
    }
    let template = cfg.class_template(class_id);
    for &id in &template.context_token_ids {
        if table.get(id).is_none() {
            return Err(Error::Precondition(
                "context tokens must be trained before class tokens".into(),
            ));
        }
    }
    let mut out = table.clone();
    out.add_learnable(&template.class_token_ids, cfg.seed)?;
    let seed = cfg.seed.wrapping_add(1 + class_id as u64);
    let losses = optimize_tokens(
        &dataset.images,
        &subset,
        denoiser,
        schedule,
        cfg,
        &mut out,
        &template,
        &template.class_token_ids,
        seed,
        "class distillation",
    )?;
    Ok((
        out,
        DistillReport {
            losses,
            subset_size: subset.len(),
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn optimize_tokens(
    images: &LatentBatch<f32>,
    pool: &[usize],
    denoiser: &UnetDenoiser<f32>,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
    table: &mut EmbeddingTable,
    template: &PromptTemplate,
    trainable: &[u32],
    seed: u64,
    phase: &'static str,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = table.cond_dim();
    let ids = template.token_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<f32> = trainable
        .iter()
        .flat_map(|&id| table.get(id).expect("added above").to_vec())
        .collect();
    let mut adam = AdamW::new(flat.len(), cfg.learning_rate, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let b = cfg.batch_size;
    for iter in 0..cfg.iterations {
        for (k, &id) in trainable.iter().enumerate() {
            table.insert_learnable(id, flat[k * dim..(k + 1) * dim].to_vec())?;
        }
        let seq: ConditioningSequence<f32> = render_tokens(&ids, table)?;
        let idx: Vec<usize> = (0..b).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let t: Vec<usize> = (0..b)
            .map(|_| rng.random_range(1..=schedule.t_train()))
            .collect();
        let x0 = images.select(&idx);
        let eps = gaussian_batch::<f32, _>(&mut rng, b, x0.shape());
        let xt = forward_noise_batch(&x0, &t, &eps, schedule)?;
        let conds = vec![&seq; b];
        let (loss, dcond) = denoiser.loss_and_cond_grad(&xt, &t, &conds, &eps)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                phase,
                iteration: iter,
                loss,
            });
        }
        losses.push(loss);
        let mut g = vec![0.0f32; flat.len()];
        for per in &dcond {
            for (pos, id) in ids.iter().enumerate() {
                if let Some(k) = trainable.iter().position(|t| t == id) {
                    for d in 0..dim {
                        g[k * dim + d] += per[pos * dim + d];
                    }
                }
            }
        }
        match cfg.optimizer {
            EmbeddingOptimizer::Sgd => {
                crate::nn::optim::Sgd {
                    lr: cfg.learning_rate,
                    weight_decay: cfg.weight_decay,
                }
                .step(&mut flat, &g);
            }
            EmbeddingOptimizer::AdamW => adam.step(&mut flat, &g),
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                phase,
                iteration: iter,
                loss,
            });
        }
        if iter % 100 == 0 {
            log::debug!("{phase}: iteration {iter} loss {loss:.3}");
        }
    }
    for (k, &id) in trainable.iter().enumerate() {
        table.insert_learnable(id, flat[k * dim..(k + 1) * dim].to_vec())?;
    }
    Ok(losses)
}

/// Per-image diffusion loss under `seq`, averaged over `draws` noise draws.
/// The same `seed` gives the same `(t, eps)` draws for every prompt, so two
/// prompts can be compared pairwise.
pub fn prompt_losses<D: NoisePredictor<f32> + ?Sized>(
    images: &LatentBatch<f32>,
    denoiser: &D,
    schedule: &NoiseSchedule,
    seq: &ConditioningSequence<f32>,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = images.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; n];
    for _ in 0..draws {
        let t: Vec<usize> = (0..n)
            .map(|_| rng.random_range(1..=schedule.t_train()))
            .collect();
        let eps = gaussian_batch::<f32, _>(&mut rng, n, images.shape());
        let xt = forward_noise_batch(images, &t, &eps, schedule)?;
        let pred = denoiser.predict_batch(&xt, &t, &vec![seq; n])?;
        let d = images.shape().numel();
        for (i, a) in acc.iter_mut().enumerate() {
            *a += crate::diffusion::squared_error(
                &eps.data()[i * d..(i + 1) * d],
                &pred.data()[i * d..(i + 1) * d],
            );
        }
    }
    Ok(acc.into_iter().map(|v| v / draws.max(1) as f64).collect())
}
