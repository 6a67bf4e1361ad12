//! Synthetic attribute-controlled dataset, its exact decoder, and the
//! auxiliary networks (target classifier, attribute oracle, identity
//! embedder, self-supervised encoder) trained on it.

pub mod io;
pub mod nets;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ImageShape, LatentBatch, LatentImage};
pub use render::{Nuisance, RendererParams, NUM_IDENTITIES};

/// `K` binary attributes of one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeVector {
    bits: Vec<u8>,
}

impl AttributeVector {
    pub fn new(bits: Vec<u8>) -> Self {
        assert!(bits.iter().all(|&b| b <= 1), "attribute bits must be 0 or 1");
        Self { bits }
    }

    pub fn from_index(index: usize, k: usize) -> Self {
        Self::new((0..k).map(|i| ((index >> i) & 1) as u8).collect())
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> u8 {
        self.bits[i]
    }

    pub fn with(&self, i: usize, v: u8) -> Self {
        let mut b = self.bits.clone();
        b[i] = v;
        Self::new(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_shape: ImageShape,
    pub num_attributes: usize,
    pub class_attribute: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    /// Marginal probability of each attribute being set. The confounder's
    /// entry is implied by `confounder_agreement` and ignored.
    pub probabilities: Vec<f64>,
    /// Attribute copied from the class attribute with probability
    /// `confounder_agreement` (and flipped otherwise).
    pub confounder: usize,
    pub confounder_agreement: f64,
    pub renderer: RendererParams,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_shape: ImageShape::new(1, render::SIZE, render::SIZE),
            num_attributes: 6,
            class_attribute: 0,
            train_samples: 4000,
            val_samples: 512,
            test_samples: 200,
            seed: 0,
            probabilities: vec![0.5, 0.5, 0.5, 0.3, 0.4, 0.5],
            confounder: 1,
            confounder_agreement: 0.8,
            renderer: RendererParams::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_shape;
        if s.height != render::SIZE || s.width != render::SIZE || !(s.channels == 1 || s.channels == 3) {
            return Err(Error::Config(format!(
                "the renderer draws 32×32 images with 1 or 3 channels, not {s:?}"
            )));
        }
        if self.num_attributes != 6 {
            return Err(Error::Config("the renderer draws exactly 6 attributes".into()));
        }
        if self.class_attribute >= self.num_attributes
            || self.confounder >= self.num_attributes
            || self.confounder == self.class_attribute
        {
            return Err(Error::Config("class/confounder attribute out of range".into()));
        }
        if self.probabilities.len() != self.num_attributes
            || self.probabilities.iter().any(|p| !(0.0..=1.0).contains(p))
            || !(0.0..=1.0).contains(&self.confounder_agreement)
        {
            return Err(Error::Config("attribute probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
            Split::Test => self.test_samples,
        }
    }

    pub fn sample_attributes<R: Rng + ?Sized>(&self, rng: &mut R) -> AttributeVector {
        let mut bits = vec![0u8; self.num_attributes];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = u8::from(rng.random_bool(self.probabilities[i]));
        }
        let keep = rng.random_bool(self.confounder_agreement);
        let c = bits[self.class_attribute];
        bits[self.confounder] = if keep { c } else { 1 - c };
        AttributeVector::new(bits)
    }

    pub fn sample_nuisance<R: Rng + ?Sized>(&self, rng: &mut R) -> Nuisance {
        let r = &self.renderer;
        Nuisance {
            head_tone: rng.random_range(r.head_tone.0..=r.head_tone.1),
            mouth_curvature: rng.random_range(r.mouth_curvature.0..=r.mouth_curvature.1),
            texture_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Renders, adds pixel noise from `rng`, and quantizes to 8-bit levels
    /// so the image survives a PNG round trip bit for bit.
    pub fn render_image<R: Rng + ?Sized>(
        &self,
        attrs: &AttributeVector,
        identity: usize,
        nuisance: &Nuisance,
        rng: &mut R,
    ) -> LatentImage<f32> {
        let clean = render::render(attrs, identity, nuisance, &self.renderer);
        let gray: Vec<f32> = clean
            .iter()
            .map(|&v| {
                let z: f64 = rng.sample(StandardNormal);
                quantize(v + self.renderer.noise * z)
            })
            .collect();
        let mut data = Vec::with_capacity(self.image_shape.numel());
        for _ in 0..self.image_shape.channels {
            data.extend_from_slice(&gray);
        }
        LatentImage::new(self.image_shape, data).expect("renderer size")
    }
}

/// Maps `[-1, 1]` to 8-bit levels: `round((v + 1) · 127.5)`.
pub fn pixel_to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn u8_to_pixel(u: u8) -> f32 {
    u as f32 / 127.5 - 1.0
}

pub fn quantize(v: f64) -> f32 {
    u8_to_pixel(pixel_to_u8(v))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Images with their class labels, attributes and identity ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub split: Split,
    pub images: LatentBatch<f32>,
    pub labels: Vec<usize>,
    pub attributes: Vec<AttributeVector>,
    pub identities: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        split: Split,
        images: LatentBatch<f32>,
        labels: Vec<usize>,
        attributes: Vec<AttributeVector>,
        identities: Vec<usize>,
    ) -> Result<Self> {
        let n = images.len();
        if labels.len() != n || attributes.len() != n || identities.len() != n {
            return Err(Error::Shape("dataset columns differ in length".into()));
        }
        Ok(Self {
            split,
            images,
            labels,
            attributes,
            identities,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            split: self.split,
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            attributes: idx.iter().map(|&i| self.attributes[i].clone()).collect(),
            identities: idx.iter().map(|&i| self.identities[i]).collect(),
        }
    }

    pub fn image_digest(&self, i: usize) -> String {
        digest_f32(self.images.image_data(i))
    }
}

pub fn digest_f32(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Renders one split. Each image draws from its own stream keyed by
/// `(seed, split, index)`, so splits never share random draws.
pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.samples(split);
    let mut data = Vec::with_capacity(n * spec.image_shape.numel());
    let mut labels = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    let mut identities = Vec::with_capacity(n);
    for i in 0..n {
        let key = splitmix(spec.seed ^ splitmix(split.tag() << 48 ^ i as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let attrs = spec.sample_attributes(&mut rng);
        let identity = rng.random_range(0..NUM_IDENTITIES);
        let nuisance = spec.sample_nuisance(&mut rng);
        let img = spec.render_image(&attrs, identity, &nuisance, &mut rng);
        data.extend_from_slice(img.data());
        labels.push(attrs.get(spec.class_attribute) as usize);
        attributes.push(attrs);
        identities.push(identity);
    }
    LabeledDataset::new(
        split,
        LatentBatch::new(n, spec.image_shape, data)?,
        labels,
        attributes,
        identities,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        test: generate_split(spec, Split::Test)?,
    })
}

/// Rule-based decoding of all attributes from the first channel. Exact on
/// renders from this family; for generated images use the trained oracle
/// in [`nets`].
pub fn oracle_attributes(x: &LatentImage<f32>, spec: &SyntheticSpec) -> AttributeVector {
    let hw = spec.image_shape.height * spec.image_shape.width;
    let gray: Vec<f64> = x.data()[..hw].iter().map(|&v| v as f64).collect();
    render::rule_decode(&gray)
}
