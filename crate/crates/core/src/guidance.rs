//! Classifier-free guidance and its negative-prompt variant.

use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::distill::ConditioningSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LatentBatch, LatentImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Push away from the null prompt.
    Cfg,
    /// Push away from the caller's negative prompt.
    #[serde(alias = "ng")]
    Negative,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfg" => Ok(Self::Cfg),
            "ng" | "negative" => Ok(Self::Negative),
            other => Err(Error::Config(format!("unknown guidance mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub w: f64,
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode, w: f64) -> Result<Self> {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {w}")));
        }
        Ok(Self { mode, w })
    }
}

/// `(1+w)·pos − w·neg` elementwise, evaluated as `pos + w·(pos − neg)` so
/// that equal branches and `w = 0` return `pos` bit for bit.
pub fn combine<T: Scalar>(pos: &[T], neg: &[T], w: f64) -> Result<Vec<T>> {
    if pos.len() != neg.len() {
        return Err(Error::Shape(format!(
            "guidance branches have {} and {} elements",
            pos.len(),
            neg.len()
        )));
    }
    let w = T::lit(w);
    Ok(pos.iter().zip(neg).map(|(&p, &n)| p + w * (p - n)).collect())
}

pub fn cfg_combine<T: Scalar>(
    eps_cond: &LatentImage<T>,
    eps_uncond: &LatentImage<T>,
    w: f64,
) -> Result<LatentImage<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Shape("guidance branches differ in shape".into()));
    }
    LatentImage::new(eps_cond.shape(), combine(eps_cond.data(), eps_uncond.data(), w)?)
}

/// Same arithmetic as [`cfg_combine`], with the source-class prediction in
/// place of the unconditional one.
pub fn negative_combine<T: Scalar>(
    eps_target: &LatentImage<T>,
    eps_source: &LatentImage<T>,
    w: f64,
) -> Result<LatentImage<T>> {
    cfg_combine(eps_target, eps_source, w)
}

/// Guided noise estimate for a batch. Every image is evaluated exactly
/// twice (once per branch), in a single batched call of `2n` images.
/// In [`GuidanceMode::Cfg`] the negative branch uses `null` and `neg` is
/// ignored.
#[allow(clippy::too_many_arguments)]
pub fn guided_score<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    x: &LatentBatch<T>,
    t: usize,
    pos: &[&ConditioningSequence<T>],
    neg: &[&ConditioningSequence<T>],
    null: &ConditioningSequence<T>,
    cfg: &GuidanceConfig,
) -> Result<LatentBatch<T>> {
    let n = x.len();
    if pos.len() != n || neg.len() != n {
        return Err(Error::Shape("one positive and negative prompt per image".into()));
    }
    let both = LatentBatch::concat(&[x, x])?;
    let mut conds: Vec<&ConditioningSequence<T>> = Vec::with_capacity(2 * n);
    conds.extend_from_slice(pos);
    match cfg.mode {
        GuidanceMode::Cfg => conds.extend(std::iter::repeat_n(null, n)),
        GuidanceMode::Negative => conds.extend_from_slice(neg),
    }
    let eps = denoiser.predict_batch(&both, &vec![t; 2 * n], &conds)?;
    let (p, q) = eps.split_at(n);
    LatentBatch::new(n, x.shape(), combine(p.data(), q.data(), cfg.w)?)
}
