//! Noise schedules and the closed-form diffusion algebra every sampler and
//! trainer builds on.
//!
//! Timesteps are 1-based (`1..=T`); `alpha_bar(0)` is defined as 1 so that
//! the first inversion step from a clean image has well-defined
//! coefficients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::distill::ConditioningSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageShape, LatentBatch, LatentImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            num_inference_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(
            self.t_train,
            self.beta_start,
            self.beta_end,
            self.num_inference_steps,
        )
    }
}

/// All diffusion constants, stored in `f64` and indexed by 1-based step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_train: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    inference_steps: Vec<usize>,
}

/// Linear-β schedule with `num_inference_steps` evenly spaced sampling
/// steps `⌊k·T/S⌋`, `k = 1..=S`.
pub fn build_schedule(
    t_train: usize,
    beta_start: f64,
    beta_end: f64,
    num_inference_steps: usize,
) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::Schedule("t_train must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    if num_inference_steps == 0 || num_inference_steps > t_train {
        return Err(Error::Schedule(format!(
            "{num_inference_steps} inference steps for {t_train} training steps"
        )));
    }
    let betas: Vec<f64> = if t_train == 1 {
        vec![beta_start]
    } else {
        (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_train);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    // Posterior standard deviation of the ancestral sampler.
    let sigmas = (0..t_train)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).max(0.0).sqrt()
        })
        .collect();
    let inference_steps = (1..=num_inference_steps)
        .map(|k| k * t_train / num_inference_steps)
        .collect();
    Ok(NoiseSchedule {
        t_train,
        betas,
        alphas,
        alpha_bars,
        sigmas,
        inference_steps,
    })
}

impl NoiseSchedule {
    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn num_inference_steps(&self) -> usize {
        self.inference_steps.len()
    }

    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.t_train,
            });
        }
        Ok(())
    }

    /// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Training timestep at sampler position `pos` (`0` is the clean image).
    pub fn step_at(&self, pos: usize) -> usize {
        if pos == 0 {
            0
        } else {
            self.inference_steps[pos - 1]
        }
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`, applied elementwise.
pub fn forward_noise<T: Scalar>(
    x0: &LatentImage<T>,
    t: usize,
    eps: &LatentImage<T>,
    schedule: &NoiseSchedule,
) -> Result<LatentImage<T>> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape("x0 and eps differ in shape".into()));
    }
    let (a, b) = noise_coefs::<T>(schedule.alpha_bar(t));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    LatentImage::new(x0.shape(), data)
}

/// Per-sample [`forward_noise`] over a batch.
pub fn forward_noise_batch<T: Scalar>(
    x0: &LatentBatch<T>,
    t: &[usize],
    eps: &LatentBatch<T>,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch<T>> {
    x0.same_layout(eps)?;
    if t.len() != x0.len() {
        return Err(Error::Shape("one timestep per image".into()));
    }
    let d = x0.shape().numel();
    let mut out = Vec::with_capacity(x0.data().len());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_t(ti)?;
        let (a, b) = noise_coefs::<T>(schedule.alpha_bar(ti));
        out.extend(
            x0.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&eps.data()[i * d..(i + 1) * d])
                .map(|(&x, &e)| a * x + b * e),
        );
    }
    LatentBatch::new(x0.len(), x0.shape(), out)
}

fn noise_coefs<T: Scalar>(alpha_bar: f64) -> (T, T) {
    (T::lit(alpha_bar.sqrt()), T::lit((1.0 - alpha_bar).sqrt()))
}

/// One ancestral step:
/// `(1/√α_t)(x_t − ((1−α_t)/√(1−ᾱ_t))·eps_pred) + σ_t·noise`.
pub fn ddpm_step<T: Scalar>(
    x_t: &LatentBatch<T>,
    t: usize,
    eps_pred: &LatentBatch<T>,
    noise: &LatentBatch<T>,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch<T>> {
    schedule.check_t(t)?;
    x_t.same_layout(eps_pred)?;
    x_t.same_layout(noise)?;
    ddpm_step_raw(
        x_t,
        eps_pred,
        noise,
        schedule.alpha(t),
        schedule.alpha_bar(t),
        schedule.sigma(t),
    )
}

/// [`ddpm_step`] with explicit constants.
pub fn ddpm_step_raw<T: Scalar>(
    x_t: &LatentBatch<T>,
    eps_pred: &LatentBatch<T>,
    noise: &LatentBatch<T>,
    alpha: f64,
    alpha_bar: f64,
    sigma: f64,
) -> Result<LatentBatch<T>> {
    let eps_coef = if (1.0 - alpha).abs() == 0.0 {
        0.0
    } else if alpha_bar >= 1.0 {
        return Err(Error::Step(
            "ᾱ_t = 1 with a non-zero noise coefficient".into(),
        ));
    } else {
        (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
    };
    let inv = T::lit(1.0 / alpha.sqrt());
    let ec = T::lit(eps_coef);
    let s = T::lit(sigma);
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| inv * (x - ec * e) + s * z)
        .collect();
    LatentBatch::new(x_t.len(), x_t.shape(), data)
}

/// Deterministic (σ = 0) step between arbitrary noise levels:
/// `a·x_t + b·eps` with the coefficients of [`edict_coeffs_from`].
pub fn ddim_step<T: Scalar>(
    x_t: &LatentBatch<T>,
    eps: &LatentBatch<T>,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
) -> Result<LatentBatch<T>> {
    let (a, b) = edict_coeffs_from(alpha_bar_prev, alpha_bar_t);
    x_t.axpby(T::lit(a), eps, T::lit(b))
}

/// `a = √(ᾱ_prev/ᾱ_t)`, `b = √(1−ᾱ_prev) − √(ᾱ_prev(1−ᾱ_t)/ᾱ_t)`.
pub fn edict_coeffs_from(alpha_bar_prev: f64, alpha_bar_t: f64) -> (f64, f64) {
    let a = (alpha_bar_prev / alpha_bar_t).sqrt();
    let b = (1.0 - alpha_bar_prev).sqrt()
        - (alpha_bar_prev * (1.0 - alpha_bar_t) / alpha_bar_t).sqrt();
    (a, b)
}

/// Coupled-sampler coefficients at sampler position `pos ∈ 1..=S`, using
/// the preceding position's `ᾱ` (or 1 before the first step).
pub fn edict_coeffs(pos: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    if pos == 0 || pos > schedule.num_inference_steps() {
        return Err(Error::Step(format!(
            "sampler position {pos} outside 1..={}",
            schedule.num_inference_steps()
        )));
    }
    let t = schedule.step_at(pos);
    let prev = schedule.step_at(pos - 1);
    Ok(edict_coeffs_from(
        schedule.alpha_bar(prev),
        schedule.alpha_bar(t),
    ))
}

/// `‖eps − ε_θ(x_t(x0, t, eps), t, C)‖²`, summed over elements.
pub fn training_loss<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    x0: &LatentImage<T>,
    eps: &LatentImage<T>,
    t: usize,
    cond: &ConditioningSequence<T>,
    denoiser: &D,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let xt = forward_noise(x0, t, eps, schedule)?;
    let pred = denoiser.predict_noise(&xt, t, cond)?;
    Ok(squared_error(eps.data(), pred.data()))
}

pub fn squared_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum()
}

pub fn gaussian_batch<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    shape: ImageShape,
) -> LatentBatch<T> {
    let data = (0..n * shape.numel())
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    LatentBatch::new(n, shape, data).expect("sized")
}

/// Full `T`-step ancestral sampling chain from Gaussian noise.
pub fn sample_ancestral<T: Scalar, D: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    conds: &[&ConditioningSequence<T>],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentBatch<T>> {
    let n = conds.len();
    let shape = denoiser.input_shape();
    let mut x = gaussian_batch::<T, _>(rng, n, shape);
    for t in (1..=schedule.t_train()).rev() {
        let eps = denoiser.predict_batch(&x, &vec![t; n], conds)?;
        let noise = if t > 1 {
            gaussian_batch::<T, _>(rng, n, shape)
        } else {
            LatentBatch::zeros(n, shape)
        };
        x = ddpm_step(&x, t, &eps, &noise, schedule)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(v: &[f64]) -> LatentImage<f64> {
        LatentImage::new(ImageShape::new(1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn default_schedule_has_fifty_even_steps() {
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        assert_eq!(s.num_inference_steps(), 50);
        let st = s.inference_steps();
        assert_eq!(st[0], 20);
        assert_eq!(*st.last().unwrap(), 1000);
        assert!(st.windows(2).all(|w| w[1] - w[0] == 20));
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(build_schedule(10, 0.01, 0.01, 5).is_err());
        assert!(build_schedule(10, 0.02, 0.01, 5).is_err());
        assert!(build_schedule(10, 0.01, 0.02, 11).is_err());
        assert!(build_schedule(10, 0.0, 0.02, 5).is_err());
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        for t in 1..=1000 {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            assert!(s.sigma(t) >= 0.0);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        for pos in 1..=50 {
            let (a, _) = edict_coeffs(pos, &s).unwrap();
            assert!(a > 0.0);
        }
    }

    #[test]
    fn forward_noise_limits() {
        let mut s = build_schedule(4, 0.1, 0.2, 2).unwrap();
        // ᾱ = 0.25
        s.alpha_bars[0] = 0.25;
        let x0 = img(&[1.0, -0.5]);
        let eps = img(&[0.3, 2.0]);
        let y = forward_noise(&x0, 1, &eps, &s).unwrap();
        for i in 0..2 {
            let want = 0.5 * x0.data()[i] + 0.75f64.sqrt() * eps.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-15);
        }
        s.alpha_bars[0] = 1.0;
        assert_eq!(forward_noise(&x0, 1, &eps, &s).unwrap(), x0);
        s.alpha_bars[0] = 1e-6;
        let y = forward_noise(&x0, 1, &eps, &s).unwrap();
        assert!(y.max_abs_diff(&eps) < 1e-3);
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
        assert!(forward_noise(&x0, 5, &eps, &s).is_err());
    }

    #[test]
    fn ddpm_step_degenerate_cases() {
        let shape = ImageShape::new(1, 1, 3);
        let x = LatentBatch::new(1, shape, vec![0.2f64, -1.0, 3.0]).unwrap();
        let e = LatentBatch::new(1, shape, vec![5.0f64, 1.0, -2.0]).unwrap();
        let z = LatentBatch::new(1, shape, vec![9.0f64, 9.0, 9.0]).unwrap();
        // α = 1, σ = 0: unchanged
        assert_eq!(ddpm_step_raw(&x, &e, &z, 1.0, 0.5, 0.0).unwrap(), x);
        // σ = 0, eps = 0: x/√α
        let zero = LatentBatch::zeros(1, shape);
        let y = ddpm_step_raw(&x, &zero, &z, 0.64, 0.3, 0.0).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / 0.8).abs() < 1e-14);
        }
        assert!(ddpm_step_raw(&x, &e, &z, 0.9, 1.0, 0.0).is_err());
    }

    #[test]
    fn edict_coefficient_examples() {
        assert_eq!(edict_coeffs_from(0.3, 0.3), (1.0, 0.0));
        let (a, b) = edict_coeffs_from(0.5, 0.25);
        // hand arithmetic: √2 and √0.5 − √1.5
        assert!((a - 1.414_213_562_373_095).abs() < 1e-14);
        assert!((b - (0.707_106_781_186_547_5 - 1.224_744_871_391_589)).abs() < 1e-14);
        let ab = 0.7;
        let (a, b) = edict_coeffs_from(1.0, ab);
        assert!((a - 1.0 / ab.sqrt()).abs() < 1e-14);
        assert!((b + ((1.0 - ab) / ab).sqrt()).abs() < 1e-14);
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        assert!(edict_coeffs(0, &s).is_err());
        assert!(edict_coeffs(51, &s).is_err());
        let (a1, b1) = edict_coeffs(1, &s).unwrap();
        let ab1 = s.alpha_bar(20);
        assert!((a1 - 1.0 / ab1.sqrt()).abs() < 1e-12);
        assert!((b1 + ((1.0 - ab1) / ab1).sqrt()).abs() < 1e-12);
    }

    proptest! {
        // noise then the deterministic reverse step with the true noise
        // recovers x0 on a single-step schedule
        #[test]
        fn noising_round_trip(t in 1usize..=1000, seed in 0u64..1000) {
            let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
            let shape = ImageShape::new(1, 4, 4);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let x0 = gaussian_batch::<f64, _>(&mut rng, 1, shape).clamp(-1.0, 1.0);
            let eps = gaussian_batch::<f64, _>(&mut rng, 1, shape);
            let xt = forward_noise_batch(&x0, &[t], &eps, &s).unwrap();
            let back = ddim_step(&xt, &eps, s.alpha_bar(t), 1.0).unwrap();
            prop_assert!(back.max_abs_diff(&x0) <= 1e-5);
            let back32 = ddim_step(&xt.cast::<f32>(), &eps.cast::<f32>(), s.alpha_bar(t), 1.0).unwrap();
            prop_assert!(back32.cast::<f64>().max_abs_diff(&x0) <= 1e-3);
        }
    }
}
