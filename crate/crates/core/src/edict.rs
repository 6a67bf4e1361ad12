//! The coupled two-stream sampler. Each step is an affine coupling, so the
//! inversion steps undo the denoising steps exactly (up to rounding)
//! regardless of what the denoiser predicts.
//!
//! States are batched: every field holds `n` images that advance together.

use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::diffusion::{edict_coeffs, NoiseSchedule};
use crate::distill::ConditioningSequence;
use crate::error::{Error, Result};
use crate::guidance::{guided_score, GuidanceConfig};
use crate::scalar::Scalar;
use crate::tensor::LatentBatch;

#[derive(Clone, Debug, PartialEq)]
pub struct EdictState<T = f32> {
    pub x: LatentBatch<T>,
    pub y: LatentBatch<T>,
    /// Sampler position: 0 is the clean image, `S` the noisiest step.
    pub step_index: usize,
}

impl<T: Scalar> EdictState<T> {
    pub fn from_clean(x0: &LatentBatch<T>) -> Self {
        Self {
            x: x0.clone(),
            y: x0.clone(),
            step_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdictConfig {
    pub p: f64,
    pub tau: usize,
    pub guidance: GuidanceConfig,
}

impl EdictConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("mixing weight p must be in (0, 1), got {}", self.p)));
        }
        if self.tau > schedule.num_inference_steps() {
            return Err(Error::Config(format!(
                "tau = {} exceeds the {} sampler steps",
                self.tau,
                schedule.num_inference_steps()
            )));
        }
        Ok(())
    }
}

/// Per-image positive and negative prompts plus the null prompt used by
/// classifier-free mode.
#[derive(Clone, Copy)]
pub struct Prompts<'a, T> {
    pub pos: &'a [&'a ConditioningSequence<T>],
    pub neg: &'a [&'a ConditioningSequence<T>],
    pub null: &'a ConditioningSequence<T>,
}

fn mix<T: Scalar>(a: &LatentBatch<T>, wa: f64, b: &LatentBatch<T>, wb: f64) -> Result<LatentBatch<T>> {
    a.axpby(T::lit(wa), b, T::lit(wb))
}

/// One denoising step from `state.step_index` to `state.step_index − 1`.
/// Performs four denoiser evaluations per image.
pub fn edict_denoise_step<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    state: &EdictState<T>,
    denoiser: &D,
    prompts: Prompts<'_, T>,
    cfg: &EdictConfig,
    schedule: &NoiseSchedule,
) -> Result<EdictState<T>> {
    let i = state.step_index;
    if i == 0 {
        return Err(Error::Step("cannot denoise below the clean image".into()));
    }
    let t = schedule.step_at(i);
    let (a, b) = edict_coeffs(i, schedule)?;
    let p = cfg.p;
    let score = |z: &LatentBatch<T>| {
        guided_score(denoiser, z, t, prompts.pos, prompts.neg, prompts.null, &cfg.guidance)
    };
    let x_inter = mix(&state.x, a, &score(&state.y)?, b)?;
    let y_inter = mix(&state.y, a, &score(&x_inter)?, b)?;
    let x = mix(&x_inter, p, &y_inter, 1.0 - p)?;
    let y = mix(&y_inter, p, &x, 1.0 - p)?;
    Ok(EdictState {
        x,
        y,
        step_index: i - 1,
    })
}

/// One inversion step from `state.step_index` to `state.step_index + 1`,
/// the exact inverse of [`edict_denoise_step`] taken from the new position.
/// The last noise estimate is taken at the freshly computed `y`, which is
/// what the forward step sees.
pub fn edict_invert_step<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    state: &EdictState<T>,
    denoiser: &D,
    prompts: Prompts<'_, T>,
    cfg: &EdictConfig,
    schedule: &NoiseSchedule,
) -> Result<EdictState<T>> {
    let i = state.step_index;
    if i >= schedule.num_inference_steps() {
        return Err(Error::Step("cannot invert past the last sampler step".into()));
    }
    let t = schedule.step_at(i + 1);
    let (a, b) = edict_coeffs(i + 1, schedule)?;
    let p = cfg.p;
    let score = |z: &LatentBatch<T>| {
        guided_score(denoiser, z, t, prompts.pos, prompts.neg, prompts.null, &cfg.guidance)
    };
    let y_inter = mix(&state.y, 1.0 / p, &state.x, -(1.0 - p) / p)?;
    let x_inter = mix(&state.x, 1.0 / p, &y_inter, -(1.0 - p) / p)?;
    let y = mix(&y_inter, 1.0 / a, &score(&x_inter)?, -b / a)?;
    let x = mix(&x_inter, 1.0 / a, &score(&y)?, -b / a)?;
    Ok(EdictState {
        x,
        y,
        step_index: i + 1,
    })
}

/// Starts from `x = y = x0` and applies `cfg.tau` inversion steps.
pub fn invert<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    x0: &LatentBatch<T>,
    denoiser: &D,
    prompts: Prompts<'_, T>,
    cfg: &EdictConfig,
    schedule: &NoiseSchedule,
) -> Result<EdictState<T>> {
    cfg.validate(schedule)?;
    let mut s = EdictState::from_clean(x0);
    for _ in 0..cfg.tau {
        s = edict_invert_step(&s, denoiser, prompts, cfg, schedule)?;
    }
    Ok(s)
}

/// Runs every remaining denoising step and returns the unclamped `x`
/// stream.
pub fn denoise_unclamped<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    state: &EdictState<T>,
    denoiser: &D,
    prompts: Prompts<'_, T>,
    cfg: &EdictConfig,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch<T>> {
    let mut s = state.clone();
    while s.step_index > 0 {
        s = edict_denoise_step(&s, denoiser, prompts, cfg, schedule)?;
    }
    Ok(s.x)
}

/// [`denoise_unclamped`] followed by clamping to `[-1, 1]`.
pub fn denoise<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    state: &EdictState<T>,
    denoiser: &D,
    prompts: Prompts<'_, T>,
    cfg: &EdictConfig,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch<T>> {
    let raw = denoise_unclamped(state, denoiser, prompts, cfg, schedule)?;
    Ok(raw.clamp(-T::one(), T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, gaussian_batch};
    use crate::guidance::GuidanceMode;
    use crate::tensor::ImageShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predicts zero noise.
    struct Zero(ImageShape);

    impl<T: Scalar> NoisePredictor<T> for Zero {
        fn input_shape(&self) -> ImageShape {
            self.0
        }
        fn cond_dim(&self) -> usize {
            1
        }
        fn max_cond_len(&self) -> usize {
            4
        }
        fn flops_per_image(&self, _: usize) -> u64 {
            0
        }
        fn predict_batch(
            &self,
            x: &LatentBatch<T>,
            _: &[usize],
            _: &[&ConditioningSequence<T>],
        ) -> Result<LatentBatch<T>> {
            Ok(LatentBatch::zeros(x.len(), x.shape()))
        }
    }

    /// Nonlinear, conditioning- and time-dependent stand-in.
    struct Wobble(ImageShape);

    impl<T: Scalar> NoisePredictor<T> for Wobble {
        fn input_shape(&self) -> ImageShape {
            self.0
        }
        fn cond_dim(&self) -> usize {
            1
        }
        fn max_cond_len(&self) -> usize {
            4
        }
        fn flops_per_image(&self, _: usize) -> u64 {
            0
        }
        fn predict_batch(
            &self,
            x: &LatentBatch<T>,
            t: &[usize],
            c: &[&ConditioningSequence<T>],
        ) -> Result<LatentBatch<T>> {
            let d = x.shape().numel();
            let mut out = x.clone();
            for i in 0..x.len() {
                let k = c[i].data()[0];
                let tt = T::lit(t[i] as f64 / 1000.0);
                for v in &mut out.data_mut()[i * d..(i + 1) * d] {
                    *v = (*v * k + tt).sin() * T::lit(0.8);
                }
            }
            Ok(out)
        }
    }

    fn cond<T: Scalar>(v: f64) -> ConditioningSequence<T> {
        ConditioningSequence::new(vec![0], 1, vec![T::lit(v)]).unwrap()
    }

    fn cfg(p: f64, tau: usize, w: f64) -> EdictConfig {
        EdictConfig {
            p,
            tau,
            guidance: GuidanceConfig::new(GuidanceMode::Negative, w).unwrap(),
        }
    }

    #[test]
    fn zero_denoiser_closed_forms() {
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let shape = ImageShape::new(1, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian_batch::<f64, _>(&mut rng, 1, shape);
        let y = gaussian_batch::<f64, _>(&mut rng, 1, shape);
        let (c, n) = (cond::<f64>(1.0), cond::<f64>(-1.0));
        let pos = [&c];
        let neg = [&n];
        let pr = Prompts { pos: &pos, neg: &neg, null: &c };
        let c93 = cfg(0.93, 1, 3.0);
        let st = EdictState { x: x.clone(), y: y.clone(), step_index: 5 };
        let out = edict_denoise_step(&st, &Zero(shape), pr, &c93, &s).unwrap();
        let (a, _) = edict_coeffs(5, &s).unwrap();
        for k in 0..4 {
            let (xv, yv) = (x.data()[k], y.data()[k]);
            let want_x = 0.93 * a * xv + 0.07 * a * yv;
            let want_y = 0.93 * a * yv + 0.07 * want_x;
            assert!((out.x.data()[k] - want_x).abs() < 1e-12);
            assert!((out.y.data()[k] - want_y).abs() < 1e-12);
        }
        assert_eq!(out.step_index, 4);
        let inv = edict_invert_step(&st, &Zero(shape), pr, &c93, &s).unwrap();
        let (a6, _) = edict_coeffs(6, &s).unwrap();
        for k in 0..4 {
            let (xv, yv) = (x.data()[k], y.data()[k]);
            let yi = (yv - 0.07 * xv) / 0.93;
            let xi = (xv - 0.07 * yi) / 0.93;
            assert!((inv.y.data()[k] - yi / a6).abs() < 1e-12);
            assert!((inv.x.data()[k] - xi / a6).abs() < 1e-12);
        }
        assert_eq!(inv.step_index, 6);
    }

    #[test]
    fn p_near_one_skips_mixing() {
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let shape = ImageShape::new(1, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian_batch::<f64, _>(&mut rng, 2, shape);
        let y = gaussian_batch::<f64, _>(&mut rng, 2, shape);
        let c = cond::<f64>(0.7);
        let pos = [&c, &c];
        let pr = Prompts { pos: &pos, neg: &pos, null: &c };
        let ec = cfg(1.0 - 1e-12, 1, 2.0);
        let st = EdictState { x: x.clone(), y: y.clone(), step_index: 3 };
        let out = edict_denoise_step(&st, &Wobble(shape), pr, &ec, &s).unwrap();
        let (a, b) = edict_coeffs(3, &s).unwrap();
        let t = s.step_at(3);
        let eps = |z: &LatentBatch<f64>| {
            guided_score(&Wobble(shape), z, t, &pos, &pos, &c, &ec.guidance).unwrap()
        };
        let xi = x.axpby(a, &eps(&y), b).unwrap();
        let yi = y.axpby(a, &eps(&xi), b).unwrap();
        assert!(out.x.max_abs_diff(&xi) <= 1e-9);
        assert!(out.y.max_abs_diff(&yi) <= 1e-9);
    }

    #[test]
    fn boundary_steps_are_rejected() {
        let s = build_schedule(100, 1e-3, 0.02, 5).unwrap();
        let shape = ImageShape::new(1, 1, 1);
        let x = LatentBatch::<f64>::zeros(1, shape);
        let c = cond::<f64>(1.0);
        let pos = [&c];
        let pr = Prompts { pos: &pos, neg: &pos, null: &c };
        let ec = cfg(0.93, 5, 1.0);
        let st = EdictState::from_clean(&x);
        assert!(edict_denoise_step(&st, &Zero(shape), pr, &ec, &s).is_err());
        let top = EdictState { step_index: 5, ..st };
        assert!(edict_invert_step(&top, &Zero(shape), pr, &ec, &s).is_err());
        assert!(invert(&x, &Zero(shape), pr, &cfg(0.93, 6, 1.0), &s).is_err());
        assert!(invert(&x, &Zero(shape), pr, &cfg(1.0, 1, 1.0), &s).is_err());
    }

    #[test]
    fn tau_zero_is_identity() {
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let shape = ImageShape::new(1, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian_batch::<f32, _>(&mut rng, 1, shape);
        let c = cond::<f32>(1.0);
        let pos = [&c];
        let pr = Prompts { pos: &pos, neg: &pos, null: &c };
        let st = invert(&x, &Wobble(shape), pr, &cfg(0.93, 0, 3.0), &s).unwrap();
        assert_eq!(st, EdictState::from_clean(&x));
    }

    fn round_trip<T: Scalar>(x0: &LatentBatch<f64>, tau: usize, w: f64) -> f64 {
        let s = build_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let shape = x0.shape();
        let (c1, c2) = (cond::<T>(1.3), cond::<T>(-0.4));
        let pos = [&c1, &c2, &c1];
        let neg = [&c2, &c1, &c2];
        let pr = Prompts { pos: &pos, neg: &neg, null: &c2 };
        let ec = cfg(0.93, tau, w);
        let st = invert(&x0.cast::<T>(), &Wobble(shape), pr, &ec, &s).unwrap();
        assert_eq!(st.step_index, tau);
        let back = denoise_unclamped(&st, &Wobble(shape), pr, &ec, &s).unwrap();
        back.cast::<f64>().max_abs_diff(x0)
    }

    #[test]
    fn round_trip_is_exact_for_a_nonlinear_denoiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = gaussian_batch::<f64, _>(&mut rng, 3, ImageShape::new(1, 4, 4)).clamp(-1.0, 1.0);
        for (tau, w) in [(1, 0.0), (10, 3.0), (25, 6.0)] {
            let e64 = round_trip::<f64>(&x0, tau, w);
            let e32 = round_trip::<f32>(&x0, tau, w);
            assert!(e64 < 1e-6, "tau {tau}: {e64}");
            assert!(e32 < 1e-3, "tau {tau}: {e32}");
        }
        // Single precision drifts over long stiff chains; double does not.
        assert!(round_trip::<f64>(&x0, 50, 6.0) < 1e-6);
    }
}
