//! Times denoiser and classifier passes at the default sizes.

use std::time::Instant;

use cfdiff::denoiser::{NoisePredictor, UnetDenoiser};
use cfdiff::diffusion::gaussian_batch;
use cfdiff::distill::{tokens, ConditioningSequence};
use cfdiff::nn::unet::UnetConfig;
use rand::SeedableRng;

fn main() {
    let cfg = UnetConfig::default();
    let d = UnetDenoiser::<f32>::new(cfg.clone(), 0, 1000);
    println!("parameters: {}", d.params().len());
    println!("flops/image (len 10): {:.3e}", d.flops_per_image(10) as f64);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let cond = ConditioningSequence::new(vec![tokens::A; 10], cfg.cond_dim, vec![0.1f32; 10 * cfg.cond_dim]).unwrap();
    for n in [1usize, 16, 64] {
        let x = gaussian_batch::<f32, _>(&mut rng, n, cfg.image_shape());
        let t = vec![500; n];
        let c = vec![&cond; n];
        let s = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            d.predict_batch(&x, &t, &c).unwrap();
        }
        let dt = s.elapsed().as_secs_f64() / (reps * n) as f64;
        println!("forward n={n}: {:.2} ms/image", dt * 1e3);
    }
    let n = 32;
    let x = gaussian_batch::<f32, _>(&mut rng, n, cfg.image_shape());
    let eps = gaussian_batch::<f32, _>(&mut rng, n, cfg.image_shape());
    let t = vec![500; n];
    let c = vec![&cond; n];
    let mut g = vec![0.0f32; d.params().len()];
    let s = Instant::now();
    for _ in 0..3 {
        d.loss_and_param_grad(&x, &t, &c, &eps, &mut g).unwrap();
    }
    println!("train step batch 32: {:.1} ms", s.elapsed().as_secs_f64() / 3.0 * 1e3);
    let s = Instant::now();
    let n = 64;
    let x = gaussian_batch::<f32, _>(&mut rng, n, cfg.image_shape());
    let eps = gaussian_batch::<f32, _>(&mut rng, n, cfg.image_shape());
    let c = vec![&cond; n];
    for _ in 0..3 {
        d.loss_and_cond_grad(&x, &vec![500; n], &c, &eps).unwrap();
    }
    println!("cond-grad step batch 64: {:.1} ms", s.elapsed().as_secs_f64() / 3.0 * 1e3);
}
