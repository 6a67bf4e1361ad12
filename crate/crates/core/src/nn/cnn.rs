//! Small strided CNN used for the target classifier, the attribute oracle,
//! the identity embedder and the self-supervised encoder.

use serde::{Deserialize, Serialize};

use super::layers::{
    global_mean_pool, global_mean_pool_backward, silu, silu_act, silu_act_backward,
    silu_backward, Conv2d, Linear,
};
use super::{Act, LayoutBuilder, ParamLayout};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of the stride-2 convolutions.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub outputs: usize,
}

impl CnnConfig {
    pub fn new(in_channels: usize, image_size: usize, outputs: usize) -> Self {
        Self {
            in_channels,
            image_size,
            channels: vec![16, 32, 64],
            feature_dim: 64,
            outputs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmallCnn {
    cfg: CnnConfig,
    layout: ParamLayout,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

pub struct CnnOutput<T> {
    /// `n × outputs`
    pub logits: Vec<T>,
    /// Pre-activation penultimate features, `n × feature_dim`.
    pub features: Vec<T>,
}

pub struct CnnCache<T> {
    n: usize,
    inputs: Vec<Act<T>>,
    pre: Vec<Act<T>>,
    last: (usize, usize, usize),
    pooled: Vec<T>,
    features: Vec<T>,
}

impl SmallCnn {
    pub fn new(cfg: CnnConfig) -> Self {
        let mut lb = LayoutBuilder::new();
        let mut convs = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut lb, &format!("conv{i}"), cin, c, 3, 2));
            cin = c;
        }
        let fc1 = Linear::new(&mut lb, "fc1", cin, cfg.feature_dim, true);
        let fc2 = Linear::new(&mut lb, "fc2", cfg.feature_dim, cfg.outputs, true);
        Self {
            cfg,
            layout: lb.finish(),
            convs,
            fc1,
            fc2,
        }
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// `x` is NCHW.
    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], n: usize) -> (CnnOutput<T>, CnnCache<T>) {
        let (c, s) = (self.cfg.in_channels, self.cfg.image_size);
        assert_eq!(x.len(), n * c * s * s, "cnn input size");
        // NCHW -> NHWC
        let mut h = Act::zeros(n, s, s, c);
        for b in 0..n {
            for ch in 0..c {
                for px in 0..s * s {
                    h.data[(b * s * s + px) * c + ch] = x[(b * c + ch) * s * s + px];
                }
            }
        }
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        for conv in &self.convs {
            let z = conv.forward(p, &h);
            let a = silu_act(&z);
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        let last = (h.h, h.w, h.c);
        let pooled = global_mean_pool(&h);
        let features = self.fc1.forward(p, &pooled, n);
        let logits = self.fc2.forward(p, &silu(&features), n);
        (
            CnnOutput {
                logits,
                features: features.clone(),
            },
            CnnCache {
                n,
                inputs,
                pre,
                last,
                pooled,
                features,
            },
        )
    }

    /// Backpropagates gradients on logits and (optionally) on the
    /// penultimate features into `grads`.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &CnnCache<T>,
        dlogits: &[T],
        dfeatures: Option<&[T]>,
        grads: &mut [T],
    ) {
        let n = cache.n;
        let act = silu(&cache.features);
        let da = self
            .fc2
            .backward(p, &act, dlogits, n, Some(grads), true)
            .expect("dx");
        let mut dfeat = silu_backward(&cache.features, &da);
        if let Some(df) = dfeatures {
            for (a, &b) in dfeat.iter_mut().zip(df) {
                *a = *a + b;
            }
        }
        let dpooled = self
            .fc1
            .backward(p, &cache.pooled, &dfeat, n, Some(grads), true)
            .expect("dx");
        let (lh, lw, lc) = cache.last;
        let mut dh = global_mean_pool_backward(&dpooled, n, lh, lw, lc);
        for i in (0..self.convs.len()).rev() {
            let dz = silu_act_backward(&cache.pre[i], &dh);
            let need_dx = i > 0;
            match self.convs[i].backward(p, &cache.inputs[i], &dz, Some(grads), need_dx) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
    }

    pub fn flops_per_image(&self) -> u64 {
        let mut s = self.cfg.image_size;
        let mut f = 0;
        for conv in &self.convs {
            let (h, _) = conv.out_hw(s, s);
            f += conv.flops(h, h);
            s = h;
        }
        f + self.fc1.flops_per_row() + self.fc2.flops_per_row()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = CnnConfig {
            in_channels: 1,
            image_size: 8,
            channels: vec![3, 4],
            feature_dim: 5,
            outputs: 2,
        };
        let net = SmallCnn::new(cfg);
        let p = net.layout().init::<f64>(1);
        let x: Vec<f64> = (0..2 * 64).map(|i| ((i as f64) * 0.41).sin()).collect();
        let loss = |pp: &[f64]| -> f64 {
            let (out, _) = net.forward(pp, &x, 2);
            out.logits.iter().enumerate().map(|(i, v)| v * (i as f64 + 1.0)).sum::<f64>()
                + out.features.iter().map(|v| 0.5 * v).sum::<f64>()
        };
        let (out, cache) = net.forward(&p, &x, 2);
        let dl: Vec<f64> = (0..out.logits.len()).map(|i| i as f64 + 1.0).collect();
        let df = vec![0.5; out.features.len()];
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &cache, &dl, Some(&df), &mut g);
        let mut pp = p.clone();
        for i in 0..p.len() {
            let o = pp[i];
            pp[i] = o + 1e-6;
            let fp = loss(&pp);
            pp[i] = o - 1e-6;
            let fm = loss(&pp);
            pp[i] = o;
            let num = (fp - fm) / 2e-6;
            let denom = num.abs().max(g[i].abs()).max(1e-4);
            assert!((num - g[i]).abs() / denom < 1e-5, "param {i}");
        }
    }
}
