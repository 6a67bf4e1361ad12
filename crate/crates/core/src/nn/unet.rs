//! Small conditional U-Net noise predictor.
//!
//! Layout (for the default 1×32×32 input):
//!
//! ```text
//! 2×2 space-to-depth ─ conv_in ─ res_d1 ────────────────────────┐ (16×16, c1)
//!                                  └ down(stride 2) ─ res_d2 ─ attn_d2 ─┐ (8×8, c2)
//!                                          attn_mid ─ [cat] ─ res_u2 ─ attn_u2
//!                                          up_conv ─ ×2 nearest ─ [cat] ─ res_u1 ─ attn_u1
//!                                          norm ─ silu ─ conv_out ─ depth-to-space
//! ```
//!
//! Time enters every residual block through a projected sinusoidal
//! embedding; the conditioning sequence enters through cross-attention at
//! both resolutions.

use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, pixel_shuffle, pixel_unshuffle, silu, silu_act, silu_act_backward,
    silu_backward, split_channels, timestep_embedding, upsample2, upsample2_backward, AttnCache,
    Conv2d, CrossAttention, GroupNorm, Linear, NormCache,
};
use super::{Act, LayoutBuilder, ParamLayout};
use crate::scalar::Scalar;
use crate::tensor::ImageShape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub groups: usize,
    pub max_cond_len: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            base_channels: 32,
            mid_channels: 64,
            time_dim: 64,
            cond_dim: 32,
            groups: 8,
            max_cond_len: 16,
        }
    }
}

impl UnetConfig {
    /// A network under ten thousand parameters for gradient checks.
    pub fn tiny() -> Self {
        Self {
            in_channels: 1,
            image_size: 8,
            base_channels: 4,
            mid_channels: 8,
            time_dim: 8,
            cond_dim: 4,
            groups: 2,
            max_cond_len: 16,
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::new(self.in_channels, self.image_size, self.image_size)
    }
}

const PATCH: usize = 2;

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct ResCache<T> {
    input: Option<Act<T>>,
    n1: NormCache<T>,
    a1: Act<T>,
    s1: Act<T>,
    n2: NormCache<T>,
    a2: Act<T>,
    s2: Act<T>,
}

impl ResBlock {
    fn new(
        lb: &mut LayoutBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
        groups: usize,
    ) -> Self {
        Self {
            gn1: GroupNorm::new(lb, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(lb, &format!("{name}.conv1"), cin, cout, 3, 1),
            temb: Linear::new(lb, &format!("{name}.time_proj"), tdim, cout, true),
            gn2: GroupNorm::new(lb, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(lb, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(lb, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn forward<T: Scalar>(&self, p: &[T], x: Act<T>, st: &[T]) -> (Act<T>, ResCache<T>) {
        let (a1, n1) = self.gn1.forward(p, &x);
        let s1 = silu_act(&a1);
        let mut h = self.conv1.forward(p, &s1);
        let tp = self.temb.forward(p, st, x.n);
        let hw = h.pixels();
        for b in 0..h.n {
            let t = &tp[b * h.c..(b + 1) * h.c];
            for px in 0..hw {
                let o = (b * hw + px) * h.c;
                for (v, &tv) in h.data[o..o + h.c].iter_mut().zip(t) {
                    *v = *v + tv;
                }
            }
        }
        let (a2, n2) = self.gn2.forward(p, &h);
        let s2 = silu_act(&a2);
        let mut out = self.conv2.forward(p, &s2);
        match &self.skip {
            Some(skip) => out.add_assign(&skip.forward(p, &x)),
            None => out.add_assign(&x),
        }
        let input = self.skip.is_some().then_some(x);
        (
            out,
            ResCache {
                input,
                n1,
                a1,
                s1,
                n2,
                a2,
                s2,
            },
        )
    }

    /// Returns `dx`; accumulates into `dst` (gradient w.r.t. `silu(temb)`)
    /// when parameter gradients are being collected.
    fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &ResCache<T>,
        dy: &Act<T>,
        st: &[T],
        mut grads: Option<&mut [T]>,
        dst: &mut [T],
    ) -> Act<T> {
        let ds2 = self
            .conv2
            .backward(p, &cache.s2, dy, grads.as_deref_mut(), true)
            .expect("dx");
        let da2 = silu_act_backward(&cache.a2, &ds2);
        let dh = self.gn2.backward(p, &cache.n2, &da2, grads.as_deref_mut());
        if grads.is_some() {
            let n = dh.n;
            let hw = dh.pixels();
            let mut dtp = vec![T::zero(); n * dh.c];
            for b in 0..n {
                for px in 0..hw {
                    let o = (b * hw + px) * dh.c;
                    for j in 0..dh.c {
                        dtp[b * dh.c + j] = dtp[b * dh.c + j] + dh.data[o + j];
                    }
                }
            }
            let dst_local = self
                .temb
                .backward(p, st, &dtp, n, grads.as_deref_mut(), true)
                .expect("dx");
            for (a, v) in dst.iter_mut().zip(dst_local) {
                *a = *a + v;
            }
        }
        let ds1 = self
            .conv1
            .backward(p, &cache.s1, &dh, grads.as_deref_mut(), true)
            .expect("dx");
        let da1 = silu_act_backward(&cache.a1, &ds1);
        let mut dx = self.gn1.backward(p, &cache.n1, &da1, grads.as_deref_mut());
        match (&self.skip, &cache.input) {
            (Some(skip), Some(x)) => {
                dx.add_assign(&skip.backward(p, x, dy, grads, true).expect("dx"));
            }
            _ => dx.add_assign(dy),
        }
        dx
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv1.flops(h, w)
            + self.conv2.flops(h, w)
            + self.skip.as_ref().map_or(0, |s| s.flops(h, w))
    }
}

#[derive(Clone, Debug)]
pub struct Unet {
    cfg: UnetConfig,
    layout: ParamLayout,
    t_dim0: usize,
    t_lin1: Linear,
    t_lin2: Linear,
    conv_in: Conv2d,
    res_d1: ResBlock,
    down: Conv2d,
    res_d2: ResBlock,
    attn_d2: CrossAttention,
    attn_mid: CrossAttention,
    res_u2: ResBlock,
    attn_u2: CrossAttention,
    up_conv: Conv2d,
    res_u1: ResBlock,
    attn_u1: CrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

pub struct UnetCache<T> {
    n: usize,
    t_sin: Vec<T>,
    t_h1: Vec<T>,
    t_emb: Vec<T>,
    st: Vec<T>,
    x_in: Act<T>,
    rc_d1: ResCache<T>,
    h1: Act<T>,
    rc_d2: ResCache<T>,
    ac_d2: AttnCache<T>,
    ac_mid: AttnCache<T>,
    rc_u2: ResCache<T>,
    ac_u2: AttnCache<T>,
    h4b: Act<T>,
    rc_u1: ResCache<T>,
    ac_u1: AttnCache<T>,
    n_out: NormCache<T>,
    g_out: Act<T>,
    s_out: Act<T>,
}

impl Unet {
    pub fn new(cfg: UnetConfig) -> Self {
        assert!(
            cfg.image_size % (2 * PATCH) == 0,
            "image size must be divisible by {}",
            2 * PATCH
        );
        let mut lb = LayoutBuilder::new();
        let (c1, c2, td, g) = (cfg.base_channels, cfg.mid_channels, cfg.time_dim, cfg.groups);
        let t_dim0 = td;
        let cin = cfg.in_channels * PATCH * PATCH;
        let t_lin1 = Linear::new(&mut lb, "time.lin1", t_dim0, td, true);
        let t_lin2 = Linear::new(&mut lb, "time.lin2", td, td, true);
        let conv_in = Conv2d::new(&mut lb, "conv_in", cin, c1, 3, 1);
        let res_d1 = ResBlock::new(&mut lb, "down1.res", c1, c1, td, g);
        let down = Conv2d::new(&mut lb, "down1.downsample", c1, c2, 3, 2);
        let res_d2 = ResBlock::new(&mut lb, "down2.res", c2, c2, td, g);
        let attn_d2 = CrossAttention::new(&mut lb, "down2.attn", c2, cfg.cond_dim);
        let attn_mid = CrossAttention::new(&mut lb, "mid.attn", c2, cfg.cond_dim);
        let res_u2 = ResBlock::new(&mut lb, "up2.res", 2 * c2, c2, td, g);
        let attn_u2 = CrossAttention::new(&mut lb, "up2.attn", c2, cfg.cond_dim);
        let up_conv = Conv2d::new(&mut lb, "up2.upsample_conv", c2, c1, 3, 1);
        let res_u1 = ResBlock::new(&mut lb, "up1.res", 2 * c1, c1, td, g);
        let attn_u1 = CrossAttention::new(&mut lb, "up1.attn", c1, cfg.cond_dim);
        let norm_out = GroupNorm::new(&mut lb, "norm_out", c1, g);
        let conv_out = Conv2d::with_init(
            &mut lb,
            "conv_out",
            c1,
            cin,
            3,
            1,
            super::Init::Uniform(0.1 / ((9 * c1) as f64).sqrt()),
        );
        Self {
            cfg,
            layout: lb.finish(),
            t_dim0,
            t_lin1,
            t_lin2,
            conv_in,
            res_d1,
            down,
            res_d2,
            attn_d2,
            attn_mid,
            res_u2,
            attn_u2,
            up_conv,
            res_u1,
            attn_u1,
            norm_out,
            conv_out,
        }
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// `x` is NCHW of shape `(n, in_channels, size, size)`; `conds[b]` is a
    /// `len × cond_dim` row-major sequence. Returns the NCHW prediction and
    /// the cache needed by [`Unet::backward`].
    pub fn forward<T: Scalar>(
        &self,
        p: &[T],
        x: &[T],
        n: usize,
        t: &[usize],
        conds: &[&[T]],
    ) -> (Vec<T>, UnetCache<T>) {
        let s = self.cfg.image_size;
        assert_eq!(x.len(), n * self.cfg.in_channels * s * s, "unet input size");
        assert_eq!(t.len(), n, "one timestep per sample");
        assert_eq!(conds.len(), n, "one conditioning per sample");

        let t_sin = timestep_embedding::<T>(t, self.t_dim0);
        let t_h1 = self.t_lin1.forward(p, &t_sin, n);
        let t_a1 = silu(&t_h1);
        let t_emb = self.t_lin2.forward(p, &t_a1, n);
        let st = silu(&t_emb);

        let x_in = pixel_unshuffle(x, n, self.cfg.in_channels, s, s, PATCH);
        let h0 = self.conv_in.forward(p, &x_in);
        let (h1, rc_d1) = self.res_d1.forward(p, h0, &st);
        let h2a = self.down.forward(p, &h1);
        let (h2, rc_d2) = self.res_d2.forward(p, h2a, &st);
        let (h2b, ac_d2) = self.attn_d2.forward(p, &h2, conds);
        let (h3, ac_mid) = self.attn_mid.forward(p, &h2b, conds);
        let cat3 = concat_channels(&h3, &h2b);
        let (h4, rc_u2) = self.res_u2.forward(p, cat3, &st);
        let (h4b, ac_u2) = self.attn_u2.forward(p, &h4, conds);
        let h5 = self.up_conv.forward(p, &h4b);
        let h5u = upsample2(&h5);
        let cat6 = concat_channels(&h5u, &h1);
        let (h6, rc_u1) = self.res_u1.forward(p, cat6, &st);
        let (h6b, ac_u1) = self.attn_u1.forward(p, &h6, conds);
        let (g_out, n_out) = self.norm_out.forward(p, &h6b);
        let s_out = silu_act(&g_out);
        let out4 = self.conv_out.forward(p, &s_out);
        let out = pixel_shuffle(&out4, PATCH);
        (
            out,
            UnetCache {
                n,
                t_sin,
                t_h1,
                t_emb,
                st,
                x_in,
                rc_d1,
                h1,
                rc_d2,
                ac_d2,
                ac_mid,
                rc_u2,
                ac_u2,
                h4b,
                rc_u1,
                ac_u1,
                n_out,
                g_out,
                s_out,
            },
        )
    }

    /// Reverse pass from `dout` (NCHW, same shape as the prediction).
    ///
    /// With `grads = Some(..)` parameter gradients are accumulated. With
    /// `want_cond` the per-sample gradient of every conditioning row is
    /// returned.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &UnetCache<T>,
        dout: &[T],
        mut grads: Option<&mut [T]>,
        want_cond: bool,
    ) -> Option<Vec<Vec<T>>> {
        let n = cache.n;
        let s = self.cfg.image_size;
        let mut dst = vec![T::zero(); n * self.cfg.time_dim];
        let mut dconds: Option<Vec<Vec<T>>> = None;
        let merge = |acc: &mut Option<Vec<Vec<T>>>, part: Option<Vec<Vec<T>>>| {
            if let Some(part) = part {
                match acc {
                    None => *acc = Some(part),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(part) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x = *x + y;
                            }
                        }
                    }
                }
            }
        };

        let d4 = pixel_unshuffle(dout, n, self.cfg.in_channels, s, s, PATCH);
        let ds = self
            .conv_out
            .backward(p, &cache.s_out, &d4, grads.as_deref_mut(), true)
            .expect("dx");
        let dg = silu_act_backward(&cache.g_out, &ds);
        let dh6b = self.norm_out.backward(p, &cache.n_out, &dg, grads.as_deref_mut());
        let (dh6, dc) = self
            .attn_u1
            .backward(p, &cache.ac_u1, &dh6b, grads.as_deref_mut(), want_cond);
        merge(&mut dconds, dc);
        let dcat6 = self
            .res_u1
            .backward(p, &cache.rc_u1, &dh6, &cache.st, grads.as_deref_mut(), &mut dst);
        let (dh5u, dh1_skip) = split_channels(&dcat6, self.cfg.base_channels);
        let dh5 = upsample2_backward(&dh5u);
        let dh4b = self
            .up_conv
            .backward(p, &cache.h4b, &dh5, grads.as_deref_mut(), true)
            .expect("dx");
        let (dh4, dc) = self
            .attn_u2
            .backward(p, &cache.ac_u2, &dh4b, grads.as_deref_mut(), want_cond);
        merge(&mut dconds, dc);
        let dcat3 = self
            .res_u2
            .backward(p, &cache.rc_u2, &dh4, &cache.st, grads.as_deref_mut(), &mut dst);
        let (dh3, dh2b_skip) = split_channels(&dcat3, self.cfg.mid_channels);
        let (mut dh2b, dc) = self
            .attn_mid
            .backward(p, &cache.ac_mid, &dh3, grads.as_deref_mut(), want_cond);
        merge(&mut dconds, dc);
        dh2b.add_assign(&dh2b_skip);
        let (dh2, dc) = self
            .attn_d2
            .backward(p, &cache.ac_d2, &dh2b, grads.as_deref_mut(), want_cond);
        merge(&mut dconds, dc);
        let dh2a = self
            .res_d2
            .backward(p, &cache.rc_d2, &dh2, &cache.st, grads.as_deref_mut(), &mut dst);
        let mut dh1 = self
            .down
            .backward(p, &cache.h1, &dh2a, grads.as_deref_mut(), true)
            .expect("dx");
        dh1.add_assign(&dh1_skip);

        if grads.is_some() {
            let dh0 = self
                .res_d1
                .backward(p, &cache.rc_d1, &dh1, &cache.st, grads.as_deref_mut(), &mut dst);
            self.conv_in
                .backward(p, &cache.x_in, &dh0, grads.as_deref_mut(), false);
            let demb = silu_backward(&cache.t_emb, &dst);
            let t_a1 = silu(&cache.t_h1);
            let da1 = self
                .t_lin2
                .backward(p, &t_a1, &demb, n, grads.as_deref_mut(), true)
                .expect("dx");
            let dh1t = silu_backward(&cache.t_h1, &da1);
            self.t_lin1
                .backward(p, &cache.t_sin, &dh1t, n, grads.as_deref_mut(), false);
        }
        dconds
    }

    /// Multiply-add count (×2) for one image with a conditioning sequence of
    /// `cond_len` tokens. Elementwise work is ignored.
    pub fn flops_per_image(&self, cond_len: usize) -> u64 {
        let h1 = self.cfg.image_size / PATCH;
        let h2 = h1 / 2;
        let p1 = h1 * h1;
        let p2 = h2 * h2;
        self.t_lin1.flops_per_row()
            + self.t_lin2.flops_per_row()
            + self.conv_in.flops(h1, h1)
            + self.res_d1.flops(h1, h1)
            + self.down.flops(h2, h2)
            + self.res_d2.flops(h2, h2)
            + self.attn_d2.flops(p2, cond_len)
            + self.attn_mid.flops(p2, cond_len)
            + self.res_u2.flops(h2, h2)
            + self.attn_u2.flops(p2, cond_len)
            + self.up_conv.flops(h2, h2)
            + self.res_u1.flops(h1, h1)
            + self.attn_u1.flops(p1, cond_len)
            + self.conv_out.flops(h1, h1)
    }
}
