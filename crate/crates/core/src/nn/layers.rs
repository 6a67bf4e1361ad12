//! Layers with explicit forward/backward passes over NHWC activations.

use super::{Act, Init, LayoutBuilder, ParamRef};
use crate::scalar::{gemm, Scalar};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Row-wise affine map `y = x·W + b` with `W` stored `[inp, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    w: ParamRef,
    b: Option<ParamRef>,
}

impl Linear {
    pub fn new(lb: &mut LayoutBuilder, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self::with_init(lb, name, inp, out, bias, Init::Uniform(bound))
    }

    pub fn with_init(
        lb: &mut LayoutBuilder,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = lb.param(format!("{name}.weight"), &[inp, out], init);
        let b = bias.then(|| lb.param(format!("{name}.bias"), &[out], Init::Zeros));
        Self { inp, out, w, b }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.inp);
        let mut y = vec![T::zero(); rows * self.out];
        if let Some(b) = self.b {
            let b = b.get(p);
            for r in y.chunks_exact_mut(self.out) {
                r.copy_from_slice(b);
            }
        }
        gemm(
            rows,
            self.inp,
            self.out,
            x,
            false,
            self.w.get(p),
            false,
            &mut y,
            self.b.is_some(),
        );
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        x: &[T],
        dy: &[T],
        rows: usize,
        grads: Option<&mut [T]>,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        if let Some(g) = grads {
            gemm(
                self.inp,
                rows,
                self.out,
                x,
                true,
                dy,
                false,
                self.w.get_mut(g),
                true,
            );
            if let Some(b) = self.b {
                let gb = b.get_mut(g);
                for r in dy.chunks_exact(self.out) {
                    for (a, &v) in gb.iter_mut().zip(r) {
                        *a = *a + v;
                    }
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.inp];
            gemm(
                rows,
                self.out,
                self.inp,
                dy,
                false,
                self.w.get(p),
                true,
                &mut dx,
                false,
            );
            dx
        })
    }

    pub fn flops_per_row(&self) -> u64 {
        2 * (self.inp * self.out) as u64
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Square-kernel convolution; weights stored `[k, k, cin, cout]`.
/// Target im2col block size in elements.
const COL_BLOCK: usize = 1 << 16;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    w: ParamRef,
    b: ParamRef,
}

impl Conv2d {
    pub fn new(
        lb: &mut LayoutBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (k * k * cin) as f64;
        Self::with_init(lb, name, cin, cout, k, stride, Init::Uniform(1.0 / fan_in.sqrt()))
    }

    pub fn with_init(
        lb: &mut LayoutBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let w = lb.param(format!("{name}.weight"), &[k, k, cin, cout], init);
        let b = lb.param(format!("{name}.bias"), &[cout], Init::Zeros);
        Self {
            k,
            stride,
            pad: k / 2,
            cin,
            cout,
            w,
            b,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn kdim(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Images per im2col block, sized so a block stays cache resident.
    fn block_images(&self, h: usize, w: usize) -> usize {
        let (ho, wo) = self.out_hw(h, w);
        (COL_BLOCK / (ho * wo * self.kdim()).max(1)).max(1)
    }

    fn im2col<T: Scalar>(&self, x: &Act<T>, images: std::ops::Range<usize>) -> Vec<T> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let kd = self.kdim();
        let mut col = vec![T::zero(); images.len() * ho * wo * kd];
        let cin = self.cin;
        for (bi, b) in images.enumerate() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (bi * ho + oy) * wo + ox;
                    let dst = &mut col[row * kd..(row + 1) * kd];
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let src = ((b * x.h + iy as usize) * x.w + ix as usize) * cin;
                            let o = (ky * self.k + kx) * cin;
                            dst[o..o + cin].copy_from_slice(&x.data[src..src + cin]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, dcol: &[T], images: std::ops::Range<usize>, dx: &mut Act<T>) {
        let (h, w) = (dx.h, dx.w);
        let (ho, wo) = self.out_hw(h, w);
        let kd = self.kdim();
        let cin = self.cin;
        for (bi, b) in images.enumerate() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (bi * ho + oy) * wo + ox;
                    let src = &dcol[row * kd..(row + 1) * kd];
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let o = (ky * self.k + kx) * cin;
                            for (a, &v) in dx.data[d..d + cin].iter_mut().zip(&src[o..o + cin]) {
                                *a = *a + v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Act<T>) -> Act<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let per = ho * wo;
        let rows = x.n * per;
        let mut y = vec![T::zero(); rows * self.cout];
        let b = self.b.get(p);
        for r in y.chunks_exact_mut(self.cout) {
            r.copy_from_slice(b);
        }
        let kd = self.kdim();
        if self.is_pointwise() {
            gemm(rows, kd, self.cout, &x.data, false, self.w.get(p), false, &mut y, true);
        } else {
            let step = self.block_images(x.h, x.w);
            for b0 in (0..x.n).step_by(step) {
                let b1 = (b0 + step).min(x.n);
                let col = self.im2col(x, b0..b1);
                let out = &mut y[b0 * per * self.cout..b1 * per * self.cout];
                gemm((b1 - b0) * per, kd, self.cout, &col, false, self.w.get(p), false, out, true);
            }
        }
        Act::from_vec(x.n, ho, wo, self.cout, y)
    }

    /// `x` is the forward input; returns `dx` when requested.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        x: &Act<T>,
        dy: &Act<T>,
        mut grads: Option<&mut [T]>,
        need_dx: bool,
    ) -> Option<Act<T>> {
        let rows = dy.rows();
        let kd = self.kdim();
        let per = dy.pixels();
        if self.is_pointwise() {
            if let Some(g) = grads {
                gemm(kd, rows, self.cout, &x.data, true, &dy.data, false, self.w.get_mut(g), true);
                self.bias_grad(dy, g);
            }
            if !need_dx {
                return None;
            }
            let mut dx = vec![T::zero(); rows * kd];
            gemm(rows, self.cout, kd, &dy.data, false, self.w.get(p), true, &mut dx, false);
            return Some(Act::from_vec(x.n, x.h, x.w, self.cin, dx));
        }
        let mut dx = need_dx.then(|| Act::zeros(x.n, x.h, x.w, self.cin));
        let step = self.block_images(x.h, x.w);
        for b0 in (0..x.n).step_by(step) {
            let b1 = (b0 + step).min(x.n);
            let m = (b1 - b0) * per;
            let dyb = &dy.data[b0 * per * self.cout..b1 * per * self.cout];
            if let Some(g) = grads.as_deref_mut() {
                let col = self.im2col(x, b0..b1);
                gemm(kd, m, self.cout, &col, true, dyb, false, self.w.get_mut(g), true);
            }
            if let Some(dx) = dx.as_mut() {
                let mut dcol = vec![T::zero(); m * kd];
                gemm(m, self.cout, kd, dyb, false, self.w.get(p), true, &mut dcol, false);
                self.col2im(&dcol, b0..b1, dx);
            }
        }
        if let Some(g) = grads {
            self.bias_grad(dy, g);
        }
        dx
    }

    fn bias_grad<T: Scalar>(&self, dy: &Act<T>, g: &mut [T]) {
        let gb = self.b.get_mut(g);
        for r in dy.data.chunks_exact(self.cout) {
            for (acc, &v) in gb.iter_mut().zip(r) {
                *acc = *acc + v;
            }
        }
    }

    pub fn flops(&self, h_out: usize, w_out: usize) -> u64 {
        2 * (h_out * w_out * self.kdim() * self.cout) as u64
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Group normalization over NHWC activations. With `groups == 1` on an
/// activation whose spatial extent is a single pixel this is layer norm.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    gamma: ParamRef,
    beta: ParamRef,
    eps: f64,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Act<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize, groups: usize) -> Self {
        assert!(groups > 0 && c % groups == 0, "channels must divide into groups");
        Self {
            c,
            groups,
            gamma: lb.param(format!("{name}.gamma"), &[c], Init::Ones),
            beta: lb.param(format!("{name}.beta"), &[c], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Act<T>) -> (Act<T>, NormCache<T>) {
        assert_eq!(x.c, self.c, "norm channels");
        let cg = self.c / self.groups;
        let hw = x.pixels();
        let count = T::lit((hw * cg) as f64);
        let eps = T::lit(self.eps);
        let gamma = self.gamma.get(p);
        let beta = self.beta.get(p);
        let mut xhat = x.same_dims(self.c);
        let mut y = x.same_dims(self.c);
        let mut inv_std = vec![T::zero(); x.n * self.groups];
        for b in 0..x.n {
            let base = b * hw * self.c;
            for g in 0..self.groups {
                let c0 = g * cg;
                let mut mean = T::zero();
                for px in 0..hw {
                    let o = base + px * self.c + c0;
                    for &v in &x.data[o..o + cg] {
                        mean = mean + v;
                    }
                }
                mean = mean / count;
                let mut var = T::zero();
                for px in 0..hw {
                    let o = base + px * self.c + c0;
                    for &v in &x.data[o..o + cg] {
                        let d = v - mean;
                        var = var + d * d;
                    }
                }
                var = var / count;
                let is = T::one() / (var + eps).sqrt();
                inv_std[b * self.groups + g] = is;
                for px in 0..hw {
                    let o = base + px * self.c + c0;
                    for j in 0..cg {
                        let xh = (x.data[o + j] - mean) * is;
                        xhat.data[o + j] = xh;
                        y.data[o + j] = gamma[c0 + j] * xh + beta[c0 + j];
                    }
                }
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &NormCache<T>,
        dy: &Act<T>,
        grads: Option<&mut [T]>,
    ) -> Act<T> {
        let xhat = &cache.xhat;
        let cg = self.c / self.groups;
        let hw = xhat.pixels();
        let count = T::lit((hw * cg) as f64);
        let gamma = self.gamma.get(p);
        if let Some(g) = grads {
            let mut dgamma = vec![T::zero(); self.c];
            let mut dbeta = vec![T::zero(); self.c];
            for (row_dy, row_xh) in dy.data.chunks_exact(self.c).zip(xhat.data.chunks_exact(self.c)) {
                for j in 0..self.c {
                    dgamma[j] = dgamma[j] + row_dy[j] * row_xh[j];
                    dbeta[j] = dbeta[j] + row_dy[j];
                }
            }
            for (a, v) in self.gamma.get_mut(g).iter_mut().zip(dgamma) {
                *a = *a + v;
            }
            for (a, v) in self.beta.get_mut(g).iter_mut().zip(dbeta) {
                *a = *a + v;
            }
        }
        let mut dx = xhat.same_dims(self.c);
        for b in 0..xhat.n {
            let base = b * hw * self.c;
            for gi in 0..self.groups {
                let c0 = gi * cg;
                let is = cache.inv_std[b * self.groups + gi];
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for px in 0..hw {
                    let o = base + px * self.c + c0;
                    for j in 0..cg {
                        let gv = gamma[c0 + j] * dy.data[o + j];
                        sum_g = sum_g + gv;
                        sum_gx = sum_gx + gv * xhat.data[o + j];
                    }
                }
                let mg = sum_g / count;
                let mgx = sum_gx / count;
                for px in 0..hw {
                    let o = base + px * self.c + c0;
                    for j in 0..cg {
                        let gv = gamma[c0 + j] * dy.data[o + j];
                        dx.data[o + j] = is * (gv - mg - xhat.data[o + j] * mgx);
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Activations and reshapes
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (T::one() - s))
        })
        .collect()
}

pub fn silu_act<T: Scalar>(x: &Act<T>) -> Act<T> {
    Act::from_vec(x.n, x.h, x.w, x.c, silu(&x.data))
}

pub fn silu_act_backward<T: Scalar>(x: &Act<T>, dy: &Act<T>) -> Act<T> {
    Act::from_vec(x.n, x.h, x.w, x.c, silu_backward(&x.data, &dy.data))
}

/// NCHW images → NHWC activations with `r×r` space-to-depth.
/// Output channel index is `(c·r + dy)·r + dx`.
pub fn pixel_unshuffle<T: Scalar>(
    data: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Act<T> {
    assert!(h % r == 0 && w % r == 0, "image size must divide the patch size");
    let (ho, wo, co) = (h / r, w / r, c * r * r);
    let mut out = Act::zeros(n, ho, wo, co);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = data[((b * c + ch) * h + y) * w + x];
                    let oc = (ch * r + y % r) * r + x % r;
                    out.data[((b * ho + y / r) * wo + x / r) * co + oc] = v;
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`]: NHWC → NCHW with `c = act.c / r²`.
pub fn pixel_shuffle<T: Scalar>(act: &Act<T>, r: usize) -> Vec<T> {
    let c = act.c / (r * r);
    let (h, w) = (act.h * r, act.w * r);
    let mut out = vec![T::zero(); act.n * c * h * w];
    for b in 0..act.n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let ic = (ch * r + y % r) * r + x % r;
                    out[((b * c + ch) * h + y) * w + x] =
                        act.data[((b * act.h + y / r) * act.w + x / r) * act.c + ic];
                }
            }
        }
    }
    out
}

pub fn upsample2<T: Scalar>(x: &Act<T>) -> Act<T> {
    let mut out = Act::zeros(x.n, x.h * 2, x.w * 2, x.c);
    for b in 0..x.n {
        for y in 0..out.h {
            for xx in 0..out.w {
                let s = ((b * x.h + y / 2) * x.w + xx / 2) * x.c;
                let d = ((b * out.h + y) * out.w + xx) * x.c;
                out.data[d..d + x.c].copy_from_slice(&x.data[s..s + x.c]);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Act<T>) -> Act<T> {
    let mut dx = Act::zeros(dy.n, dy.h / 2, dy.w / 2, dy.c);
    for b in 0..dy.n {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let s = ((b * dy.h + y) * dy.w + xx) * dy.c;
                let d = ((b * dx.h + y / 2) * dx.w + xx / 2) * dy.c;
                for j in 0..dy.c {
                    dx.data[d + j] = dx.data[d + j] + dy.data[s + j];
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial dims");
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.rows() * c);
    for (ra, rb) in a.data.chunks_exact(a.c).zip(b.data.chunks_exact(b.c)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Act::from_vec(a.n, a.h, a.w, c, data)
}

pub fn split_channels<T: Scalar>(x: &Act<T>, ca: usize) -> (Act<T>, Act<T>) {
    let cb = x.c - ca;
    let mut a = Vec::with_capacity(x.rows() * ca);
    let mut b = Vec::with_capacity(x.rows() * cb);
    for r in x.data.chunks_exact(x.c) {
        a.extend_from_slice(&r[..ca]);
        b.extend_from_slice(&r[ca..]);
    }
    (
        Act::from_vec(x.n, x.h, x.w, ca, a),
        Act::from_vec(x.n, x.h, x.w, cb, b),
    )
}

/// Mean over spatial positions: `(n, h, w, c)` → `n × c`.
pub fn global_mean_pool<T: Scalar>(x: &Act<T>) -> Vec<T> {
    let hw = x.pixels();
    let inv = T::one() / T::lit(hw as f64);
    let mut out = vec![T::zero(); x.n * x.c];
    for b in 0..x.n {
        let o = &mut out[b * x.c..(b + 1) * x.c];
        for px in 0..hw {
            let s = (b * hw + px) * x.c;
            for j in 0..x.c {
                o[j] = o[j] + x.data[s + j];
            }
        }
        o.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

pub fn global_mean_pool_backward<T: Scalar>(
    dy: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Act<T> {
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let mut dx = Act::zeros(n, h, w, c);
    for b in 0..n {
        for px in 0..hw {
            let d = (b * hw + px) * c;
            for j in 0..c {
                dx.data[d + j] = dy[b * c + j] * inv;
            }
        }
    }
    dx
}

/// Sinusoidal embedding of integer timesteps, `n × dim`.
pub fn timestep_embedding<T: Scalar>(t: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); t.len() * dim];
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let a = ti as f64 * freq;
            out[i * dim + j] = T::lit(a.sin());
            out[i * dim + half + j] = T::lit(a.cos());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Cross-attention
// ---------------------------------------------------------------------------

/// Single-head cross-attention from image positions (queries) to a
/// per-sample conditioning sequence (keys/values), with a residual.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub c: usize,
    pub d: usize,
    pub cond_dim: usize,
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    norm: NormCache<T>,
    xn: Vec<T>,
    q: Vec<T>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    attn: Vec<Vec<T>>,
    ctx: Vec<T>,
    conds: Vec<Vec<T>>,
}

impl CrossAttention {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize, cond_dim: usize) -> Self {
        let d = c;
        Self {
            c,
            d,
            cond_dim,
            norm: GroupNorm::new(lb, &format!("{name}.norm"), c, 1),
            q: Linear::new(lb, &format!("{name}.to_q"), c, d, false),
            k: Linear::new(lb, &format!("{name}.to_k"), cond_dim, d, false),
            v: Linear::new(lb, &format!("{name}.to_v"), cond_dim, d, false),
            o: Linear::new(lb, &format!("{name}.to_out"), d, c, true),
        }
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::lit(self.d as f64).sqrt()
    }

    /// `conds[b]` is sample `b`'s sequence, `len_b × cond_dim` row-major.
    pub fn forward<T: Scalar>(
        &self,
        p: &[T],
        x: &Act<T>,
        conds: &[&[T]],
    ) -> (Act<T>, AttnCache<T>) {
        assert_eq!(conds.len(), x.n, "one conditioning sequence per sample");
        let rows = x.rows();
        let hw = x.pixels();
        // Layer norm over channels: view every position as its own sample.
        let as_rows = Act::from_vec(rows, 1, 1, self.c, x.data.clone());
        let (xn, norm) = self.norm.forward(p, &as_rows);
        let q = self.q.forward(p, &xn.data, rows);
        let scale = self.scale::<T>();
        let mut ctx = vec![T::zero(); rows * self.d];
        let (mut ks, mut vs, mut attns) = (Vec::new(), Vec::new(), Vec::new());
        for (b, cond) in conds.iter().enumerate() {
            let len = cond.len() / self.cond_dim;
            let k = self.k.forward(p, cond, len);
            let v = self.v.forward(p, cond, len);
            let qb = &q[b * hw * self.d..(b + 1) * hw * self.d];
            let mut a = vec![T::zero(); hw * len];
            gemm(hw, self.d, len, qb, false, &k, true, &mut a, false);
            for row in a.chunks_exact_mut(len) {
                let mut mx = T::neg_infinity();
                for v in row.iter_mut() {
                    *v = *v * scale;
                    mx = mx.max(*v);
                }
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            gemm(
                hw,
                len,
                self.d,
                &a,
                false,
                &v,
                false,
                &mut ctx[b * hw * self.d..(b + 1) * hw * self.d],
                false,
            );
            ks.push(k);
            vs.push(v);
            attns.push(a);
        }
        let mut y = self.o.forward(p, &ctx, rows);
        for (yv, &xv) in y.iter_mut().zip(&x.data) {
            *yv = *yv + xv;
        }
        (
            Act::from_vec(x.n, x.h, x.w, self.c, y),
            AttnCache {
                norm,
                xn: xn.data,
                q,
                k: ks,
                v: vs,
                attn: attns,
                ctx,
                conds: conds.iter().map(|c| c.to_vec()).collect(),
            },
        )
    }

    /// Returns `dx` and, when `want_cond`, per-sample conditioning gradients.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        cache: &AttnCache<T>,
        dy: &Act<T>,
        mut grads: Option<&mut [T]>,
        want_cond: bool,
    ) -> (Act<T>, Option<Vec<Vec<T>>>) {
        let rows = dy.rows();
        let hw = dy.pixels();
        let d = self.d;
        let scale = self.scale::<T>();
        let dctx = self
            .o
            .backward(p, &cache.ctx, &dy.data, rows, grads.as_deref_mut(), true)
            .expect("dx requested");
        let mut dq = vec![T::zero(); rows * d];
        let mut dconds = want_cond.then(Vec::new);
        for b in 0..dy.n {
            let a = &cache.attn[b];
            let k = &cache.k[b];
            let v = &cache.v[b];
            let len = k.len() / d;
            let dctx_b = &dctx[b * hw * d..(b + 1) * hw * d];
            let qb = &cache.q[b * hw * d..(b + 1) * hw * d];
            let mut da = vec![T::zero(); hw * len];
            gemm(hw, d, len, dctx_b, false, v, true, &mut da, false);
            let mut dv = vec![T::zero(); len * d];
            gemm(len, hw, d, a, true, dctx_b, false, &mut dv, false);
            // softmax backward, folding in the score scale
            let mut ds = da;
            for (drow, arow) in ds.chunks_exact_mut(len).zip(a.chunks_exact(len)) {
                let dot = drow.iter().zip(arow).fold(T::zero(), |s, (&g, &p)| s + g * p);
                for (g, &p) in drow.iter_mut().zip(arow) {
                    *g = p * (*g - dot) * scale;
                }
            }
            gemm(
                hw,
                len,
                d,
                &ds,
                false,
                k,
                false,
                &mut dq[b * hw * d..(b + 1) * hw * d],
                false,
            );
            let mut dk = vec![T::zero(); len * d];
            gemm(len, hw, d, &ds, true, qb, false, &mut dk, false);
            let cond = &cache.conds[b];
            let need = dconds.is_some();
            let dc_k = self.k.backward(p, cond, &dk, len, grads.as_deref_mut(), need);
            let dc_v = self.v.backward(p, cond, &dv, len, grads.as_deref_mut(), need);
            if let (Some(out), Some(mut ck), Some(cv)) = (dconds.as_mut(), dc_k, dc_v) {
                for (a, b) in ck.iter_mut().zip(cv) {
                    *a = *a + b;
                }
                out.push(ck);
            }
        }
        let dxn = self
            .q
            .backward(p, &cache.xn, &dq, rows, grads.as_deref_mut(), true)
            .expect("dx requested");
        let dxn = Act::from_vec(rows, 1, 1, self.c, dxn);
        let mut dx = self.norm.backward(p, &cache.norm, &dxn, grads);
        for (a, &g) in dx.data.iter_mut().zip(&dy.data) {
            *a = *a + g;
        }
        (Act::from_vec(dy.n, dy.h, dy.w, self.c, dx.data), dconds)
    }

    pub fn flops(&self, positions: usize, cond_len: usize) -> u64 {
        let proj = self.q.flops_per_row() * positions as u64
            + self.o.flops_per_row() * positions as u64
            + (self.k.flops_per_row() + self.v.flops_per_row()) * cond_len as u64;
        proj + 4 * (positions * cond_len * self.d) as u64
    }
}
