//! Minimal neural-network substrate with hand-written reverse passes.
//!
//! Activations are NHWC ([`Act`]). Parameters of a network live in one flat
//! vector described by a [`ParamLayout`]; layers hold [`ParamRef`] offsets
//! into it, and gradients use the same layout. Every backward takes
//! `grads: Option<&mut [T]>`; passing `None` skips weight gradients, which
//! is what embedding distillation wants.

pub mod cnn;
pub mod layers;
pub mod optim;
pub mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Act<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![T::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "activation size mismatch");
        Self { n, h, w, c, data }
    }

    /// Number of spatial positions over the whole batch.
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn same_dims(&self, c: usize) -> Self {
        Self::zeros(self.n, self.h, self.w, c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    #[inline]
    pub fn get<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn get_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Default, Debug)]
pub struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    inits: Vec<Init>,
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamRef {
        let len = shape.iter().product();
        let r = ParamRef {
            offset: self.len,
            len,
        };
        self.specs.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
        });
        self.inits.push(init);
        self.len += len;
        r
    }

    pub fn finish(self) -> ParamLayout {
        ParamLayout {
            specs: self.specs,
            inits: self.inits,
            len: self.len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    inits: Vec<Init>,
    len: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    /// Seeded initialization. Values are drawn in `f64` and cast so that
    /// `f32` and `f64` networks built from the same seed agree.
    pub fn init<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.len);
        for (spec, init) in self.specs.iter().zip(&self.inits) {
            let n = spec.numel();
            match *init {
                Init::Zeros => out.extend(std::iter::repeat_n(T::zero(), n)),
                Init::Ones => out.extend(std::iter::repeat_n(T::one(), n)),
                Init::Uniform(b) => {
                    let d = Uniform::new_inclusive(-b, b).expect("valid bound");
                    out.extend((0..n).map(|_| T::lit(d.sample(&mut rng))));
                }
                Init::Normal(s) => {
                    let d = Normal::new(0.0, s).expect("valid std");
                    out.extend((0..n).map(|_| T::lit(d.sample(&mut rng))));
                }
            }
        }
        out
    }
}

/// Converts a parameter vector between precisions.
pub fn cast_params<A: Scalar, B: Scalar>(p: &[A]) -> Vec<B> {
    p.iter().map(|v| B::lit(v.as_f64())).collect()
}
