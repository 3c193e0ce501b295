//! Minimal neural toolkit: a reverse-mode tape over 2-D arrays, GRU and
//! dense layers, batch normalization, dropout, softmax/cross-entropy and
//! AdamW. Training runs in f32; gradient checks instantiate everything in
//! f64.

pub mod init;
pub mod layers;
pub mod optim;
pub mod tape;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::distributions::uniform::SampleUniform;
use rand::Rng;

/// Scalar type for all model arithmetic.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + SampleUniform
    + std::ops::AddAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self;

    /// Exponential used inside hot layer kernels. f32 uses a polynomial
    /// approximation (relative error ~1e-7), f64 the exact libm call so
    /// double-precision oracles stay exact.
    fn fast_exp(self) -> Self;
    fn fast_sigmoid(self) -> Self;
    fn fast_tanh(self) -> Self;
}

impl Real for f32 {
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    #[inline(always)]
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }

    #[inline(always)]
    fn fast_sigmoid(self) -> Self {
        1.0 / (1.0 + exp_f32(-self))
    }

    #[inline(always)]
    fn fast_tanh(self) -> Self {
        2.0 / (1.0 + exp_f32(-2.0 * self)) - 1.0
    }
}

impl Real for f64 {
    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    #[inline(always)]
    fn fast_sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }

    #[inline(always)]
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

/// Branch-light exp for f32: 2^k * P(r) with Cody-Waite range reduction
/// and a degree-6 Taylor tail. Written over plain arithmetic so the
/// element loops in the tape vectorize.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.min(88.0).max(-87.0);
    // round-to-nearest via the +/- 0.5 trick keeps this branchless
    let kf = x * LOG2E;
    let k = (kf + if kf >= 0.0 { 0.5 } else { -0.5 }) as i32;
    let kf = k as f32;
    let r = x - kf * LN2_HI - kf * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits(((k + 127) << 23) as u32);
    p * scale
}

/// Lossy scalar conversion from f64, for constants in generic code.
pub fn real<T: Real>(v: f64) -> T {
    T::from(v).expect("f64 converts to scalar type")
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Cross-entropy of one logit row against an integer label, computed via
/// log-softmax with max-subtraction.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> T {
    assert!(label < logits.len(), "label {label} out of range");
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in logits {
        sum = sum + (v - max).exp();
    }
    sum.ln() + max - logits[label]
}

/// Training/inference mode switch for stochastic and normalizing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
