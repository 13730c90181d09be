//! Minimal CPU neural-network stack with hand-written backward passes.
//!
//! Everything is generic over the scalar so the training path (f32) and the
//! finite-difference gradient checks (f64) run the exact same code.

pub mod checkpoint;
pub mod conv;
pub mod convlstm;
pub mod unet;

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub trait Scalar: NdFloat + FromPrimitive + Default + 'static {
    fn from_f64c(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite literal")
    }
    fn to_f64c(self) -> f64;
    fn from_f32c(x: f32) -> Self {
        Self::from_f64c(x as f64)
    }
}

impl Scalar for f32 {
    fn to_f64c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64c(self) -> f64 {
        self
    }
}

/// A named view over one parameter tensor and its gradient accumulator.
/// `name` has the form `block.tensor` and is stable across save/load; the
/// block part is the unit of finetune freezing.
pub struct ParamRef<'a, F> {
    pub name: String,
    pub data: &'a mut [F],
    pub grad: &'a mut [F],
}

impl<'a, F> ParamRef<'a, F> {
    pub fn block(&self) -> &str {
        self.name.rsplit_once('.').map(|(b, _)| b).unwrap_or(&self.name)
    }
}

/// Anything holding learnable parameters.
pub trait Parameterized<F: Scalar> {
    /// Parameter views in a fixed, deterministic order.
    fn param_refs(&mut self, prefix: &str) -> Vec<ParamRef<'_, F>>;

    fn zero_grads(&mut self) {
        for p in self.param_refs("") {
            for g in p.grad.iter_mut() {
                *g = F::zero();
            }
        }
    }

    fn param_count(&mut self) -> usize {
        self.param_refs("").iter().map(|p| p.data.len()).sum()
    }
}

/// He-uniform initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn he_uniform<F: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| F::from_f64c(rng.gen_range(-limit..limit)))
        .collect()
}

/// Orthogonal-style initialization for recurrent kernels: Gaussian rows made
/// orthonormal by modified Gram-Schmidt (rows <= cols assumed; falls back to
/// the raw Gaussian rows if a row degenerates).
pub fn orthogonal_rows<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<F> {
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    // Box-Muller from two uniforms keeps us off rand_distr
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect()
        })
        .collect();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            for k in 0..cols {
                m[i][k] -= dot * m[j][k];
            }
        }
        let norm: f64 = m[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for x in m[i].iter_mut() {
                *x /= norm;
            }
        }
    }
    m.into_iter()
        .flatten()
        .map(F::from_f64c)
        .collect()
}

/// Adam over a parameter view list; moment buffers are laid out in the same
/// fixed order the views are produced in.
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: i32,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr: F::from_f64c(lr),
            beta1: F::from_f64c(0.9),
            beta2: F::from_f64c(0.999),
            eps: F::from_f64c(1e-8),
            step: 0,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
        }
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_, F>]) {
        self.step += 1;
        let b1t = F::one() - self.beta1.powi(self.step);
        let b2t = F::one() - self.beta2.powi(self.step);
        let one = F::one();
        let mut off = 0;
        for p in params.iter_mut() {
            for (i, (w, g)) in p.data.iter_mut().zip(p.grad.iter()).enumerate() {
                let idx = off + i;
                self.m[idx] = self.beta1 * self.m[idx] + (one - self.beta1) * *g;
                self.v[idx] = self.beta2 * self.v[idx] + (one - self.beta2) * *g * *g;
                let mh = self.m[idx] / b1t;
                let vh = self.v[idx] / b2t;
                *w = *w - self.lr * mh / (vh.sqrt() + self.eps);
            }
            off += p.data.len();
        }
    }
}
