//! Minimal neural-network building blocks with hand-written backward passes.
//!
//! Layers are generic over [`Scalar`] so the same code trains in `f32` and is
//! checked against finite differences in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in &mut p.data {
            *v = T::of(rng.gen_range(-bound..bound));
        }
        p
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Anything holding parameters in a fixed order.
pub trait Parameters<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn zero(&mut self) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += other`, parameter by parameter.
    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// 1-D convolution over time with "same" zero padding and stride 1.
/// Activations are `channels x frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_channels * kernel) as f64;
        Self {
            weight: Param::uniform(
                format!("{prefix}.weight"),
                vec![out_channels, in_channels, kernel],
                (6.0 / fan_in).sqrt(),
                rng,
            ),
            bias: Param::zeros(format!("{prefix}.bias"), vec![out_channels]),
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Valid output range `[lo, hi)` for tap `k` over `frames` samples.
    fn tap_range(&self, k: usize, frames: usize) -> (usize, usize, isize) {
        let shift = k as isize - self.pad() as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (frames as isize - shift).clamp(0, frames as isize) as usize;
        (lo, hi, shift)
    }

    pub fn forward(&self, x: &[T], frames: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_channels * frames);
        let mut out = vec![T::zero(); self.out_channels * frames];
        for o in 0..self.out_channels {
            let row = &mut out[o * frames..(o + 1) * frames];
            row.iter_mut().for_each(|v| *v = self.bias.data[o]);
            for i in 0..self.in_channels {
                let xin = &x[i * frames..(i + 1) * frames];
                for k in 0..self.kernel {
                    let w = self.weight.data[(o * self.in_channels + i) * self.kernel + k];
                    let (lo, hi, shift) = self.tap_range(k, frames);
                    if lo >= hi {
                        continue;
                    }
                    let src = &xin[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (y, &s) in row[lo..hi].iter_mut().zip(src) {
                        *y += w * s;
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx` when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &[T],
        frames: usize,
        dout: &[T],
        grads: &mut Conv1d<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let mut dx = want_input_grad.then(|| vec![T::zero(); self.in_channels * frames]);
        for o in 0..self.out_channels {
            let drow = &dout[o * frames..(o + 1) * frames];
            grads.bias.data[o] += drow.iter().copied().sum();
            for i in 0..self.in_channels {
                let xin = &x[i * frames..(i + 1) * frames];
                for k in 0..self.kernel {
                    let widx = (o * self.in_channels + i) * self.kernel + k;
                    let (lo, hi, shift) = self.tap_range(k, frames);
                    if lo >= hi {
                        continue;
                    }
                    let (a, b) = ((lo as isize + shift) as usize, (hi as isize + shift) as usize);
                    grads.weight.data[widx] += drow[lo..hi].iter().zip(&xin[a..b]).map(|(&d, &s)| d * s).sum();
                    if let Some(dx) = dx.as_mut() {
                        let w = self.weight.data[widx];
                        for (g, &d) in dx[i * frames + a..i * frames + b].iter_mut().zip(&drow[lo..hi]) {
                            *g += w * d;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Param::zeros(self.weight.name.clone(), self.weight.shape.clone()),
            bias: Param::zeros(self.bias.name.clone(), self.bias.shape.clone()),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv1d<U> {
        Conv1d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
        }
    }
}

/// Fully-connected layer `y = W x + b`, `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub inputs: usize,
    pub outputs: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(prefix: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{prefix}.weight"), vec![outputs, inputs], bound, rng),
            bias: Param::uniform(format!("{prefix}.bias"), vec![outputs], bound, rng),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let w = &self.weight.data[o * self.inputs..(o + 1) * self.inputs];
                self.bias.data[o] + w.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[T], dy: &[T], grads: &mut Linear<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inputs];
        for (o, &d) in dy.iter().enumerate() {
            grads.bias.data[o] += d;
            let w = &self.weight.data[o * self.inputs..(o + 1) * self.inputs];
            let gw = &mut grads.weight.data[o * self.inputs..(o + 1) * self.inputs];
            for ((g, &xi), (dxi, &wi)) in gw.iter_mut().zip(x).zip(dx.iter_mut().zip(w)) {
                *g += d * xi;
                *dxi += d * wi;
            }
        }
        dx
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Param::zeros(self.weight.name.clone(), self.weight.shape.clone()),
            bias: Param::zeros(self.bias.name.clone(), self.bias.shape.clone()),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}

/// Adam moment settings. Weight decay is decoupled from the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: Vec<&Param<T>>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, wd, eps) = (T::of(c.learning_rate), T::of(c.weight_decay), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.data.len(), g.data.len(), "shape mismatch for {}", p.name);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                p.data[j] = p.data[j] - lr * (update + wd * p.data[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn fd<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F) -> Vec<f64> {
        let h = 1e-6;
        let mut p = x.to_vec();
        (0..x.len())
            .map(|k| {
                let o = p[k];
                p[k] = o + h;
                let up = f(&p);
                p[k] = o - h;
                let down = f(&p);
                p[k] = o;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0f64] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(silu(0.0f32), 0.0);
    }

    #[test]
    fn conv_matches_direct_sum_and_gradients() {
        let mut rng = seeded(1);
        let conv: Conv1d<f64> = Conv1d::new("c", 3, 4, 3, &mut rng);
        let frames = 7;
        let x: Vec<f64> = (0..3 * frames).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let y = conv.forward(&x, frames);
        // direct definition with explicit zero padding
        for o in 0..4 {
            for t in 0..frames {
                let mut s = conv.bias.data[o];
                for i in 0..3 {
                    for k in 0..3 {
                        let src = t as isize + k as isize - 1;
                        if (0..frames as isize).contains(&src) {
                            s += conv.weight.data[(o * 3 + i) * 3 + k] * x[i * frames + src as usize];
                        }
                    }
                }
                assert!((y[o * frames + t] - s).abs() < 1e-12);
            }
        }

        let readout: Vec<f64> = (0..4 * frames).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |c: &Conv1d<f64>, x: &[f64]| -> f64 {
            c.forward(x, frames).iter().zip(&readout).map(|(a, b)| a * b).sum()
        };
        let mut grads = conv.zeros_like();
        let dx = conv.backward(&x, frames, &readout, &mut grads, true).unwrap();
        let num_dx = fd(&x, |xx| loss(&conv, xx));
        for (a, n) in dx.iter().zip(&num_dx) {
            assert!((a - n).abs() < 1e-6);
        }
        let num_dw = fd(&conv.weight.data, |w| {
            let mut c = conv.clone();
            c.weight.data = w.to_vec();
            loss(&c, &x)
        });
        for (a, n) in grads.weight.data.iter().zip(&num_dw) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = seeded(2);
        let lin: Linear<f64> = Linear::new("l", 5, 3, &mut rng);
        let x = vec![0.1, -0.4, 0.8, 0.3, -0.2];
        let dy = vec![0.5, -1.0, 0.25];
        let mut grads = lin.zeros_like();
        let dx = lin.backward(&x, &dy, &mut grads);
        let f = |l: &Linear<f64>, x: &[f64]| l.forward(x).iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>();
        let num = fd(&x, |xx| f(&lin, xx));
        for (a, n) in dx.iter().zip(&num) {
            assert!((a - n).abs() < 1e-8);
        }
        let num_w = fd(&lin.weight.data, |w| {
            let mut l = lin.clone();
            l.weight.data = w.to_vec();
            f(&l, &x)
        });
        for (a, n) in grads.weight.data.iter().zip(&num_w) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_gradient_and_decay_is_noop() {
        let mut rng = seeded(3);
        let mut p = Param::<f32>::uniform("p", vec![10], 1.0, &mut rng);
        let before = p.clone();
        let g = Param::<f32>::zeros("p", vec![10]);
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step(vec![&mut p], vec![&g]);
        assert_eq!(p, before);

        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        });
        let g = Param::<f32>::uniform("p", vec![10], 1.0, &mut rng);
        opt.step(vec![&mut p], vec![&g]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Param::<f64>::zeros("p", vec![3]);
        let mut g = Param::<f64>::zeros("p", vec![3]);
        g.data = vec![2.0, -0.5, 0.0];
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        opt.step(vec![&mut p], vec![&g]);
        assert!((p.data[0] + 0.1).abs() < 1e-6);
        assert!((p.data[1] - 0.1).abs() < 1e-6);
        assert_eq!(p.data[2], 0.0);
    }
}
