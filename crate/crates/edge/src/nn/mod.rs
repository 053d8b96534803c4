//! Minimal dense/conv layer toolkit with explicit backward passes.
//!
//! Every parameter tensor carries its gradient buffer; layers expose
//! `forward` plus a `backward` that accumulates parameter gradients and
//! returns the gradient w.r.t. the layer input. All math is f64 so the
//! finite-difference checks can use tight tolerances.

mod layers;
mod optim;

pub use layers::{Conv2d, Embedding, Linear};
pub use optim::RmsProp;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// A named parameter tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub v: ArrayD<f64>,
    pub g: ArrayD<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            v: ArrayD::zeros(IxDyn(shape)),
            g: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                x * std
            })
            .collect();
        Param {
            v: ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(),
            g: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}

/// Visit every parameter of a model under a dotted name prefix.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.v.len());
        n
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// SiLU activation x * sigmoid(x).
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of SiLU.
pub fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// 2x2 average pooling, stride 2. Odd trailing rows/cols are dropped.
pub fn avg_pool2(x: &ndarray::ArrayView4<f64>) -> ndarray::Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    ndarray::Array4::from_shape_fn((n, c, ho, wo), |(b, ch, y, xx)| {
        let (y2, x2) = (y * 2, xx * 2);
        (x[[b, ch, y2, x2]]
            + x[[b, ch, y2, x2 + 1]]
            + x[[b, ch, y2 + 1, x2]]
            + x[[b, ch, y2 + 1, x2 + 1]])
            / 4.0
    })
}

/// Gradient of [`avg_pool2`] w.r.t. its input.
pub fn avg_pool2_backward(
    dy: &ndarray::ArrayView4<f64>,
    in_h: usize,
    in_w: usize,
) -> ndarray::Array4<f64> {
    let (n, c, ho, wo) = dy.dim();
    let mut dx = ndarray::Array4::zeros((n, c, in_h, in_w));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let g = dy[[b, ch, y, xx]] / 4.0;
                    dx[[b, ch, y * 2, xx * 2]] = g;
                    dx[[b, ch, y * 2, xx * 2 + 1]] = g;
                    dx[[b, ch, y * 2 + 1, xx * 2]] = g;
                    dx[[b, ch, y * 2 + 1, xx * 2 + 1]] = g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &ndarray::ArrayView4<f64>) -> ndarray::Array4<f64> {
    let (n, c, h, w) = x.dim();
    ndarray::Array4::from_shape_fn((n, c, h * 2, w * 2), |(b, ch, y, xx)| {
        x[[b, ch, y / 2, xx / 2]]
    })
}

/// Gradient of [`upsample2`]: sums the four fan-out positions.
pub fn upsample2_backward(dy: &ndarray::ArrayView4<f64>) -> ndarray::Array4<f64> {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = ndarray::Array4::zeros((n, c, h2 / 2, w2 / 2));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dx[[b, ch, y / 2, xx / 2]] += dy[[b, ch, y, xx]];
                }
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a timestep index, dimension `dim` (even).
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (10_000f64).powf(-(k as f64) / half as f64);
        let angle = t as f64 * freq;
        out[k] = angle.sin();
        out[half + k] = angle.cos();
    }
    out
}
