//! Minimal 3D network layers with explicit backward passes.
//!
//! Every layer owns its weights as flat vectors and exposes them through
//! [`Parameters`]. Gradients live in a value of the same type as the layer
//! (see [`zeros_like`]), so optimizers and checkpoints can walk weights and
//! gradients in lockstep.

mod activation;
mod conv;
mod norm;

pub use activation::{leaky_relu, leaky_relu_backward, sigmoid, softmax2, softmax2_backward};
pub use conv::{Conv3, DownConv, PointConv, UpConv};
pub use norm::{instance_norm, InstanceNorm, NormCache};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;
use crate::tensor::Tensor;

/// Visits named parameter buffers in a fixed order.
pub trait Parameters<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A copy of `m` with every parameter set to zero, used as a gradient buffer.
pub fn zeros_like<T: Real, M: Parameters<T> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, p| p.fill(T::zero()));
    z
}

pub fn parameter_count<T, M: Parameters<T>>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.len());
    n
}

/// Concatenation of all parameters in visiting order.
pub fn flatten<T: Copy, M: Parameters<T>>(m: &M) -> Vec<T> {
    let mut out = Vec::new();
    m.visit("", &mut |_, p| out.extend_from_slice(p));
    out
}

/// Kaiming-normal initialisation for a layer followed by a leaky ReLU.
pub(crate) fn kaiming<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, slope: f64, n: usize) -> Vec<T> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()
}

/// The convolution flavours used by the networks here.
#[derive(Clone, Debug)]
pub enum ConvLayer<T> {
    Same3(Conv3<T>),
    Down(DownConv<T>),
    Point(PointConv<T>),
}

impl<T: Real> ConvLayer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            ConvLayer::Same3(c) => c.forward(x),
            ConvLayer::Down(c) => c.forward(x),
            ConvLayer::Point(c) => c.forward(x),
        }
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        match (self, grads) {
            (ConvLayer::Same3(c), ConvLayer::Same3(g)) => c.backward(x, dy, g),
            (ConvLayer::Down(c), ConvLayer::Down(g)) => c.backward(x, dy, g),
            (ConvLayer::Point(c), ConvLayer::Point(g)) => c.backward(x, dy, g),
            _ => unreachable!("gradient buffer layout differs from layer"),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvLayer::Same3(c) => c.out_channels(),
            ConvLayer::Down(c) => c.out_channels(),
            ConvLayer::Point(c) => c.out_channels(),
        }
    }
}

impl<T: Real> Parameters<T> for ConvLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        match self {
            ConvLayer::Same3(c) => c.visit(prefix, f),
            ConvLayer::Down(c) => c.visit(prefix, f),
            ConvLayer::Point(c) => c.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        match self {
            ConvLayer::Same3(c) => c.visit_mut(prefix, f),
            ConvLayer::Down(c) => c.visit_mut(prefix, f),
            ConvLayer::Point(c) => c.visit_mut(prefix, f),
        }
    }
}

/// Convolution, instance normalisation, leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct<T> {
    pub conv: ConvLayer<T>,
    pub norm: InstanceNorm<T>,
    pub slope: T,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    normed: Tensor<T>,
}

impl<T: Real> ConvNormAct<T> {
    pub fn new(conv: ConvLayer<T>, eps: f64, slope: f64) -> Self {
        let channels = conv.out_channels();
        Self {
            conv,
            norm: InstanceNorm::new(channels, eps),
            slope: T::from_f64_lossy(slope),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let conv = self.conv.forward(x);
        let (normed, norm) = self.norm.forward(&conv);
        let y = leaky_relu(&normed, self.slope);
        (
            y,
            BlockCache {
                input: x.clone(),
                norm,
                normed,
            },
        )
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let conv = self.conv.forward(x);
        let (normed, _) = self.norm.forward(&conv);
        leaky_relu(&normed, self.slope)
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let dn = leaky_relu_backward(&cache.normed, dy, self.slope);
        let dc = self.norm.backward(&cache.norm, &dn, &mut grads.norm);
        self.conv.backward(&cache.input, &dc, &mut grads.conv)
    }
}

impl<T: Real> Parameters<T> for ConvNormAct<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
