use super::{join, Parameters};
use crate::real::Real;
use crate::tensor::Tensor;

/// Normalises each channel to zero mean and unit (population) variance over
/// its own spatial extent.
pub fn instance_norm<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let layer = InstanceNorm::<T>::new(x.channels(), eps);
    layer.forward(x).0
}

/// Instance normalisation with a learnable per-channel affine transform
/// (initialised to identity).
#[derive(Clone, Debug)]
pub struct InstanceNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    eps: T,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> InstanceNorm<T> {
    pub fn new(channels: usize, eps: f64) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps: T::from_f64_lossy(eps),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        assert_eq!(x.channels(), self.gamma.len(), "instance-norm channels");
        let n = T::from_usize(x.voxels()).unwrap();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.channels());
        for c in 0..x.channels() {
            let src = x.channel(c);
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + self.eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.channel_mut(c).iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            let (g, b) = (self.gamma[c], self.beta[c]);
            for (o, &v) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
                *o = g * v + b;
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let n = T::from_usize(dy.voxels()).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        for c in 0..dy.channels() {
            let g = dy.channel(c);
            let xh = cache.xhat.channel(c);
            let sum_g: T = g.iter().copied().sum();
            let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            grads.beta[c] = grads.beta[c] + sum_g;
            grads.gamma[c] = grads.gamma[c] + sum_gx;
            // d xhat = gamma * dy
            let scale = self.gamma[c] * cache.inv_std[c] / n;
            for ((o, &gi), &xi) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *o = scale * (n * gi - sum_g - xi * sum_gx);
            }
        }
        dx
    }
}

impl<T: Real> Parameters<T> for InstanceNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
