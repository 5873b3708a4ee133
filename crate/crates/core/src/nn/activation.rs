use crate::real::Real;
use crate::tensor::Tensor;

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Backward of [`leaky_relu`] given its input.
pub fn leaky_relu_backward<T: Real>(input: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(input.data()) {
        if v < T::zero() {
            *g = *g * slope;
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Two-class softmax across channels of a `2 x D x H x W` logit tensor.
pub fn softmax2<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    assert_eq!(logits.channels(), 2);
    let mut out = logits.clone();
    let n = logits.voxels();
    let (l0, l1) = logits.data().split_at(n);
    let (p0, p1) = out.data_mut().split_at_mut(n);
    for i in 0..n {
        // p1 = sigmoid(l1 - l0), written to stay stable for large margins
        let z = l1[i] - l0[i];
        let fg = if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        };
        p1[i] = fg;
        p0[i] = T::one() - fg;
    }
    out
}

/// Maps a gradient w.r.t. probabilities to a gradient w.r.t. logits.
pub fn softmax2_backward<T: Real>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let n = probs.voxels();
    let mut dl = Tensor::zeros(probs.shape());
    let (p0, p1) = probs.data().split_at(n);
    let (g0, g1) = dprobs.data().split_at(n);
    let (d0, d1) = dl.data_mut().split_at_mut(n);
    for i in 0..n {
        let dot = p0[i] * g0[i] + p1[i] * g1[i];
        d0[i] = p0[i] * (g0[i] - dot);
        d1[i] = p1[i] * (g1[i] - dot);
    }
    dl
}
