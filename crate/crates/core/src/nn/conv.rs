use rand::Rng;

use super::{join, kaiming, Parameters};
use crate::real::{MatMut, MatRef, Real};
use crate::tensor::Tensor;

/// Zero-pads every channel by one voxel on each side.
fn pad1<T: Real>(x: &Tensor<T>) -> (Vec<T>, [usize; 3]) {
    let [c, d, h, w] = x.shape();
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut out = vec![T::zero(); c * pd * ph * pw];
    let src = x.data();
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ch * d + z) * h + y) * w;
                let t = ((ch * pd + z + 1) * ph + y + 1) * pw + 1;
                out[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    (out, [pd, ph, pw])
}

/// Geometry of the "same" 3x3x3 convolution evaluated on the padded grid.
///
/// Output centres occupy the contiguous padded index range `[start, start+len)`;
/// kernel tap `(a, b, c)` reads the input at offset `delta(a, b, c)` from the
/// centre. Entries of that range that fall on the padding ring are discarded.
struct PadGrid {
    slab: usize,
    row: usize,
    total: usize,
    start: usize,
    len: usize,
}

impl PadGrid {
    fn new([d, h, w]: [usize; 3]) -> Self {
        let (ph, pw) = (h + 2, w + 2);
        let slab = ph * pw;
        let start = slab + pw + 1;
        let end = d * slab + h * pw + w + 1;
        Self {
            slab,
            row: pw,
            total: (d + 2) * slab,
            start,
            len: end - start,
        }
    }

    fn tap_origin(&self, tap: usize) -> usize {
        let (a, b, c) = (tap / 9, (tap / 3) % 3, tap % 3);
        self.start + a * self.slab + b * self.row + c - (self.slab + self.row + 1)
    }

    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z + 1) * self.slab + (y + 1) * self.row + (x + 1) - self.start
    }
}

/// 3x3x3 convolution, stride 1, zero padding 1, no bias.
///
/// Weight layout `[out][in][kd][kh][kw]`.
#[derive(Clone, Debug)]
pub struct Conv3<T> {
    ci: usize,
    co: usize,
    pub weight: Vec<T>,
}

impl<T: Real> Conv3<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, ci: usize, co: usize, slope: f64) -> Self {
        Self {
            ci,
            co,
            weight: kaiming(rng, ci * 27, slope, co * ci * 27),
        }
    }

    pub fn zeros(ci: usize, co: usize) -> Self {
        Self {
            ci,
            co,
            weight: vec![T::zero(); co * ci * 27],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.co
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.ci, "conv3 input channels");
        let spatial = x.spatial();
        let (xp, _) = pad1(x);
        let g = PadGrid::new(spatial);
        let mut yp = vec![T::zero(); self.co * g.len];
        for tap in 0..27 {
            T::gemm(
                self.co,
                self.ci,
                g.len,
                T::one(),
                MatRef::new(&self.weight, tap, self.ci * 27, 27),
                MatRef::new(&xp, g.tap_origin(tap), g.total, 1),
                T::one(),
                MatMut::new(&mut yp, 0, g.len, 1),
            );
        }
        let [d, h, w] = spatial;
        let mut y = Tensor::zeros([self.co, d, h, w]);
        let out = y.data_mut();
        for c in 0..self.co {
            for z in 0..d {
                for r in 0..h {
                    let s = c * g.len + g.index(z, r, 0);
                    let t = ((c * d + z) * h + r) * w;
                    out[t..t + w].copy_from_slice(&yp[s..s + w]);
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let spatial = x.spatial();
        let [d, h, w] = spatial;
        let (xp, _) = pad1(x);
        let g = PadGrid::new(spatial);
        let mut dyp = vec![T::zero(); self.co * g.len];
        let src = dy.data();
        for c in 0..self.co {
            for z in 0..d {
                for r in 0..h {
                    let t = c * g.len + g.index(z, r, 0);
                    let s = ((c * d + z) * h + r) * w;
                    dyp[t..t + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        let mut dxp = vec![T::zero(); self.ci * g.total];
        for tap in 0..27 {
            let origin = g.tap_origin(tap);
            T::gemm(
                self.co,
                g.len,
                self.ci,
                T::one(),
                MatRef::new(&dyp, 0, g.len, 1),
                MatRef::new(&xp, origin, 1, g.total),
                T::one(),
                MatMut::new(&mut grads.weight, tap, self.ci * 27, 27),
            );
            T::gemm(
                self.ci,
                self.co,
                g.len,
                T::one(),
                MatRef::new(&self.weight, tap, 27, self.ci * 27),
                MatRef::new(&dyp, 0, g.len, 1),
                T::one(),
                MatMut::new(&mut dxp, origin, g.total, 1),
            );
        }
        let (pd, ph, pw) = (d + 2, h + 2, w + 2);
        let mut dx = Tensor::zeros(x.shape());
        let out = dx.data_mut();
        for c in 0..self.ci {
            for z in 0..d {
                for r in 0..h {
                    let s = ((c * pd + z + 1) * ph + r + 1) * pw + 1;
                    let t = ((c * d + z) * h + r) * w;
                    out[t..t + w].copy_from_slice(&dxp[s..s + w]);
                }
            }
        }
        dx
    }
}

impl<T: Real> Parameters<T> for Conv3<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// Gathers non-overlapping 2x2x2 blocks into columns:
/// `cols[(c*8 + k), v]` with `k = kz*4 + ky*2 + kx` and `v` the output voxel.
fn blocks_to_columns<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let [c, d, h, w] = x.shape();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let n = od * oh * ow;
    let src = x.data();
    let mut cols = vec![T::zero(); c * 8 * n];
    for ch in 0..c {
        for k in 0..8 {
            let (kz, ky, kx) = (k / 4, (k / 2) % 2, k % 2);
            let row = &mut cols[(ch * 8 + k) * n..(ch * 8 + k + 1) * n];
            let mut v = 0;
            for z in 0..od {
                for y in 0..oh {
                    let base = ((ch * d + 2 * z + kz) * h + 2 * y + ky) * w + kx;
                    for xx in 0..ow {
                        row[v] = src[base + 2 * xx];
                        v += 1;
                    }
                }
            }
        }
    }
    cols
}

fn columns_to_blocks<T: Real>(cols: &[T], shape: [usize; 4]) -> Tensor<T> {
    let [c, d, h, w] = shape;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let n = od * oh * ow;
    let mut x = Tensor::zeros(shape);
    let dst = x.data_mut();
    for ch in 0..c {
        for k in 0..8 {
            let (kz, ky, kx) = (k / 4, (k / 2) % 2, k % 2);
            let row = &cols[(ch * 8 + k) * n..(ch * 8 + k + 1) * n];
            let mut v = 0;
            for z in 0..od {
                for y in 0..oh {
                    let base = ((ch * d + 2 * z + kz) * h + 2 * y + ky) * w + kx;
                    for xx in 0..ow {
                        dst[base + 2 * xx] = row[v];
                        v += 1;
                    }
                }
            }
        }
    }
    x
}

/// Strided 2x2x2 convolution halving each spatial dimension, no bias.
///
/// Weight layout `[out][in][2][2][2]`.
#[derive(Clone, Debug)]
pub struct DownConv<T> {
    ci: usize,
    co: usize,
    pub weight: Vec<T>,
}

impl<T: Real> DownConv<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, ci: usize, co: usize, slope: f64) -> Self {
        Self {
            ci,
            co,
            weight: kaiming(rng, ci * 8, slope, co * ci * 8),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.co
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.ci, "down-conv input channels");
        let [_, d, h, w] = x.shape();
        assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "down-conv needs even dims");
        let cols = blocks_to_columns(x);
        let n = (d / 2) * (h / 2) * (w / 2);
        let mut y = Tensor::zeros([self.co, d / 2, h / 2, w / 2]);
        T::gemm(
            self.co,
            self.ci * 8,
            n,
            T::one(),
            MatRef::new(&self.weight, 0, self.ci * 8, 1),
            MatRef::new(&cols, 0, n, 1),
            T::zero(),
            MatMut::new(y.data_mut(), 0, n, 1),
        );
        y
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let cols = blocks_to_columns(x);
        let n = dy.voxels();
        let k = self.ci * 8;
        T::gemm(
            self.co,
            n,
            k,
            T::one(),
            MatRef::new(dy.data(), 0, n, 1),
            MatRef::new(&cols, 0, 1, n),
            T::one(),
            MatMut::new(&mut grads.weight, 0, k, 1),
        );
        let mut dcols = vec![T::zero(); k * n];
        T::gemm(
            k,
            self.co,
            n,
            T::one(),
            MatRef::new(&self.weight, 0, 1, k),
            MatRef::new(dy.data(), 0, n, 1),
            T::zero(),
            MatMut::new(&mut dcols, 0, n, 1),
        );
        columns_to_blocks(&dcols, x.shape())
    }
}

impl<T: Real> Parameters<T> for DownConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// Transposed 2x2x2 convolution with stride 2 (doubles each spatial
/// dimension), no bias.
///
/// Weight layout `[in][out][2][2][2]`.
#[derive(Clone, Debug)]
pub struct UpConv<T> {
    ci: usize,
    co: usize,
    pub weight: Vec<T>,
}

impl<T: Real> UpConv<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, ci: usize, co: usize, slope: f64) -> Self {
        Self {
            ci,
            co,
            weight: kaiming(rng, ci, slope, ci * co * 8),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.co
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.ci, "up-conv input channels");
        let [_, d, h, w] = x.shape();
        let n = x.voxels();
        let rows = self.co * 8;
        let mut cols = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            self.ci,
            n,
            T::one(),
            MatRef::new(&self.weight, 0, 1, rows),
            MatRef::new(x.data(), 0, n, 1),
            T::zero(),
            MatMut::new(&mut cols, 0, n, 1),
        );
        columns_to_blocks(&cols, [self.co, 2 * d, 2 * h, 2 * w])
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let n = x.voxels();
        let rows = self.co * 8;
        let dcols = blocks_to_columns(dy);
        T::gemm(
            self.ci,
            n,
            rows,
            T::one(),
            MatRef::new(x.data(), 0, n, 1),
            MatRef::new(&dcols, 0, 1, n),
            T::one(),
            MatMut::new(&mut grads.weight, 0, rows, 1),
        );
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            self.ci,
            rows,
            n,
            T::one(),
            MatRef::new(&self.weight, 0, rows, 1),
            MatRef::new(&dcols, 0, n, 1),
            T::zero(),
            MatMut::new(dx.data_mut(), 0, n, 1),
        );
        dx
    }
}

impl<T: Real> Parameters<T> for UpConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// 1x1x1 convolution with optional bias. Weight layout `[out][in]`.
#[derive(Clone, Debug)]
pub struct PointConv<T> {
    ci: usize,
    co: usize,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> PointConv<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, ci: usize, co: usize, bias: bool, slope: f64) -> Self {
        Self {
            ci,
            co,
            weight: kaiming(rng, ci, slope, co * ci),
            bias: bias.then(|| vec![T::zero(); co]),
        }
    }

    pub fn zeros(ci: usize, co: usize, bias: bool) -> Self {
        Self {
            ci,
            co,
            weight: vec![T::zero(); co * ci],
            bias: bias.then(|| vec![T::zero(); co]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.ci
    }

    pub fn out_channels(&self) -> usize {
        self.co
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.ci, "point-conv input channels");
        let [_, d, h, w] = x.shape();
        let n = x.voxels();
        let mut y = Tensor::zeros([self.co, d, h, w]);
        if let Some(b) = &self.bias {
            for (c, &bc) in b.iter().enumerate() {
                y.channel_mut(c).fill(bc);
            }
        }
        T::gemm(
            self.co,
            self.ci,
            n,
            T::one(),
            MatRef::new(&self.weight, 0, self.ci, 1),
            MatRef::new(x.data(), 0, n, 1),
            T::one(),
            MatMut::new(y.data_mut(), 0, n, 1),
        );
        y
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let n = x.voxels();
        T::gemm(
            self.co,
            n,
            self.ci,
            T::one(),
            MatRef::new(dy.data(), 0, n, 1),
            MatRef::new(x.data(), 0, 1, n),
            T::one(),
            MatMut::new(&mut grads.weight, 0, self.ci, 1),
        );
        if let Some(gb) = &mut grads.bias {
            for (c, g) in gb.iter_mut().enumerate() {
                *g = *g + dy.channel(c).iter().copied().sum::<T>();
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            self.ci,
            self.co,
            n,
            T::one(),
            MatRef::new(&self.weight, 0, 1, self.ci),
            MatRef::new(dy.data(), 0, n, 1),
            T::zero(),
            MatMut::new(dx.data_mut(), 0, n, 1),
        );
        dx
    }
}

impl<T: Real> Parameters<T> for PointConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
