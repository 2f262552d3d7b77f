//! Forward and backward kernels for the layer kinds the detector uses.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::graph::conv_out;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, h: usize, w: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            h,
            w,
            oh: conv_out(h, kernel, stride),
            ow: conv_out(w, kernel, stride),
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1 stride-1 convs read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let pad = g.pad() as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let pad = g.pad() as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `cout x cin x k x k`, row-major.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Tensor<T> {
    let n = x.batch();
    let mut out = Tensor::zeros([n, g.cout, g.oh, g.ow]);
    let (r, p) = (g.rows(), g.cols());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); r * p] };
    for b in 0..n {
        let xs = x.sample(b);
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        let dst = out.sample_mut(b);
        T::gemm(g.cout, r, p, T::one(), weight, (r, 1), src, (p, 1), T::zero(), dst, (p, 1));
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut dst[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    g: &ConvGeom,
    has_bias: bool,
    want_params: bool,
) -> ConvGrads<T> {
    let n = x.batch();
    let (r, p) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros(x.shape());
    let mut dweight = want_params.then(|| vec![T::zero(); g.cout * r]);
    let mut dbias = (want_params && has_bias).then(|| vec![T::zero(); g.cout]);
    let mut col = vec![T::zero(); r * p];
    let mut dcol = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); r * p] };
    for b in 0..n {
        let dys = dy.sample(b);
        if let Some(dw) = dweight.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                x.sample(b)
            } else {
                im2col(x.sample(b), g, &mut col);
                &col
            };
            // dW += dY (cout x p) * col^T (p x r)
            T::gemm(g.cout, p, r, T::one(), dys, (p, 1), src, (1, p), T::one(), dw, (r, 1));
        }
        if let Some(db) = dbias.as_mut() {
            for (co, v) in db.iter_mut().enumerate() {
                *v += dys[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
        // dcol = W^T (r x cout) * dY (cout x p)
        if g.is_pointwise() {
            T::gemm(r, g.cout, p, T::one(), weight, (1, r), dys, (p, 1), T::zero(), dx.sample_mut(b), (p, 1));
        } else {
            T::gemm(r, g.cout, p, T::one(), weight, (1, r), dys, (p, 1), T::zero(), &mut dcol, (p, 1));
            col2im(&dcol, g, dx.sample_mut(b));
        }
    }
    ConvGrads { dx, dweight, dbias }
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Per-channel statistics kept from a training-mode norm pass.
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn norm_eval<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> Tensor<T> {
    let mut y = x.clone();
    let eps = T::of(NORM_EPS);
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let scale = gamma[c] / (var[c] + eps).sqrt();
            let shift = beta[c] - mean[c] * scale;
            for v in y.plane_mut(b, c) {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

/// Batch-statistics normalization. Updates the running statistics in place.
pub fn norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
) -> (Tensor<T>, NormCache<T>) {
    let (n, ch) = (x.batch(), x.channels());
    let m = n * x.plane_len();
    let mf = T::of(m as f64);
    let eps = T::of(NORM_EPS);
    let mom = T::of(NORM_MOMENTUM);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); ch];
    for c in 0..ch {
        let mut sum = T::zero();
        for b in 0..n {
            sum += x.plane(b, c).iter().copied().sum::<T>();
        }
        let mean = sum / mf;
        let mut sq = T::zero();
        for b in 0..n {
            sq += x.plane(b, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / mf;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        for b in 0..n {
            let src = x.plane(b, c);
            let xh: Vec<T> = src.iter().map(|&v| (v - mean) * istd).collect();
            for (dst, &h) in y.plane_mut(b, c).iter_mut().zip(&xh) {
                *dst = gamma[c] * h + beta[c];
            }
            xhat.plane_mut(b, c).copy_from_slice(&xh);
        }
        let unbiased = if m > 1 { sq / T::of((m - 1) as f64) } else { var };
        running_mean[c] = (T::one() - mom) * running_mean[c] + mom * mean;
        running_var[c] = (T::one() - mom) * running_var[c] + mom * unbiased;
    }
    (y, NormCache { xhat, inv_std })
}

pub struct NormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn norm_train_backward<T: Scalar>(dy: &Tensor<T>, gamma: &[T], cache: &NormCache<T>) -> NormGrads<T> {
    let (n, ch) = (dy.batch(), dy.channels());
    let m = T::of((n * dy.plane_len()) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for c in 0..ch {
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for b in 0..n {
            for (&g, &h) in dy.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                sdy += g;
                sdyx += g * h;
            }
        }
        dgamma[c] = sdyx;
        dbeta[c] = sdy;
        let k = gamma[c] * cache.inv_std[c] / m;
        for b in 0..n {
            let gs = dy.plane(b, c);
            let hs = cache.xhat.plane(b, c);
            for ((d, &g), &h) in dx.plane_mut(b, c).iter_mut().zip(gs).zip(hs) {
                *d = k * (m * g - sdy - h * sdyx);
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

pub fn norm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    want_params: bool,
) -> NormGrads<T> {
    let eps = T::of(NORM_EPS);
    let mut dx = dy.clone();
    let ch = dy.channels();
    let mut dgamma = vec![T::zero(); if want_params { ch } else { 0 }];
    let mut dbeta = vec![T::zero(); if want_params { ch } else { 0 }];
    for c in 0..ch {
        let istd = T::one() / (var[c] + eps).sqrt();
        for b in 0..dy.batch() {
            if want_params {
                for (&g, &v) in dy.plane(b, c).iter().zip(x.plane(b, c)) {
                    dgamma[c] += g * (v - mean[c]) * istd;
                    dbeta[c] += g;
                }
            }
            for d in dx.plane_mut(b, c) {
                *d *= gamma[c] * istd;
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = *v * sigmoid(*v);
    }
    y
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    }
    dx
}
