//! Layers with hand-written backward passes.

use rand::Rng;

use super::{matmul, MatRef, Param, Scalar, Tensor3};
use crate::geometry::PixelLocation;

/// 3×3 convolution with zero padding of one pixel.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// im2col buffer kept from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<S> {
    cols: Vec<S>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * 9;
        Self {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, 3, 3],
                fan_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &Tensor3<S>, out_h: usize, out_w: usize) -> Vec<S> {
        let p = out_h * out_w;
        let mut cols = vec![S::zero(); self.in_channels * 9 * p];
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..out_h {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * out_w..][..out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[S], cache: &ConvCache<S>) -> Tensor3<S> {
        let (out_h, out_w) = (cache.out_h, cache.out_w);
        let p = out_h * out_w;
        let mut dx = Tensor3::zeros(self.in_channels, cache.in_h, cache.in_w);
        let plane_len = cache.in_h * cache.in_w;
        for ci in 0..self.in_channels {
            let plane = &mut dx.data[ci * plane_len..][..plane_len];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..out_h {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= cache.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * cache.in_w..][..cache.in_w];
                        for (ox, &g) in row[oy * out_w..][..out_w].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < cache.in_w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor3<S>) -> (Tensor3<S>, ConvCache<S>) {
        assert_eq!(x.c, self.in_channels, "{}: input channels", self.weight.name);
        let (out_h, out_w) = self.output_size(x.h, x.w);
        let p = out_h * out_w;
        let cols = self.im2col(x, out_h, out_w);
        let mut out = Vec::with_capacity(self.out_channels * p);
        for &b in &self.bias.value {
            out.extend(std::iter::repeat_n(b, p));
        }
        matmul(
            MatRef::new(&self.weight.value, self.out_channels, self.in_channels * 9),
            MatRef::new(&cols, self.in_channels * 9, p),
            &mut out,
            S::one(),
        );
        let cache = ConvCache {
            cols,
            in_h: x.h,
            in_w: x.w,
            out_h,
            out_w,
        };
        (Tensor3::from_vec(self.out_channels, out_h, out_w, out), cache)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        cache: &ConvCache<S>,
        grad_out: &Tensor3<S>,
        input_grad: bool,
    ) -> Option<Tensor3<S>> {
        let p = cache.out_h * cache.out_w;
        let k = self.in_channels * 9;
        assert_eq!(grad_out.data.len(), self.out_channels * p);
        let dy = MatRef::new(&grad_out.data, self.out_channels, p);
        matmul(dy, MatRef::new(&cache.cols, k, p).t(), &mut self.weight.grad, S::one());
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += grad_out.data[o * p..(o + 1) * p].iter().copied().sum::<S>();
        }
        if !input_grad {
            return None;
        }
        let mut dcols = vec![S::zero(); k * p];
        matmul(
            MatRef::new(&self.weight.value, self.out_channels, k).t(),
            dy,
            &mut dcols,
            S::zero(),
        );
        Some(self.col2im(&dcols, cache))
    }
}

/// Fully connected layer on row-major `n × in` batches.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                &[out_features, in_features],
                in_features,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &[S], n: usize) -> Vec<S> {
        assert_eq!(x.len(), n * self.in_features, "{}: input size", self.weight.name);
        let mut out = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        matmul(
            MatRef::new(x, n, self.in_features),
            MatRef::new(&self.weight.value, self.out_features, self.in_features).t(),
            &mut out,
            S::one(),
        );
        out
    }

    pub fn backward(&mut self, x: &[S], grad_out: &[S], n: usize, input_grad: bool) -> Option<Vec<S>> {
        let dy = MatRef::new(grad_out, n, self.out_features);
        matmul(dy.t(), MatRef::new(x, n, self.in_features), &mut self.weight.grad, S::one());
        for row in grad_out.chunks_exact(self.out_features) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !input_grad {
            return None;
        }
        let mut dx = vec![S::zero(); n * self.in_features];
        matmul(
            dy,
            MatRef::new(&self.weight.value, self.out_features, self.in_features),
            &mut dx,
            S::zero(),
        );
        Some(dx)
    }
}

#[inline]
pub fn elu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_in_place<S: Scalar>(xs: &mut [S]) {
    xs.iter_mut().for_each(|x| *x = elu(*x));
}

/// Chain rule through ELU given its outputs: `dy/dx = 1` for `y > 0`, `y + 1` otherwise.
pub fn elu_backward<S: Scalar>(outputs: &[S], grad: &mut [S]) {
    for (g, &y) in grad.iter_mut().zip(outputs) {
        if y <= S::zero() {
            *g *= y + S::one();
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Bilinear taps into a `h × w` plane for a full-resolution pixel location,
/// with the location mapped through the map's stride and clamped to the
/// border.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps<S> {
    pub index: [usize; 4],
    pub weight: [S; 4],
}

impl<S: Scalar> Taps<S> {
    pub fn at(p: PixelLocation, stride: usize, h: usize, w: usize) -> Self {
        let s = stride as f64;
        let x = ((p.u + 0.5) / s - 0.5).clamp(0.0, (w - 1) as f64);
        let y = ((p.v + 0.5) / s - 0.5).clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let tx = x - x0 as f64;
        let ty = y - y0 as f64;
        Self {
            index: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weight: [
                S::lit((1.0 - tx) * (1.0 - ty)),
                S::lit(tx * (1.0 - ty)),
                S::lit((1.0 - tx) * ty),
                S::lit(tx * ty),
            ],
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[S]) -> S {
        (0..4).map(|i| plane[self.index[i]] * self.weight[i]).sum()
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [S], g: S) {
        for i in 0..4 {
            plane[self.index[i]] += g * self.weight[i];
        }
    }
}

/// Writes all channels of `fm` at `taps` into `out[offset..offset + c]`.
pub fn gather_channels<S: Scalar>(fm: &Tensor3<S>, taps: &Taps<S>, out: &mut [S]) {
    let n = fm.h * fm.w;
    for (ch, o) in out.iter_mut().enumerate().take(fm.c) {
        *o = taps.sample(&fm.data[ch * n..(ch + 1) * n]);
    }
}

pub fn scatter_channels<S: Scalar>(grad_fm: &mut Tensor3<S>, taps: &Taps<S>, grad: &[S]) {
    let n = grad_fm.h * grad_fm.w;
    for (ch, &g) in grad.iter().enumerate().take(grad_fm.c) {
        taps.scatter(&mut grad_fm.data[ch * n..(ch + 1) * n], g);
    }
}
