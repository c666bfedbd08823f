//! Layer zoo with exact per-sample forward and backward passes.
//!
//! Activations of one sample are flat buffers with a `(C, H, W)` shape;
//! dense layers use `(N, 1, 1)`.

use crate::error::{Error, Result};
use crate::tensor::Real;

pub type Shape = [usize; 3];

fn numel(s: Shape) -> usize {
    s[0] * s[1] * s[2]
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out, in, 3, 3)`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `(outputs, inputs)`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv3x3(Conv3x3<T>),
    Relu,
    AvgPool2,
    Flatten,
    Dense(Dense<T>),
}

/// Valid output range for a shift of `d ∈ {-1, 0, 1}` along an axis of
/// length `n`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

impl<T: Real> Conv3x3<T> {
    pub fn forward(&self, x: &[T], shape: Shape) -> Vec<T> {
        let [_, h, w] = shape;
        let plane = h * w;
        let mut out = vec![T::zero(); self.out_channels * plane];
        for o in 0..self.out_channels {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = &x[i * plane..(i + 1) * plane];
                let kernel = &self.weight[(o * self.in_channels + i) * 9..][..9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let k = kernel[ky * 3 + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            let d = &mut dst[y * w + x0..y * w + x1];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv += k * sv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the input gradient, accumulating parameter gradients into
    /// `grads` (`weight` then `bias`) when given.
    pub fn backward(&self, x: &[T], shape: Shape, g: &[T], grads: Option<(&mut [T], &mut [T])>) -> Vec<T> {
        let [_, h, w] = shape;
        let plane = h * w;
        let mut gin = vec![T::zero(); self.in_channels * plane];
        for o in 0..self.out_channels {
            let go = &g[o * plane..(o + 1) * plane];
            for i in 0..self.in_channels {
                let kernel = &self.weight[(o * self.in_channels + i) * 9..][..9];
                let gi = &mut gin[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let k = kernel[ky * 3 + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let d = &mut gi[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            let s = &go[y * w + x0..y * w + x1];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv += k * sv;
                            }
                        }
                    }
                }
            }
        }
        if let Some((gw, gb)) = grads {
            for o in 0..self.out_channels {
                let go = &g[o * plane..(o + 1) * plane];
                gb[o] += go.iter().copied().sum::<T>();
                for i in 0..self.in_channels {
                    let src = &x[i * plane..(i + 1) * plane];
                    let gk = &mut gw[(o * self.in_channels + i) * 9..][..9];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (y0, y1) = span(dy, h);
                        for kx in 0..3 {
                            let dx = kx as isize - 1;
                            let (x0, x1) = span(dx, w);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                                let gg = &go[y * w + x0..y * w + x1];
                                acc += s.iter().zip(gg).map(|(&a, &b)| a * b).sum::<T>();
                            }
                            gk[ky * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
        gin
    }
}

impl<T: Real> Dense<T> {
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[T], g: &[T], grads: Option<(&mut [T], &mut [T])>) -> Vec<T> {
        let mut gin = vec![T::zero(); self.inputs];
        for (o, &go) in g.iter().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (gi, &wv) in gin.iter_mut().zip(row) {
                *gi += wv * go;
            }
        }
        if let Some((gw, gb)) = grads {
            for (o, &go) in g.iter().enumerate() {
                gb[o] += go;
                let row = &mut gw[o * self.inputs..(o + 1) * self.inputs];
                for (r, &xv) in row.iter_mut().zip(x) {
                    *r += go * xv;
                }
            }
        }
        gin
    }
}

pub fn relu_forward<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Subgradient at zero is taken as zero.
pub fn relu_backward<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
        .collect()
}

pub fn avgpool2_forward<T: Real>(x: &[T], shape: Shape) -> Vec<T> {
    let [c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                out[ch * oh * ow + y * ow + xx] = (a + b + cc + d) * quarter;
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Real>(shape: Shape, g: &[T]) -> Vec<T> {
    let [c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut gin = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[ch * oh * ow + y * ow + xx] * quarter;
                let base = ch * h * w;
                gin[base + 2 * y * w + 2 * xx] = v;
                gin[base + 2 * y * w + 2 * xx + 1] = v;
                gin[base + (2 * y + 1) * w + 2 * xx] = v;
                gin[base + (2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    gin
}

/// Mean-free per-sample cross-entropy `logsumexp(z) − z_y` and its gradient
/// `softmax(z) − onehot(y)`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= T::one();
    (loss, grad)
}

impl<T: Real> Layer<T> {
    pub fn output_shape(&self, shape: Shape) -> Result<Shape> {
        match self {
            Layer::Conv3x3(c) => {
                if shape[0] != c.in_channels {
                    return Err(Error::shape(format!(
                        "conv expects {} input channels, got {}",
                        c.in_channels, shape[0]
                    )));
                }
                Ok([c.out_channels, shape[1], shape[2]])
            }
            Layer::Relu => Ok(shape),
            Layer::AvgPool2 => {
                if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                    return Err(Error::shape(format!("avgpool2 needs even dims, got {shape:?}")));
                }
                Ok([shape[0], shape[1] / 2, shape[2] / 2])
            }
            Layer::Flatten => Ok([numel(shape), 1, 1]),
            Layer::Dense(d) => {
                if numel(shape) != d.inputs || shape[1] != 1 || shape[2] != 1 {
                    return Err(Error::shape(format!(
                        "dense expects a flat input of {}, got {shape:?}",
                        d.inputs
                    )));
                }
                Ok([d.outputs, 1, 1])
            }
        }
    }

    pub fn forward(&self, x: &[T], shape: Shape) -> Vec<T> {
        match self {
            Layer::Conv3x3(c) => c.forward(x, shape),
            Layer::Relu => relu_forward(x),
            Layer::AvgPool2 => avgpool2_forward(x, shape),
            Layer::Flatten => x.to_vec(),
            Layer::Dense(d) => d.forward(x),
        }
    }

    pub fn backward(&self, x: &[T], shape: Shape, g: &[T], grads: Option<(&mut [T], &mut [T])>) -> Vec<T> {
        match self {
            Layer::Conv3x3(c) => c.backward(x, shape, g, grads),
            Layer::Relu => relu_backward(x, g),
            Layer::AvgPool2 => avgpool2_backward(shape, g),
            Layer::Flatten => g.to_vec(),
            Layer::Dense(d) => d.backward(x, g, grads),
        }
    }

    /// Mutable views of `(weight, bias)` for parametric layers.
    pub fn params_mut(&mut self) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        match self {
            Layer::Conv3x3(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&Vec<T>, &Vec<T>)> {
        match self {
            Layer::Conv3x3(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&a| U::lit(a.as_f64())).collect();
        match self {
            Layer::Conv3x3(c) => Layer::Conv3x3(Conv3x3 {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                weight: conv(&c.weight),
                bias: conv(&c.bias),
            }),
            Layer::Relu => Layer::Relu,
            Layer::AvgPool2 => Layer::AvgPool2,
            Layer::Flatten => Layer::Flatten,
            Layer::Dense(d) => Layer::Dense(Dense {
                inputs: d.inputs,
                outputs: d.outputs,
                weight: conv(&d.weight),
                bias: conv(&d.bias),
            }),
        }
    }
}
