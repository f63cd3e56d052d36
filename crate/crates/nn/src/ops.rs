use rand::Rng;

use crate::{NnError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, y: &mut [f32]) {
        if self == Activation::Relu {
            relu_inplace(y);
        }
    }

    /// Masks `dy` in place using the cached post-activation output.
    pub(crate) fn backward(self, dy: &mut [f32], y: &[f32]) {
        if self == Activation::Relu {
            relu_backward_inplace(dy, y);
        }
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu_backward_inplace(dy: &mut [f32], y: &[f32]) {
    for (d, &o) in dy.iter_mut().zip(y) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

fn channel_geometry(t: &Tensor) -> (usize, usize, usize) {
    let n = t.dim(0);
    let c = t.dim(1);
    let inner: usize = t.shape()[2..].iter().product();
    (n, c, inner)
}

/// Concatenates tensors along axis 1. All other axes must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| NnError::Format("concat of nothing".into()))?;
    let (n, _, inner) = channel_geometry(first);
    let mut total_c = 0;
    for p in parts {
        if p.rank() != first.rank() || p.dim(0) != n || p.shape()[2..] != first.shape()[2..] {
            return Err(NnError::Shape {
                op: "concat_channels",
                expected: first.shape().to_vec(),
                got: p.shape().to_vec(),
            });
        }
        total_c += p.dim(1);
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total_c;
    let mut out = Vec::with_capacity(n * total_c * inner);
    for b in 0..n {
        for p in parts {
            let c = p.dim(1);
            out.extend_from_slice(&p.data()[b * c * inner..(b + 1) * c * inner]);
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Inverse of [`concat_channels`].
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, inner) = channel_geometry(t);
    if sizes.iter().sum::<usize>() != c {
        return Err(NnError::Shape {
            op: "split_channels",
            expected: vec![sizes.iter().sum()],
            got: vec![c],
        });
    }
    let mut outs: Vec<Vec<f32>> = sizes.iter().map(|s| Vec::with_capacity(n * s * inner)).collect();
    for b in 0..n {
        let mut start = (b * c) * inner;
        for (o, &s) in outs.iter_mut().zip(sizes) {
            o.extend_from_slice(&t.data()[start..start + s * inner]);
            start += s * inner;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let mut shape = t.shape().to_vec();
            shape[1] = s;
            Tensor::from_vec(&shape, data)
        })
        .collect()
}

/// Stacks equally shaped `(N, C, H, W)` tensors into `(N, C, T, H, W)`.
pub fn stack_time(frames: &[&Tensor]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| NnError::Format("stack of nothing".into()))?;
    if first.rank() != 4 {
        return Err(NnError::Shape {
            op: "stack_time",
            expected: vec![0, 0, 0, 0],
            got: first.shape().to_vec(),
        });
    }
    for f in frames {
        f.expect_shape("stack_time", first.shape())?;
    }
    let (n, c, h, w) = (first.dim(0), first.dim(1), first.dim(2), first.dim(3));
    let t = frames.len();
    let hw = h * w;
    let mut out = vec![0.0; n * c * t * hw];
    for (ti, f) in frames.iter().enumerate() {
        for plane in 0..n * c {
            let dst = (plane * t + ti) * hw;
            out[dst..dst + hw].copy_from_slice(&f.data()[plane * hw..(plane + 1) * hw]);
        }
    }
    Tensor::from_vec(&[n, c, t, h, w], out)
}

/// Averages `(N, C, T, H, W)` over `T`.
pub fn mean_over_time(x: &Tensor) -> Tensor {
    let (n, c, t, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4));
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    let inv = 1.0 / t as f32;
    for plane in 0..n * c {
        let dst = &mut out[plane * hw..(plane + 1) * hw];
        for ti in 0..t {
            let src = &x.data()[(plane * t + ti) * hw..(plane * t + ti + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("consistent shape")
}

pub fn mean_over_time_backward(dy: &Tensor, t: usize) -> Tensor {
    let (n, c, h, w) = (dy.dim(0), dy.dim(1), dy.dim(2), dy.dim(3));
    let hw = h * w;
    let inv = 1.0 / t as f32;
    let mut out = vec![0.0; n * c * t * hw];
    for plane in 0..n * c {
        let src = &dy.data()[plane * hw..(plane + 1) * hw];
        for ti in 0..t {
            let dst = &mut out[(plane * t + ti) * hw..(plane * t + ti + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * inv;
            }
        }
    }
    Tensor::from_vec(&[n, c, t, h, w], out).expect("consistent shape")
}

/// Softmax over axis 1 of an `(N, C, ...)` tensor.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (n, c, inner) = channel_geometry(logits);
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * inner;
        for i in 0..inner {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[base + ch * inner + i]);
            }
            let mut s = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * inner + i] - m).exp();
                out[base + ch * inner + i] = e;
                s += e;
            }
            for ch in 0..c {
                out[base + ch * inner + i] /= s;
            }
        }
    }
    Tensor::from_vec(logits.shape(), out).expect("same shape")
}

/// Gradient with respect to the logits given softmax outputs and `dL/dp`.
pub fn softmax_channels_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let (n, c, inner) = channel_geometry(probs);
    let p = probs.data();
    let g = dprobs.data();
    let mut out = vec![0.0; p.len()];
    for b in 0..n {
        let base = b * c * inner;
        for i in 0..inner {
            let mut dot = 0.0;
            for ch in 0..c {
                let k = base + ch * inner + i;
                dot += p[k] * g[k];
            }
            for ch in 0..c {
                let k = base + ch * inner + i;
                out[k] = p[k] * (g[k] - dot);
            }
        }
    }
    Tensor::from_vec(probs.shape(), out).expect("same shape")
}

/// Inverted dropout; identity outside training.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f32,
    mask: Option<Vec<f32>>,
}

impl Dropout {
    pub fn new(rate: f32) -> Self {
        Dropout { rate, mask: None }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, mut x: Tensor, train: bool, rng: &mut R) -> Tensor {
        if !train || self.rate <= 0.0 {
            self.mask = None;
            return x;
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        for (v, m) in x.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        x
    }

    pub fn backward(&mut self, mut dy: Tensor) -> Tensor {
        if let Some(mask) = self.mask.take() {
            for (d, m) in dy.data_mut().iter_mut().zip(&mask) {
                *d *= m;
            }
        }
        dy
    }
}
