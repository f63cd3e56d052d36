use rand::Rng;

use crate::gemm::sgemm;
use crate::im2col::{col2im, im2col};
use crate::{Activation, Conv2d, HasParams, NnError, Param, Result, Tensor};

/// Replicates a `(cout, cin, k, k)` filter bank `depth` times along a new
/// temporal axis and divides by `depth`, giving `(cout, cin, depth, k, k)`.
///
/// A temporally constant input then produces the same response as the
/// original 2D filters.
pub fn inflate_kernel(w2d: &[f32], cout: usize, cin: usize, k: usize, depth: usize) -> Result<Vec<f32>> {
    if depth == 0 || w2d.len() != cout * cin * k * k {
        return Err(NnError::Shape {
            op: "inflate_kernel",
            expected: vec![cout, cin, k, k],
            got: vec![w2d.len(), depth],
        });
    }
    let kk = k * k;
    let d = depth as f32;
    let mut out = Vec::with_capacity(w2d.len() * depth);
    for filt in w2d.chunks(kk) {
        for _ in 0..depth {
            out.extend(filt.iter().map(|v| v / d));
        }
    }
    Ok(out)
}

/// 3D convolution over `(N, C, T, H, W)` with kernel `(kt, k, k)`.
///
/// Spatial borders are zero padded; the temporal border replicates the edge
/// frames, so a temporally constant input stays constant through the layer.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
    cin: usize,
    cout: usize,
    kt: usize,
    k: usize,
    cache: Option<(Tensor, Tensor)>,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kt: usize,
        k: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(k % 2 == 1 && kt % 2 == 1, "kernel extents must be odd");
        let fan_in = (cin * kt * k * k) as f32;
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        Conv3d {
            weight: Param::normal(format!("{name}.weight"), &[cout, cin, kt, k, k], (gain / fan_in).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            activation,
            cin,
            cout,
            kt,
            k,
            cache: None,
        }
    }

    /// Builds the inflated counterpart of a 2D convolution.
    pub fn inflated_from(conv: &Conv2d, kt: usize) -> Result<Self> {
        let (cout, cin, k) = (conv.out_channels(), conv.in_channels(), conv.kernel_size());
        let name = conv.weight.name.trim_end_matches(".weight").to_string();
        let mut weight = Param::zeros(format!("{name}.weight"), &[cout, cin, kt, k, k]);
        weight.value = inflate_kernel(&conv.weight.value, cout, cin, k, kt)?;
        let mut bias = conv.bias.clone();
        bias.grad.clear();
        weight.frozen = conv.weight.frozen;
        Ok(Conv3d {
            weight,
            bias,
            activation: conv.activation,
            cin,
            cout,
            kt,
            k,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn temporal_extent(&self) -> usize {
        self.kt
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.weight.frozen
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn frame_planes(&self, b: usize, t: usize, frames: usize, hw: usize) -> Vec<usize> {
        let pt = (self.kt / 2) as isize;
        let mut planes = Vec::with_capacity(self.cin * self.kt);
        for ci in 0..self.cin {
            for dt in 0..self.kt {
                let src = (t as isize + dt as isize - pt).clamp(0, frames as isize - 1) as usize;
                planes.push(((b * self.cin + ci) * frames + src) * hw);
            }
        }
        planes
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        if x.rank() != 5 || x.dim(1) != self.cin {
            return Err(NnError::Shape {
                op: "conv3d",
                expected: vec![0, self.cin, 0, 0, 0],
                got: x.shape().to_vec(),
            });
        }
        let (n, frames, h, w) = (x.dim(0), x.dim(2), x.dim(3), x.dim(4));
        let hw = h * w;
        let kk = self.cin * self.kt * self.k * self.k;
        let mut y = Tensor::zeros(&[n, self.cout, frames, h, w]);
        let mut col = vec![0.0; kk * hw];
        for b in 0..n {
            for t in 0..frames {
                let planes = self.frame_planes(b, t, frames, hw);
                im2col(x.data(), &planes, h, w, self.k, &mut col);
                let off = (b * self.cout * frames + t) * hw;
                let out = &mut y.data_mut()[off..];
                sgemm(self.cout, kk, hw, &self.weight.value, kk, 1, &col, hw, 1, 0.0, out, frames * hw, 1);
            }
            for co in 0..self.cout {
                let bias = self.bias.value[co];
                let off = (b * self.cout + co) * frames * hw;
                y.data_mut()[off..off + frames * hw].iter_mut().for_each(|v| *v += bias);
            }
        }
        self.activation.apply(y.data_mut());
        self.cache = if train { Some((x.clone(), y.clone())) } else { None };
        Ok(y)
    }

    pub fn backward(&mut self, mut dy: Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let (x, y) = self
            .cache
            .take()
            .ok_or_else(|| NnError::NoCache(self.weight.name.clone()))?;
        dy.expect_shape("conv3d backward", y.shape())?;
        self.activation.backward(dy.data_mut(), y.data());
        let (n, frames, h, w) = (x.dim(0), x.dim(2), x.dim(3), x.dim(4));
        let hw = h * w;
        let kk = self.cin * self.kt * self.k * self.k;
        let want_dw = !self.weight.frozen;
        let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
        if !want_dw && dx.is_none() {
            return Ok(None);
        }
        let mut col = vec![0.0; kk * hw];
        let mut dcol = vec![0.0; kk * hw];
        for b in 0..n {
            for t in 0..frames {
                let planes = self.frame_planes(b, t, frames, hw);
                let off = (b * self.cout * frames + t) * hw;
                let dyb = &dy.data()[off..];
                if want_dw {
                    im2col(x.data(), &planes, h, w, self.k, &mut col);
                    sgemm(self.cout, hw, kk, dyb, frames * hw, 1, &col, 1, hw, 1.0, self.weight.grad_mut(), kk, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    sgemm(kk, self.cout, hw, &self.weight.value, 1, kk, dyb, frames * hw, 1, 0.0, &mut dcol, hw, 1);
                    col2im(&dcol, &planes, h, w, self.k, dx.data_mut());
                }
            }
            if want_dw {
                let db = self.bias.grad_mut();
                for (co, d) in db.iter_mut().enumerate() {
                    let off = (b * self.cout + co) * frames * hw;
                    *d += dy.data()[off..off + frames * hw].iter().sum::<f32>();
                }
            }
        }
        Ok(dx)
    }
}

impl HasParams for Conv3d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
