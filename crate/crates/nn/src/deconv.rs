use rand::Rng;

use crate::gemm::sgemm;
use crate::{Activation, HasParams, NnError, Param, Result, Tensor};

/// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
///
/// Weight layout is `(cin, cout, 2, 2)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
    cin: usize,
    cout: usize,
    cache: Option<(Tensor, Tensor)>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, activation: Activation, rng: &mut R) -> Self {
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        ConvTranspose2d {
            weight: Param::normal(format!("{name}.weight"), &[cin, cout, 2, 2], (gain / cin as f32).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            activation,
            cin,
            cout,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.cin {
            return Err(NnError::Shape {
                op: "conv_transpose2d",
                expected: vec![0, self.cin, 0, 0],
                got: x.shape().to_vec(),
            });
        }
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let hw = h * w;
        let m = self.cout * 4;
        let mut z = vec![0.0; m * hw];
        let mut y = Tensor::zeros(&[n, self.cout, 2 * h, 2 * w]);
        let ow = 2 * w;
        for b in 0..n {
            let xb = &x.data()[b * self.cin * hw..(b + 1) * self.cin * hw];
            // z = Wᵀ·x : (cout·4 × cin)·(cin × hw)
            sgemm(m, self.cin, hw, &self.weight.value, 1, m, xb, hw, 1, 0.0, &mut z, hw, 1);
            let yb = &mut y.data_mut()[b * self.cout * 4 * hw..(b + 1) * self.cout * 4 * hw];
            for co in 0..self.cout {
                let bias = self.bias.value[co];
                let plane = &mut yb[co * 4 * hw..(co + 1) * 4 * hw];
                for tap in 0..4 {
                    let (di, dj) = (tap / 2, tap % 2);
                    let zr = &z[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for i in 0..h {
                        for j in 0..w {
                            plane[(2 * i + di) * ow + 2 * j + dj] = zr[i * w + j] + bias;
                        }
                    }
                }
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
        dy.expect_shape("conv_transpose2d backward", y.shape())?;
        self.activation.backward(dy.data_mut(), y.data());
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let hw = h * w;
        let m = self.cout * 4;
        let ow = 2 * w;
        let want_dw = !self.weight.frozen;
        let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
        let mut dz = vec![0.0; m * hw];
        for b in 0..n {
            let dyb = &dy.data()[b * self.cout * 4 * hw..(b + 1) * self.cout * 4 * hw];
            for co in 0..self.cout {
                let plane = &dyb[co * 4 * hw..(co + 1) * 4 * hw];
                for tap in 0..4 {
                    let (di, dj) = (tap / 2, tap % 2);
                    let zr = &mut dz[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for i in 0..h {
                        for j in 0..w {
                            zr[i * w + j] = plane[(2 * i + di) * ow + 2 * j + dj];
                        }
                    }
                }
            }
            if want_dw {
                let xb = &x.data()[b * self.cin * hw..(b + 1) * self.cin * hw];
                // dW (cin × cout·4) += x·dzᵀ
                sgemm(self.cin, hw, m, xb, hw, 1, &dz, 1, hw, 1.0, self.weight.grad_mut(), m, 1);
                let db = self.bias.grad_mut();
                for (co, d) in db.iter_mut().enumerate() {
                    *d += dz[co * 4 * hw..(co + 1) * 4 * hw].iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[b * self.cin * hw..(b + 1) * self.cin * hw];
                sgemm(self.cin, m, hw, &self.weight.value, m, 1, &dz, hw, 1, 0.0, dxb, hw, 1);
            }
        }
        Ok(dx)
    }
}

impl HasParams for ConvTranspose2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
