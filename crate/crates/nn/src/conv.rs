use rand::Rng;

use crate::gemm::sgemm;
use crate::im2col::{col2im, im2col};
use crate::{Activation, HasParams, NnError, Param, Result, Tensor};

/// Stride-1 2D convolution with "same" zero padding and an odd square kernel.
///
/// Weight layout is `(cout, cin, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
    cin: usize,
    cout: usize,
    k: usize,
    cache: Option<(Tensor, Tensor)>,
}

impl Conv2d {
    /// He-normal weights (unit-gain normal for identity activations), zero bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = (cin * k * k) as f32;
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        Conv2d {
            weight: Param::normal(format!("{name}.weight"), &[cout, cin, k, k], (gain / fan_in).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            activation,
            cin,
            cout,
            k,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
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

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.dim(1) != self.cin {
            return Err(NnError::Shape {
                op: "conv2d",
                expected: vec![0, self.cin, 0, 0],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let mut y = Tensor::zeros(&[n, self.cout, h, w]);
        let mut col = if self.k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        let planes: Vec<usize> = (0..self.cin).map(|c| c * hw).collect();
        for b in 0..n {
            let xb = &x.data()[b * self.cin * hw..(b + 1) * self.cin * hw];
            let src: &[f32] = if self.k == 1 {
                xb
            } else {
                im2col(xb, &planes, h, w, self.k, &mut col);
                &col
            };
            let yb = &mut y.data_mut()[b * self.cout * hw..(b + 1) * self.cout * hw];
            sgemm(self.cout, kk, hw, &self.weight.value, kk, 1, src, hw, 1, 0.0, yb, hw, 1);
            for (co, row) in yb.chunks_mut(hw).enumerate() {
                let bias = self.bias.value[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        self.activation.apply(y.data_mut());
        self.cache = if train { Some((x.clone(), y.clone())) } else { None };
        Ok(y)
    }

    /// Accumulates parameter gradients (unless frozen) and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(&mut self, mut dy: Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let (x, y) = self
            .cache
            .take()
            .ok_or_else(|| NnError::NoCache(self.weight.name.clone()))?;
        dy.expect_shape("conv2d backward", y.shape())?;
        self.activation.backward(dy.data_mut(), y.data());
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let want_dw = !self.weight.frozen;
        let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
        if !want_dw && dx.is_none() {
            return Ok(None);
        }
        let planes: Vec<usize> = (0..self.cin).map(|c| c * hw).collect();
        let mut col = if self.k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
        // Input gradient route: for narrow outputs it is cheaper to correlate
        // dY with the spatially flipped kernel than to scatter a full patch
        // matrix back through col2im.
        let via_dy = self.k > 1 && self.cout < self.cin;
        let flipped = if via_dy && dx.is_some() { self.flipped_kernel() } else { Vec::new() };
        let out_planes: Vec<usize> = (0..self.cout).map(|c| c * hw).collect();
        let mut dcol = match (&dx, self.k, via_dy) {
            (None, _, _) | (_, 1, _) => Vec::new(),
            (_, _, true) => vec![0.0; self.cout * self.k * self.k * hw],
            _ => vec![0.0; kk * hw],
        };
        for b in 0..n {
            let dyb = &dy.data()[b * self.cout * hw..(b + 1) * self.cout * hw];
            if want_dw {
                let xb = &x.data()[b * self.cin * hw..(b + 1) * self.cin * hw];
                let src: &[f32] = if self.k == 1 {
                    xb
                } else {
                    im2col(xb, &planes, h, w, self.k, &mut col);
                    &col
                };
                sgemm(self.cout, hw, kk, dyb, hw, 1, src, 1, hw, 1.0, self.weight.grad_mut(), kk, 1);
                let db = self.bias.grad_mut();
                for (co, row) in dyb.chunks(hw).enumerate() {
                    db[co] += row.iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[b * self.cin * hw..(b + 1) * self.cin * hw];
                if self.k == 1 {
                    sgemm(kk, self.cout, hw, &self.weight.value, 1, kk, dyb, hw, 1, 0.0, dxb, hw, 1);
                } else if via_dy {
                    let kf = self.cout * self.k * self.k;
                    im2col(dyb, &out_planes, h, w, self.k, &mut dcol);
                    sgemm(self.cin, kf, hw, &flipped, kf, 1, &dcol, hw, 1, 0.0, dxb, hw, 1);
                } else {
                    sgemm(kk, self.cout, hw, &self.weight.value, 1, kk, dyb, hw, 1, 0.0, &mut dcol, hw, 1);
                    col2im(&dcol, &planes, h, w, self.k, dxb);
                }
            }
        }
        Ok(dx)
    }
}

impl Conv2d {
    /// `(cin, cout, k, k)` kernel rotated by 180° spatially.
    fn flipped_kernel(&self) -> Vec<f32> {
        let (cin, cout, k) = (self.cin, self.cout, self.k);
        let mut out = vec![0.0; cin * cout * k * k];
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        out[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            self.weight.value[((co * cin + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        out
    }
}

impl HasParams for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor, wt: &[f32], bias: &[f32], cout: usize, k: usize) -> Tensor {
        let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros(&[n, cout, h, w]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut s = bias[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad;
                                    let ix = ox as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                                    s += (xv * wv) as f64;
                                }
                            }
                        }
                        y.data_mut()[((b * cout + co) * h + oy) * w + ox] = s as f32;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &k in &[1usize, 3, 5] {
            let mut conv = Conv2d::new("c", 3, 4, k, Activation::Identity, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(&[2, 3, 5, 6], &mut rng);
            let y = conv.forward(&x, false).unwrap();
            let r = naive_conv(&x, &conv.weight.value, &conv.bias.value, 4, k);
            assert!(y.max_abs_diff(&r) < 1e-5, "k={k}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new("c", 2, 3, 3, Activation::Identity, &mut rng);
        let x = random_tensor(&[2, 2, 4, 4], &mut rng);
        let r = random_tensor(&[2, 3, 4, 4], &mut rng);
        // L = <conv(x), r> is linear, so central differences are exact up to rounding.
        let loss = |c: &mut Conv2d, x: &Tensor| -> f64 {
            let y = c.forward(x, false).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        conv.forward(&x, true).unwrap();
        let dx = conv.backward(r.clone(), true).unwrap().unwrap();
        let h = 1e-2;
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data()[i] as f64).abs() < 1e-3, "dx[{i}]");
        }
        let grads = conv.weight.grad.clone();
        for i in (0..grads.len()).step_by(4) {
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight.value[i] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight.value[i] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!((fd - grads[i] as f64).abs() < 1e-3, "dw[{i}]");
        }
        let db: f64 = r.data()[..16].iter().chain(&r.data()[48..64]).map(|v| *v as f64).sum();
        assert!((db - conv.bias.grad[0] as f64).abs() < 1e-4);
    }

    #[test]
    fn both_input_gradient_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut narrow = Conv2d::new("n", 5, 2, 3, Activation::Identity, &mut rng);
        let x = random_tensor(&[2, 5, 6, 7], &mut rng);
        let r = random_tensor(&[2, 2, 6, 7], &mut rng);
        narrow.forward(&x, true).unwrap();
        let dx = narrow.backward(r.clone(), true).unwrap().unwrap();
        // adjoint identity: <conv(e_i), r> summed against x gives <x, dx>
        let y = narrow.forward(&x, false).unwrap();
        let mut no_bias = y.clone();
        for b in 0..2 {
            for co in 0..2 {
                let bias = narrow.bias.value[co];
                no_bias.data_mut()[(b * 2 + co) * 42..(b * 2 + co + 1) * 42].iter_mut().for_each(|v| *v -= bias);
            }
        }
        let lhs: f64 = no_bias.data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn frozen_layer_leaves_gradients_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::new("c", 1, 2, 3, Activation::Relu, &mut rng);
        conv.set_frozen(true);
        let x = random_tensor(&[1, 1, 4, 4], &mut rng);
        let y = conv.forward(&x, true).unwrap();
        let out = conv.backward(Tensor::full(y.shape(), 1.0), false).unwrap();
        assert!(out.is_none());
        assert!(conv.weight.grad.is_empty());
    }
}
