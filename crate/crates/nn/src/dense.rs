use rand::Rng;

use crate::gemm::sgemm;
use crate::{Activation, HasParams, NnError, Param, Result, Tensor};

/// Fully connected layer on `(N, in)` inputs. Weight layout `(out, in)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
    cache: Option<(Tensor, Tensor)>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
        Dense {
            weight: Param::normal(format!("{name}.weight"), &[outputs, inputs], (gain / inputs as f32).sqrt(), rng),
            bias: Param::zeros(format!("{name}.bias"), &[outputs]),
            activation,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (i, o) = (self.inputs(), self.outputs());
        if x.rank() != 2 || x.dim(1) != i {
            return Err(NnError::Shape {
                op: "dense",
                expected: vec![0, i],
                got: x.shape().to_vec(),
            });
        }
        let n = x.dim(0);
        let mut y = Tensor::zeros(&[n, o]);
        for b in 0..n {
            y.data_mut()[b * o..(b + 1) * o].copy_from_slice(&self.bias.value);
        }
        sgemm(n, i, o, x.data(), i, 1, &self.weight.value, 1, i, 1.0, y.data_mut(), o, 1);
        self.activation.apply(y.data_mut());
        self.cache = if train { Some((x.clone(), y.clone())) } else { None };
        Ok(y)
    }

    pub fn backward(&mut self, mut dy: Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let (x, y) = self.cache.take().ok_or_else(|| NnError::NoCache(self.weight.name.clone()))?;
        dy.expect_shape("dense backward", y.shape())?;
        self.activation.backward(dy.data_mut(), y.data());
        let (i, o, n) = (self.inputs(), self.outputs(), x.dim(0));
        if !self.weight.frozen {
            // dW (o × i) += dyᵀ·x
            sgemm(o, n, i, dy.data(), 1, o, x.data(), i, 1, 1.0, self.weight.grad_mut(), i, 1);
            let db = self.bias.grad_mut();
            for row in dy.data().chunks(o) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(&[n, i]);
        sgemm(n, o, i, dy.data(), o, 1, &self.weight.value, i, 1, 0.0, dx.data_mut(), i, 1);
        Ok(Some(dx))
    }
}

impl HasParams for Dense {
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

    #[test]
    fn affine_map_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new("d", 2, 3, Activation::Identity, &mut rng);
        d.weight.value = vec![1., 2., 3., 4., 5., 6.];
        d.bias.value = vec![0.5, 0., -1.];
        let x = Tensor::from_vec(&[1, 2], vec![1., -1.]).unwrap();
        let y = d.forward(&x, true).unwrap();
        assert_eq!(y.data(), &[-0.5, -1., -2.]);
        let dx = d.backward(Tensor::from_vec(&[1, 3], vec![1., 0., 2.]).unwrap(), true).unwrap().unwrap();
        assert_eq!(dx.data(), &[11., 14.]);
        assert_eq!(d.weight.grad, vec![1., -1., 0., 0., 2., -2.]);
        assert_eq!(d.bias.grad, vec![1., 0., 2.]);
    }
}
