use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named trainable array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Empty until the first gradient is accumulated.
    pub grad: Vec<f32>,
    pub frozen: bool,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; shape.iter().product()],
            grad: Vec::new(),
            frozen: false,
        }
    }

    /// Zero-mean normal initialisation with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        rng: &mut R,
    ) -> Self {
        let mut p = Param::zeros(name, shape);
        let dist = Normal::new(0.0f32, std).expect("finite std");
        for v in p.value.iter_mut() {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Mutable gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor access to every parameter owned by a layer or network.
pub trait HasParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }
}
