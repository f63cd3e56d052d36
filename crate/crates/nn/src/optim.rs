use std::collections::BTreeMap;

use crate::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u32,
}

/// Adam with per-parameter moment state keyed by parameter name.
///
/// State for a parameter is created on its first trainable update, so a
/// parameter that becomes trainable mid-run starts from zero moments and its
/// own bias-correction clock.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    /// Applies one update to `p` from its accumulated gradient and clears the
    /// gradient. Frozen parameters and parameters without a gradient are
    /// skipped.
    pub fn step(&mut self, p: &mut Param) {
        if p.frozen || p.grad.is_empty() {
            p.zero_grad();
            return;
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; p.value.len()],
            v: vec![0.0; p.value.len()],
            steps: 0,
        });
        st.steps += 1;
        let c1 = 1.0 - beta1.powi(st.steps as i32);
        let c2 = 1.0 - beta2.powi(st.steps as i32);
        for (((w, g), m), v) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(&mut st.m).zip(&mut st.v) {
            *m = beta1 * *m + (1.0 - beta1) * *g;
            *v = beta2 * *v + (1.0 - beta2) * *g * *g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= learning_rate * mh / (vh.sqrt() + epsilon);
            *g = 0.0;
        }
    }
}
