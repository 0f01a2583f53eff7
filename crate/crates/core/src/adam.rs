//! Adam with optional decoupled weight decay (AdamW).
//!
//! Parameters are registered as flat slices ("slots"); each slot keeps its own
//! first and second moment buffers. Decay is applied per slot so biases can be
//! left undecayed.

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, slot_sizes: &[usize]) -> Self {
        Self {
            config,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Advances the shared step counter. Call once per optimizer step, before
    /// updating the slots.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], decay: bool) {
        debug_assert!(self.t > 0, "begin_step not called");
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let shrink = if decay { 1.0 - lr * weight_decay } else { 1.0 };
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(params.len(), m.len());
        assert_eq!(grads.len(), m.len());
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] = params[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
