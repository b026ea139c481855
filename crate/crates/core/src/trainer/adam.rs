use crate::armodel::ModelParams;

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> AdamState {
        AdamState::new(params.as_slice().len())
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam with decoupled weight decay applied before the
/// moment update. `weight_decay == 0` leaves the update untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grad: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    adam_step_slice(params.as_mut_slice(), grad.as_slice(), state, cfg);
}

pub fn adam_step_slice(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if cfg.weight_decay != 0.0 {
            *p -= cfg.learning_rate * cfg.weight_decay * *p;
        }
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
}
