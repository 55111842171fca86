use super::{Param, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected ADAM update of every parameter from its gradient.
pub fn adam_step<T: Real>(params: &mut [&mut Param<T>], state: &mut AdamState, lr: f64) {
    if state.m.len() != params.len() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for (((x, g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.as_f64();
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x = T::of_f64(x.as_f64() - lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON));
        }
    }
}

/// ADAM optimizer with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            state: AdamState::new(),
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [&mut Param<T>]) {
        adam_step(params, &mut self.state, self.lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = Param::<f64>::new("x", vec![3], vec![1.0, -2.0, 0.5]);
        let mut s = AdamState::new();
        for _ in 0..10 {
            adam_step(&mut [&mut p], &mut s, 0.1);
        }
        assert_eq!(p.value, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_lr_sign() {
        let mut p = Param::<f64>::new("x", vec![3], vec![0.0; 3]);
        p.grad = vec![3.0, -0.01, 250.0];
        let mut s = AdamState::new();
        adam_step(&mut [&mut p], &mut s, 1e-3);
        // m_hat = g and v_hat = g^2 after correction, so the step is lr * g / (|g| + eps)
        for (x, g) in p.value.iter().zip([3.0f64, -0.01, 250.0]) {
            let want = -1e-3 * g / (g.abs() + ADAM_EPSILON);
            assert!((x - want).abs() < 1e-15);
        }
    }
}
