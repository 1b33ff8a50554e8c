//! Bias-corrected ADAM.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Optimizer state: step count plus first/second moment buffers, one pair per
/// parameter tensor, aligned with the order in which parameters are visited.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub t: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(learning_rate: T, beta1: T, beta2: T, epsilon: T) -> Self {
        Self {
            t: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Moment buffers for parameter slot `i` (for inspection in tests).
    pub fn moments(&self, i: usize) -> (&[T], &[T]) {
        (&self.m[i], &self.v[i])
    }
}

/// One ADAM update over `params`, consuming each tensor's accumulated
/// gradient. Moment buffers are allocated on the first step and must keep
/// their shapes afterwards.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if state.t == 0 {
        state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer holds {} moment buffers but got {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let one = T::one();
    let b1 = state.beta1;
    let b2 = state.beta2;
    let t_i32 = state.t as i32;
    let bc1 = one - b1.powi(t_i32);
    let bc2 = one - b2.powi(t_i32);
    for (i, p) in params.iter_mut().enumerate() {
        if state.m[i].len() != p.len() {
            return Err(Error::Shape(format!(
                "parameter {} changed size: moments {} vs data {}",
                i,
                state.m[i].len(),
                p.len()
            )));
        }
        let grad = p
            .grad()
            .ok_or_else(|| Error::Shape(format!("parameter {i} has no gradient buffer")))?
            .to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] = data[j] - state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor<f64> {
        let mut t = Tensor::scalar(value).with_grad();
        t.grad_mut()[0] = grad;
        t
    }

    #[test]
    fn first_step_hand_evaluation() {
        // g=1.0, lr=1e-5, beta1=0.9, beta2=0.99, eps=1e-8:
        // m=0.1, v=0.01, m_hat=1, v_hat=1, update ~ 1e-5
        let mut p = scalar_param(0.0, 1.0);
        let mut state = AdamState::new(1e-5, 0.9, 0.99, 1e-8);
        adam_step(&mut [&mut p], &mut state).unwrap();
        let (m, v) = state.moments(0);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.01).abs() < 1e-15);
        assert_eq!(state.t, 1);
        let update = -p.data()[0];
        assert!((update - 1e-5).abs() < 1e-10, "update {update}");
    }

    #[test]
    fn first_step_update_is_lr_sized_for_any_gradient() {
        // bias correction makes m_hat / sqrt(v_hat) ~ sign(g) on step one
        for &g in &[1e-4, 0.5, 3.0, -250.0] {
            let mut p = scalar_param(1.0, g);
            let mut state = AdamState::new(1e-5, 0.9, 0.99, 1e-8);
            adam_step(&mut [&mut p], &mut state).unwrap();
            let update = (p.data()[0] - 1.0).abs();
            assert!(
                (update - 1e-5).abs() < 1e-8,
                "g={g}: |update|={update}"
            );
            assert_eq!((p.data()[0] - 1.0).signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = scalar_param(7.5, 0.0);
        let mut state = AdamState::new(1e-3, 0.9, 0.99, 1e-8);
        for step in 1..=3 {
            adam_step(&mut [&mut p], &mut state).unwrap();
            assert_eq!(state.t, step);
            assert_eq!(p.data()[0], 7.5);
        }
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut p = Tensor::from_vec(vec![2], vec![0.3f64, -0.7]).unwrap().with_grad();
            p.grad_mut().copy_from_slice(&[0.11, -0.04]);
            let mut state = AdamState::new(1e-3, 0.9, 0.99, 1e-8);
            for _ in 0..5 {
                adam_step(&mut [&mut p], &mut state).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar_param(0.0, 1.0);
        let mut state = AdamState::new(1e-3, 0.9, 0.99, 1e-8);
        adam_step(&mut [&mut p], &mut state).unwrap();
        let mut q = scalar_param(0.0, 1.0);
        assert!(adam_step(&mut [&mut p, &mut q], &mut state).is_err());
    }
}
