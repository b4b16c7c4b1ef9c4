//! Adam with coupled (L2-style) weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.005,
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.value.numel()).collect();
        Self {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One optimizer step over `params`, reading each parameter's grad buffer.
pub fn adam_step(params: Vec<&mut Parameter>, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::Config(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.first.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.value.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - cfg.beta1.powi(t);
    let correct2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.into_iter().zip(&mut state.first).zip(&mut state.second) {
        let grad = p.value.grad.take().expect("checked above");
        if m.len() != grad.len() {
            return Err(Error::ParamShape {
                name: p.name.clone(),
                expected: vec![m.len()],
                found: vec![grad.len()],
            });
        }
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g + cfg.weight_decay * *w;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / correct1;
            let v_hat = *v / correct2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.value.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(v: f64, g: Option<f64>) -> Parameter {
        let mut p = Parameter::new("w", Tensor::vector(vec![v]));
        p.value.grad = g.map(|g| vec![g]);
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = Parameter::new("w", Tensor::vector(vec![0.3, -1.2, 4.0]));
        p.value.grad = Some(vec![0.0; 3]);
        let before = p.value.data().to_vec();
        let mut s = AdamState::new([&p]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..5 {
            adam_step(vec![&mut p], &mut s, &cfg).unwrap();
        }
        assert_eq!(p.value.data(), before.as_slice());
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.0, Some(1.0));
        let mut s = AdamState::new([&p]);
        adam_step(vec![&mut p], &mut s, &AdamConfig::default()).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_steps_with_decay() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut p = param(2.0, Some(0.5));
        let mut s = AdamState::new([&p]);
        adam_step(vec![&mut p], &mut s, &cfg).unwrap();
        // g = 0.5 + 0.5·2 = 1.5; m̂ = 1.5, v̂ = 2.25 → step 0.1·1.5/(1.5+ε)
        let w1 = 2.0 - 0.1 * 1.5 / (1.5 + 1e-8);
        assert!((p.value.item() - w1).abs() < 1e-14);

        p.value.grad = Some(vec![-1.0]);
        adam_step(vec![&mut p], &mut s, &cfg).unwrap();
        let g2 = -1.0 + 0.5 * w1;
        let m = 0.9 * (0.1 * 1.5) + 0.1 * g2;
        let v = 0.999 * (0.001 * 2.25) + 0.001 * g2 * g2;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let w2 = w1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.value.item() - w2).abs() < 1e-14);
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut p = param(1.0, None);
        let mut s = AdamState::new([&p]);
        let err = adam_step(vec![&mut p], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "w"));
    }
}
