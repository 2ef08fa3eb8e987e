use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First/second moment buffers, one pair per registered parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.values().iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// Bias-corrected Adam update of every parameter. `grads` holds one entry
/// per registered parameter, in registry order.
pub fn adam_step(params: &mut ParamStore, grads: &[Option<Vec<f64>>], state: &mut AdamState) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (name, value)) in params.iter().enumerate() {
        match &grads[i] {
            None => return Err(TrainError::MissingGradient(name.to_string())),
            Some(g) if g.len() != value.len() => {
                return Err(TrainError::InvalidConfig(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    value.len()
                )))
            }
            Some(_) => {}
        }
    }

    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, value) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].as_deref().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in value.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut s = AdamState::new(&p, AdamConfig { lr: 0.1, ..Default::default() });
        adam_step(&mut p, &[Some(vec![1.0])], &mut s).unwrap();
        let want = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - want).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_store(2.5);
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &[Some(vec![0.0])], &mut s).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data(), &[2.5]);
        assert_eq!(s.first_moment(0), &[0.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = scalar_store(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Some(vec![1.0])], &mut s).unwrap();
        let (m1, v1) = (s.first_moment(0)[0], s.second_moment(0)[0]);
        adam_step(&mut p, &[Some(vec![0.0])], &mut s).unwrap();
        assert_eq!(s.first_moment(0)[0], 0.9 * m1);
        assert_eq!(s.second_moment(0)[0], 0.999 * v1);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new(vec![3], vec![0.1, -7.25, 1e-300]).unwrap());
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig { lr: 0.0, ..Default::default() });
        for g in [0.5, -3.0, 1e6] {
            adam_step(&mut p, &[Some(vec![g; 3])], &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = scalar_store(0.0);
        p.insert("y", Tensor::scalar(1.0));
        let mut s = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &[Some(vec![1.0]), None], &mut s).unwrap_err();
        assert!(matches!(err, TrainError::MissingGradient(ref n) if n == "y"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = scalar_store(0.3);
            let mut s = AdamState::new(&p, AdamConfig::default());
            for k in 0..50 {
                let x = p.get("x").unwrap().data()[0];
                adam_step(&mut p, &[Some(vec![2.0 * x + (k as f64).sin()])], &mut s).unwrap();
            }
            p.get("x").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
