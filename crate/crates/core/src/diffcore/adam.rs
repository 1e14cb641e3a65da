use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let moments = params.iter().map(|(name, t)| (name.to_string(), (vec![0.0; t.len()], vec![0.0; t.len()]))).collect();
        Self { config, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients.
    /// Gradients are zeroed afterwards and the store's version bumped.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::ShapeMismatch { op: "adam_step", lhs: vec![params.len()], rhs: vec![self.moments.len()] });
        }
        for (name, t) in params.iter() {
            match self.moments.get(name) {
                Some((m, _)) if m.len() == t.len() => {}
                Some((m, _)) => return Err(Error::ShapeMismatch { op: "adam_step", lhs: t.shape().to_vec(), rhs: vec![m.len()] }),
                None => return Err(Error::UnknownParam(name.to_string())),
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            let (m, v) = self.moments.get_mut(name).expect("checked above");
            let grad = t.grad().to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            t.zero_grad();
        }
        params.bump_version();
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.step(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Tensor};

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.1));
        st.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.5]);
        assert_eq!(s.version(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr.
        let mut s = scalar_store(0.0);
        s.get_mut("w").unwrap().grad_mut()[0] = 1.0;
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.1));
        st.step(&mut s).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-8, "{w}");
        assert_eq!(s.get("w").unwrap().grad(), &[0.0]);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.1));
        for _ in 0..100 {
            let mut t = Tape::new();
            let w = t.param(&s, "w").unwrap();
            let d = t.add_scalar(w, -3.0);
            let loss = t.mul(d, d).unwrap();
            t.backward(loss, &mut s).unwrap();
            st.step(&mut s).unwrap();
        }
        let w = s.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.1, "{w}");
        assert_eq!(s.version(), 100);
    }

    #[test]
    fn shape_drift_rejected() {
        let s = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(vec![2]).unwrap()).unwrap();
        assert!(st.step(&mut other).is_err());
    }
}
