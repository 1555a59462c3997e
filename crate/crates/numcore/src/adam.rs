use crate::error::{shape_err, Result};
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moment estimates for one flat parameter buffer.
#[derive(Clone, Debug, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), Moments::default());
        }
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let param = store.get_mut(id).data_mut();
            let mom = &mut self.moments[id.index()];
            if mom.m.is_empty() {
                mom.m = vec![0.0; param.len()];
                mom.v = vec![0.0; param.len()];
            }
            adam_update(param, g, mom, &self.config, self.step)?;
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `params` in place at step `t` (1-based).
pub fn adam_update(params: &mut [f64], grads: &[f64], mom: &mut Moments, cfg: &AdamConfig, t: u64) -> Result<()> {
    if params.len() != grads.len() || mom.m.len() != params.len() || mom.v.len() != params.len() {
        return shape_err("adam", &[params.len()], &[grads.len()]);
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = mom.m[i] / bc1;
        let vh = mom.v[i] / bc2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.3, -1.2];
        let mut mom = Moments {
            m: vec![0.0; 2],
            v: vec![0.0; 2],
        };
        let cfg = AdamConfig::default();
        for t in 1..=5 {
            adam_update(&mut p, &[0.0, 0.0], &mut mom, &cfg, t).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0];
        let mut mom = Moments {
            m: vec![0.0],
            v: vec![0.0],
        };
        adam_update(&mut p, &[1.0], &mut mom, &AdamConfig::with_lr(1e-3), 1).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamState::new(AdamConfig::with_lr(0.1));
        for _ in 0..100 {
            let mut tape = Tape::new();
            let x = tape.param(&store, w);
            let loss = tape.sum_squares(x);
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, &tape.param_grads(&g)).unwrap();
        }
        assert!(store.get(w).item().abs() < 0.1, "{}", store.get(w).item());
        assert_eq!(opt.step, 100);
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = vec![0.0; 3];
        let mut mom = Moments {
            m: vec![0.0; 3],
            v: vec![0.0; 3],
        };
        assert!(adam_update(&mut p, &[1.0], &mut mom, &AdamConfig::default(), 1).is_err());
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("enc.w", Tensor::scalar(1.0)).unwrap();
        store.set_trainable("enc.", false);
        let mut grads = ParamGrads::new();
        grads.insert(w, vec![1.0]);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(w).item(), 1.0);
    }
}
