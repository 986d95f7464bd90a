use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-2,
            weight_decay: 2e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks every parameter by `lr·wd·p`, then applies the
/// bias-corrected adaptive update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor in `params` from its stored gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let c = self.config;
        if self.m.is_empty() {
            for t in params.tensors_mut() {
                self.m.push(vec![0.0; t.numel()]);
                self.v.push(vec![0.0; t.numel()]);
            }
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let g = t
                .grad()
                .ok_or_else(|| TensorError::Contract(format!("parameter {i} has no gradient")))?
                .to_vec();
            if self.m[i].len() != g.len() {
                return Err(TensorError::dim("adamw", self.m[i].len(), g.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                *p -= c.lr * c.weight_decay * *p;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    fn single(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p).with_grad());
        s
    }

    #[test]
    fn decay_only_step() {
        let mut store = single(1.0);
        let id = store.id("p").unwrap();
        store.get_mut(id).set_grad(vec![0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store).unwrap();
        assert!((store.get(id).data()[0] - 0.9998).abs() < 1e-15);
    }

    #[test]
    fn first_step_bounded_by_lr() {
        for g in [-5.0, -0.1, 0.3, 42.0] {
            let mut store = single(1.0);
            let id = store.id("p").unwrap();
            store.get_mut(id).set_grad(vec![g]).unwrap();
            let cfg = AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            };
            let mut opt = AdamW::new(cfg);
            opt.step(&mut store).unwrap();
            let delta = store.get(id).data()[0] - 1.0;
            assert!(delta.abs() <= cfg.lr + 1e-15);
            assert!(delta * g < 0.0);
        }
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut store = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut store), Err(TensorError::Contract(_))));
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = single(0.0);
        let id = store.id("p").unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..200 {
            let mut g = Graph::new();
            let p = g.param(&store, id);
            let d = g.add_scalar(p, -3.0).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            store.absorb(&grads).unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!((store.get(id).data()[0] - 3.0).abs() < 1e-3);
        assert_eq!(opt.steps(), 200);
    }
}
