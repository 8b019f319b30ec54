//! Adam over a [`ParamStore`], with moment state that can be checkpointed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::models::checkpoint::Archive;
use crate::models::ParamStore;

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
        AdamConfig { lr: 2e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("adam.lr must be positive, got {}", self.lr)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam.{k} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: i64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .params()
                .map(|(k, t)| (k.to_string(), t.detach().zeros_like()))
                .collect::<BTreeMap<_, _>>()
        };
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update from `grads` (name → gradient). Parameters without an
    /// entry are left untouched and their moments are not decayed.
    pub fn apply(&mut self, store: &ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for (name, g) in grads {
                let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                    panic!("optimizer has no state for {name}");
                };
                *m = &*m * beta1 + g * (1.0 - beta1);
                *v = &*v * beta2 + g.square() * (1.0 - beta2);
                let update = (&*m / bc1) / ((&*v / bc2).sqrt() + eps) * lr;
                let mut p = store.param(name).shallow_clone();
                let _ = p.f_sub_(&update).expect("adam update");
            }
        });
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) {
        for (k, t) in &self.m {
            archive.insert(format!("{prefix}/m/{k}"), t);
        }
        for (k, t) in &self.v {
            archive.insert(format!("{prefix}/v/{k}"), t);
        }
        archive.set(&format!("{prefix}/step"), self.step);
    }

    pub fn load_from(&mut self, archive: &Archive, prefix: &str) -> Result<()> {
        for (k, t) in self.m.iter_mut() {
            *t = archive.tensor(&format!("{prefix}/m/{k}"))?.to_kind(t.kind());
        }
        for (k, t) in self.v.iter_mut() {
            *t = archive.tensor(&format!("{prefix}/v/{k}"))?.to_kind(t.kind());
        }
        self.step = archive
            .get(&format!("{prefix}/step"))?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("{prefix}/step: {e}")))?;
        Ok(())
    }
}

/// Gradients of `loss` with respect to the store's parameters; parameters
/// the loss does not depend on get no entry.
pub fn gradients(loss: &Tensor, store: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
    let names = store.param_names();
    let inputs: Vec<&Tensor> = store.trainable();
    let grads = Tensor::f_run_backward(&[loss], &inputs, false, false)?;
    Ok(names
        .into_iter()
        .zip(grads)
        .filter(|(_, g)| g.defined())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Kind;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut store = ParamStore::new(Kind::Double);
        store.add_param("w", Tensor::from_slice(&[1.0f64, -2.0, 0.5]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, eps: 1e-12 }, &store);
        let loss = (store.param("w") * Tensor::from_slice(&[3.0f64, -1.0, 0.0])).sum(Kind::Double);
        let grads = gradients(&loss, &store).unwrap();
        adam.apply(&store, &grads);
        let w = crate::util::to_f64_vec(store.param("w"));
        // bias-corrected m/sqrt(v) = sign(g); zero gradient stays put
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 1.9).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn matches_reference_two_steps() {
        let mut store = ParamStore::new(Kind::Double);
        store.add_param("x", Tensor::from_slice(&[2.0f64]));
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.99, eps: 1e-8 };
        let mut adam = Adam::new(cfg, &store);
        // reference: f(x) = x², hand-rolled scalar Adam
        let (mut x, mut m, mut v) = (2.0f64, 0.0, 0.0);
        for t in 1..=2 {
            let loss = store.param("x").square().sum(Kind::Double);
            adam.apply(&store, &gradients(&loss, &store).unwrap());
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.param("x").double_value(&[0]) - x).abs() < 1e-12);
    }

    #[test]
    fn state_round_trips_through_archive() {
        let mut store = ParamStore::new(Kind::Float);
        store.add_param("a", Tensor::from_slice(&[1.0f32, 2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let loss = store.param("a").square().sum(Kind::Float);
        adam.apply(&store, &gradients(&loss, &store).unwrap());
        let mut ar = Archive::new();
        adam.save_into(&mut ar, "opt");
        let mut back = Adam::new(AdamConfig::default(), &store);
        back.load_from(&ar, "opt").unwrap();
        assert_eq!(back.step, 1);
        assert!(back.m["a"].equal(&adam.m["a"]));
        assert!(back.v["a"].equal(&adam.v["a"]));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AdamConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
