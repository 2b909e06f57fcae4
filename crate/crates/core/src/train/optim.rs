use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamId, ParamStore};

/// AdamW, warmup and clipping settings. Defaults are the paper-scale recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub lr_peak: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub clip_value: f64,
    pub accum_steps: usize,
    /// Restart the warmup schedule at every stage.
    pub restart_schedule_per_stage: bool,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr_peak: 5.0e-5,
            betas: (0.9, 0.99),
            eps: 1.0e-6,
            weight_decay: 0.01,
            warmup_steps: 2000,
            clip_value: 5.0,
            accum_steps: 14,
            restart_schedule_per_stage: true,
        }
    }
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let positive = [self.lr_peak, self.eps, self.clip_value];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("lr_peak, eps and clip_value must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::Config(format!("betas must lie in (0, 1), got ({b1}, {b2})")));
        }
        if self.warmup_steps == 0 || self.accum_steps == 0 {
            return Err(Error::Config("warmup_steps and accum_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, then inverse square-root decay.
pub fn lr_at(settings: &OptimSettings, step: u64) -> Result<f64> {
    if step < 1 {
        return Err(Error::Contract("lr_at is defined for step >= 1".into()));
    }
    let s = step as f64;
    let w = settings.warmup_steps as f64;
    Ok(settings.lr_peak * (s / w).min((w / s).sqrt()))
}

/// Clamps every gradient entry to `[-clip_value, clip_value]`.
pub fn clip_gradients(grads: &mut Gradients, clip_value: f64) {
    for (_, g) in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x = x.clamp(-clip_value, clip_value));
    }
}

/// Decoupled-weight-decay Adam over an explicit parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    /// Fresh moments for `params`.
    pub fn new(store: &ParamStore, params: Vec<ParamId>, settings: &OptimSettings) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.tensor(*id).numel()];
        Self {
            betas: settings.betas,
            eps: settings.eps,
            weight_decay: settings.weight_decay,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            t: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient slot are treated as having a
    /// zero gradient. Every new value must be finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (k, &id) in self.params.iter().enumerate() {
            let decay = store.param(id).decay;
            let g = grads.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let theta = store.tensor_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let wd = if decay { self.weight_decay * theta[i] } else { 0.0 };
                let next = theta[i] - lr * (m_hat / (v_hat.sqrt() + self.eps)) - lr * wd;
                if !next.is_finite() {
                    return Err(Error::Numeric { op: "adamw" });
                }
                theta[i] = next;
            }
        }
        Ok(())
    }

    /// Moments as named tensors `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (k, &id) in self.params.iter().enumerate() {
            let p = store.param(id);
            let shape = p.tensor.shape().to_vec();
            out.push((
                format!("adam.m.{}", p.name),
                Tensor::new(shape.clone(), self.m[k].clone()).expect("moment shape"),
            ));
            out.push((
                format!("adam.v.{}", p.name),
                Tensor::new(shape, self.v[k].clone()).expect("moment shape"),
            ));
        }
        out
    }

    /// Restores moments saved by [`Self::state_tensors`] and the update count.
    pub fn load_state(
        &mut self,
        store: &ParamStore,
        lookup: impl Fn(&str) -> Option<Tensor>,
        steps: u64,
    ) -> Result<()> {
        for (k, &id) in self.params.iter().enumerate() {
            let name = &store.param(id).name;
            for (prefix, dst) in [("adam.m.", &mut self.m[k]), ("adam.v.", &mut self.v[k])] {
                let key = format!("{prefix}{name}");
                let t = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if t.numel() != dst.len() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has the wrong size")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        self.t = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::nn::{Group, Init};

    #[test]
    fn lr_examples() {
        let s = OptimSettings::default();
        assert_eq!(lr_at(&s, 2000).unwrap(), 5.0e-5);
        assert!((lr_at(&s, 1000).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!((lr_at(&s, 8000).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!(matches!(lr_at(&s, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_examples() {
        let mut g = Gradients::new(1);
        g.set(ParamId::from_index(0), vec![7.2, -6.0, 3.1]);
        clip_gradients(&mut g, 5.0);
        assert_eq!(g.get(ParamId::from_index(0)).unwrap(), &[5.0, -5.0, 3.1]);
    }

    #[test]
    fn one_step_matches_hand_oracle() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", Group::Projector, true, &[1], Init::Ones).unwrap();
        store.tensor_mut(id).data_mut()[0] = 0.5;
        store.set_trainable(&BTreeSet::from([Group::Projector])).unwrap();
        let s = OptimSettings::default();
        let mut opt = AdamW::new(&store, vec![id], &s);
        let mut g = Gradients::new(1);
        g.set(id, vec![1.0]);
        let lr = 1e-3;
        opt.step(&mut store, &g, lr).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = 0.5 - lr * (1.0 / (1.0 + 1e-6)) - lr * 0.01 * 0.5;
        assert!((store.tensor(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn bad_settings_rejected() {
        let s = OptimSettings {
            betas: (0.9, 1.0),
            ..OptimSettings::default()
        };
        assert!(s.validate().is_err());
        assert!(OptimSettings::default().validate().is_ok());
    }
}
