//! AdamW with decoupled weight decay and per-group learning rates.

use std::collections::HashMap;

use super::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

/// Optimizer state: per-parameter first/second moments plus a step counter.
/// Layers whose group is absent from the learning-rate map are frozen (no
/// update, no moment advance).
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let moments = store
            .layers
            .iter()
            .map(|l| Moments {
                m_w: vec![0.0; l.w.data.len()],
                v_w: vec![0.0; l.w.data.len()],
                m_b: vec![0.0; l.b.len()],
                v_b: vec![0.0; l.b.len()],
            })
            .collect();
        AdamW {
            cfg,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay update with bias-corrected moments. A
    /// non-finite gradient aborts the step and reports the offending layer.
    pub fn step(&mut self, store: &mut ParamStore, lrs: &HashMap<ParamGroup, f64>) -> Result<()> {
        self.step_masked(store, lrs, |_| true)
    }

    /// Like [`AdamW::step`] but restricted to layers whose index passes the
    /// filter; excluded layers receive no update, decay, or moment advance.
    /// Used when training one sub-network of a shared store in isolation.
    pub fn step_masked(
        &mut self,
        store: &mut ParamStore,
        lrs: &HashMap<ParamGroup, f64>,
        active: impl Fn(usize) -> bool,
    ) -> Result<()> {
        for (i, l) in store.layers.iter().enumerate() {
            if active(i)
                && lrs.contains_key(&l.group)
                && (l.gw.data.iter().any(|g| !g.is_finite())
                    || l.gb.iter().any(|g| !g.is_finite()))
            {
                return Err(Error::NonFinite(format!(
                    "gradient of layer '{}' (step aborted)",
                    l.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);

        for (i, (l, mom)) in store
            .layers
            .iter_mut()
            .zip(self.moments.iter_mut())
            .enumerate()
        {
            if !active(i) {
                continue;
            }
            let lr = match lrs.get(&l.group) {
                Some(&lr) => lr,
                None => continue, // frozen group
            };
            update(
                &mut l.w.data,
                &l.gw.data,
                &mut mom.m_w,
                &mut mom.v_w,
                lr,
                self.cfg.weight_decay,
                &self.cfg,
                c1,
                c2,
            );
            // Biases are not decayed.
            update(
                &mut l.b,
                &l.gb,
                &mut mom.m_b,
                &mut mom.v_b,
                lr,
                0.0,
                &self.cfg,
                c1,
                c2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    wd: f64,
    cfg: &AdamWConfig,
    c1: f64,
    c2: f64,
) {
    for i in 0..params.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * params[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::rng::substream;

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "adamw-test");
        let id = store.add_layer("s", ParamGroup::Classifier, 1, 1, &mut rng);
        store.layer_mut(id).w = Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        };
        store
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let mut store = scalar_store(2.0);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.01,
                ..Default::default()
            },
        );
        let lrs = HashMap::from([(ParamGroup::Classifier, 0.001)]);
        opt.step(&mut store, &lrs).unwrap();
        let expected = 2.0 * (1.0 - 0.001 * 0.01);
        assert!((store.layers[0].w.data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_evaluated_adam() {
        // Constant grad 1, wd 0: m̂ = 1, v̂ = 1 → update = −lr·1/(1+ε).
        let mut store = scalar_store(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        store.layers[0].gw.data[0] = 1.0;
        let lrs = HashMap::from([(ParamGroup::Classifier, 0.001)]);
        opt.step(&mut store, &lrs).unwrap();
        let expected = -0.001 / (1.0 + cfg.eps);
        assert!((store.layers[0].w.data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut store = scalar_store(1.5);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        store.layers[0].gw.data[0] = 1.0;
        let lrs = HashMap::from([(ParamGroup::Encoder, 0.001)]);
        opt.step(&mut store, &lrs).unwrap();
        assert_eq!(store.layers[0].w.data[0], 1.5);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        store.layers[0].gw.data[0] = f64::NAN;
        let lrs = HashMap::from([(ParamGroup::Classifier, 0.001)]);
        let err = opt.step(&mut store, &lrs).unwrap_err();
        assert!(err.to_string().contains("'s'"));
        assert_eq!(store.layers[0].w.data[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let mut store = scalar_store(0.7);
            let mut opt = AdamW::new(&store, AdamWConfig::default());
            let lrs = HashMap::from([(ParamGroup::Classifier, 0.01)]);
            for i in 0..10 {
                store.zero_grads();
                store.layers[0].gw.data[0] = (i as f64).sin();
                opt.step(&mut store, &lrs).unwrap();
            }
            store.layers[0].w.data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
