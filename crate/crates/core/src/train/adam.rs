use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Array, Gradients, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Array,
    v: Array,
    steps: i32,
}

/// Adam with per-parameter moment estimates and step counts.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter whose path starts with one of `prefixes`
    /// and has a gradient; leaves all others untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, prefixes: &[&str]) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (path, g) in grads {
            if !prefixes.iter().any(|p| path.starts_with(p)) {
                continue;
            }
            let value = params.get_mut(path)?;
            let st = self.state.entry(path.clone()).or_insert_with(|| Moments {
                m: Array::zeros(g.shape()),
                v: Array::zeros(g.shape()),
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps);
            let c2 = 1.0 - beta2.powi(st.steps);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((p, gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamSet::new();
        ps.insert("a.w", Array::new(&[2], vec![1.0, -1.0]).unwrap(), true)
            .unwrap();
        ps.insert("b.w", Array::new(&[1], vec![5.0]).unwrap(), true).unwrap();
        let mut g = Gradients::new();
        g.insert("a.w".into(), Array::new(&[2], vec![3.0, -0.1]).unwrap());
        g.insert("b.w".into(), Array::new(&[1], vec![1.0]).unwrap());
        let mut opt = Adam::new(0.1, AdamConfig::default());
        opt.step(&mut ps, &g, &["a."]).unwrap();
        let w = ps.get("a.w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(ps.get("b.w").unwrap().data(), &[5.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Array::new(&[1], vec![4.0]).unwrap(), true).unwrap();
        let mut opt = Adam::new(0.05, AdamConfig::default());
        for _ in 0..2000 {
            let x = ps.get("x").unwrap().data()[0];
            let mut g = Gradients::new();
            g.insert("x".into(), Array::new(&[1], vec![2.0 * (x - 1.5)]).unwrap());
            opt.step(&mut ps, &g, &[""]).unwrap();
        }
        assert!((ps.get("x").unwrap().data()[0] - 1.5).abs() < 1e-3);
    }
}
