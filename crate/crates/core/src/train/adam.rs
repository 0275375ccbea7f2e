//! Bias-corrected ADAM over named parameter tensors.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ladder::TaggerParams;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First/second moment accumulators, one pair per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &TaggerParams) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        params.visit(|n, t| {
            names.push(n);
            m.push(Tensor::zeros(t.dims()));
        });
        Adam {
            names,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    /// Re-keys the moments to `params`: kept names keep their moments, new
    /// names start at zero, and dropped names are forgotten.
    pub fn sync(&mut self, params: &TaggerParams) {
        let mut fresh = Adam::new(params);
        for (i, name) in fresh.names.iter().enumerate() {
            if let Some(j) = self.names.iter().position(|n| n == name) {
                if self.m[j].dims() == fresh.m[i].dims() {
                    fresh.m[i] = self.m[j].clone();
                    fresh.v[i] = self.v[j].clone();
                }
            }
        }
        fresh.step = self.step;
        *self = fresh;
    }

    /// One update. A non-finite gradient aborts the step before anything
    /// changes and names the offending parameter.
    pub fn update(&mut self, params: &mut TaggerParams, grads: &TaggerParams, cfg: &AdamConfig) -> Result<()> {
        let mut flat = Vec::new();
        grads.visit(|name, g| flat.push((name, g)));
        if flat.len() != self.names.len() || flat.iter().zip(&self.names).any(|((a, _), b)| a != b) {
            return Err(Error::contract("optimizer state does not mirror the parameters"));
        }
        if let Some((name, _)) = flat.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let mut i = 0;
        let mut shape_error = None;
        params.visit_mut(|name, p| {
            let g = flat[i].1;
            if p.dims() != g.dims() {
                shape_error.get_or_insert_with(|| Error::shape(format!("gradient shape mismatch for {name}")));
                i += 1;
                return;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
                *w -= cfg.lr * (*mj / c1) / ((*vj / c2).sqrt() + cfg.eps);
            }
            i += 1;
        });
        match shape_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NormMode;
    use crate::ladder::LadderConfig;
    use crate::rng::seeded;

    fn params() -> TaggerParams {
        let cfg = LadderConfig {
            layers: vec![3, 2],
            norm: NormMode::Layer,
            classes: 0,
        };
        TaggerParams::init(&cfg, 2, 0.0, 0.25, &mut seeded(0)).unwrap()
    }

    fn filled(p: &TaggerParams, value: f64) -> TaggerParams {
        p.map(|_, t| Tensor::full(t.dims(), value))
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = params();
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let g = filled(&p, 1.0);
        adam.update(&mut p, &g, &AdamConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = -lr / (1 + ε).
        let expected: f64 = -1e-3 / (1.0 + 1e-8);
        assert!((expected - -9.99999e-4).abs() < 1e-9);
        let mut deltas = Vec::new();
        p.visit(|_, t| deltas.extend_from_slice(t.data()));
        let mut orig = Vec::new();
        before.visit(|_, t| orig.extend_from_slice(t.data()));
        for (a, b) in deltas.iter().zip(&orig) {
            assert!((a - b - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = params();
        let mut adam = Adam::new(&p);
        let cfg = AdamConfig::default();
        let g = filled(&p, 2.0);
        adam.update(&mut p, &g, &cfg).unwrap();
        let (snapshot, m1, v1) = (p.clone(), adam.m[0].data()[0], adam.v[0].data()[0]);
        let mut q = p.clone();
        let mut a2 = adam.clone();
        a2.update(&mut q, &filled(&p, 0.0), &cfg).unwrap();
        assert!((a2.m[0].data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((a2.v[0].data()[0] - 0.999 * v1).abs() < 1e-15);
        // The decayed momentum still moves the weights; with fresh moments
        // a zero gradient moves nothing.
        let mut r = snapshot.clone();
        Adam::new(&r).update(&mut r, &filled(&snapshot, 0.0), &cfg).unwrap();
        assert_eq!(r, snapshot);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = params();
        let mut grads = filled(&p, 0.5);
        grads.decoder[0].data_mut()[1] = f64::NAN;
        let mut adam = Adam::new(&p);
        let before = (p.clone(), adam.clone());
        match adam.update(&mut p, &grads, &AdamConfig::default()) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("decoder.0.weight"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert_eq!((p, adam), before);
    }

    #[test]
    fn sync_keeps_existing_moments() {
        let mut p = params();
        let mut adam = Adam::new(&p);
        let g = filled(&p, 1.0);
        adam.update(&mut p, &g, &AdamConfig::default()).unwrap();
        let old = adam.clone();
        p.class_head = Some(crate::ladder::ClassHead::init(2, 4, &mut seeded(1)));
        adam.sync(&p);
        assert_eq!(adam.names.len(), old.names.len() + 4);
        assert_eq!(adam.step, 1);
        assert_eq!(adam.m[0], old.m[0]);
        let i = adam.names.iter().position(|n| n == "class.out.bias").unwrap();
        assert!(adam.m[i].data().iter().all(|&v| v == 0.0));
    }
}
