use serde::{Deserialize, Serialize};

use crate::error::{HrstError, Result};
use crate::topology::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(params: &ModelParams, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, params: &ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        let ok = grads.len() == params.len()
            && self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.tensors().iter().enumerate().all(|(i, t)| {
                grads[i].len() == t.numel()
                    && self.m[i].len() == t.numel()
                    && self.v[i].len() == t.numel()
            });
        if ok {
            Ok(())
        } else {
            Err(HrstError::Shape(
                "optimizer state, gradients and parameters are misaligned".into(),
            ))
        }
    }
}

/// One AdamW update: decoupled decay `p ← p(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    state.check(params, grads)?;
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(HrstError::Numeric(format!(
                "non-finite gradient in {} at element {j}",
                params.tensors()[i].name
            )));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - lr * c.weight_decay;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.data.len() {
            let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g[j];
            let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g[j] * g[j];
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
            p.data[j] = (p.data[j] as f64 * decay - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::ParamTensor;
    use proptest::prelude::*;

    fn scalar(p: f32) -> ModelParams {
        ModelParams::from_tensors(vec![ParamTensor {
            name: "p".into(),
            shape: vec![1],
            data: vec![p],
        }])
        .unwrap()
    }

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = scalar(0.7);
        let mut s = OptimState::new(&p, no_decay());
        adamw_step(&mut p, &[vec![0.0]], &mut s, 1e-2).unwrap();
        assert_eq!(p.tensors()[0].data[0], 0.7);
    }

    #[test]
    fn unit_gradient_first_step() {
        let mut p = scalar(1.0);
        let mut s = OptimState::new(&p, no_decay());
        let lr = 1e-3;
        adamw_step(&mut p, &[vec![1.0]], &mut s, lr).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        let expect = 1.0 - lr / (1.0 + 1e-8);
        assert!((p.tensors()[0].data[0] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn pure_decay_shrinks() {
        let mut p = scalar(2.0);
        let mut s = OptimState::new(&p, AdamWConfig::default());
        adamw_step(&mut p, &[vec![0.0]], &mut s, 0.1).unwrap();
        assert_eq!(p.tensors()[0].data[0], (2.0f64 * (1.0 - 0.1 * 0.01)) as f32);
    }

    #[test]
    fn nan_gradient_fails() {
        let mut p = scalar(1.0);
        let mut s = OptimState::new(&p, no_decay());
        let err = adamw_step(&mut p, &[vec![f64::NAN]], &mut s, 0.1).unwrap_err();
        assert!(matches!(err, HrstError::Numeric(_)));
        assert_eq!(s.step, 0);
    }

    proptest! {
        /// Without decay the update equals a textbook scalar Adam run.
        #[test]
        fn matches_scalar_adam(p0 in -2.0f32..2.0, gs in prop::collection::vec(-3.0f64..3.0, 1..20), lr in 1e-4f64..1e-1) {
            let mut p = scalar(p0);
            let mut s = OptimState::new(&p, no_decay());
            let (mut x, mut m, mut v) = (p0 as f64, 0.0f64, 0.0f64);
            for (k, &g) in gs.iter().enumerate() {
                adamw_step(&mut p, &[vec![g]], &mut s, lr).unwrap();
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let t = (k + 1) as i32;
                x -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            }
            let got = p.tensors()[0].data[0] as f64;
            prop_assert!((got - x).abs() < 1e-5 * (1.0 + x.abs()), "{} vs {}", got, x);
        }
    }
}
