//! Adam with warmup-then-inverse-sqrt learning rate and global-norm
//! gradient clipping.

use indexmap::IndexMap;

use crate::error::ModelError;
use crate::params::ParamSet;

/// Per-parameter first/second moment accumulators plus the step counter and
/// schedule. Moment arrays always match their parameter shapes.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub base_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm never exceeds this.
    pub clip_norm: f64,
    pub(crate) moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(base_lr: f64, warmup: u64) -> Self {
        OptimizerState {
            step: 0,
            base_lr,
            warmup: warmup.max(1),
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
            moments: IndexMap::new(),
        }
    }

    /// Linear warmup to `base_lr`, then inverse-sqrt decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.base_lr * (s / w).min((w / s).sqrt())
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// Rescale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParamSet, names: &[String], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for name in names {
        if let Ok(t) = params.get(name) {
            if let Some(g) = t.grad() {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for name in names {
            if let Ok(t) = params.get_mut(name) {
                if let Some(g) = t.grad() {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    t.set_grad(Some(scaled));
                }
            }
        }
    }
    norm
}

/// One Adam step over `names`, using each parameter's accumulated gradient.
/// Gradients are clipped by global norm first; parameters without a gradient
/// are skipped. Clears the used gradients afterwards.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    names: &[String],
) -> Result<(), ModelError> {
    for name in names {
        if let Some(g) = params.get(name)?.grad() {
            if g.iter().any(|v| v.is_nan()) {
                return Err(ModelError::NanGradient(name.clone()));
            }
        }
    }
    clip_global_norm(params, names, state.clip_norm);
    state.step += 1;
    let lr = state.lr_at(state.step);
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for name in names {
        let tensor = params.get_mut(name)?;
        let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
            continue;
        };
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        debug_assert_eq!(m.len(), tensor.numel());
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
        tensor.set_grad(None);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: Vec<f64>) -> (ParamSet, Vec<String>) {
        let mut p = ParamSet::new();
        let n = v.len();
        p.insert("x", Tensor::new(vec![n], v).unwrap().with_grad());
        (p, vec!["x".to_string()])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, names) = one_param(vec![1.0, -2.0]);
        p.get_mut("x").unwrap().accumulate_grad(&[0.0, 0.0]);
        let mut st = OptimizerState::new(0.1, 1);
        adam_step(&mut p, &mut st, &names).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_unit_gradient_moves_by_lr() {
        // bias correction makes mhat/sqrt(vhat) ~ 1 on the first step
        let (mut p, names) = one_param(vec![0.0]);
        p.get_mut("x").unwrap().accumulate_grad(&[1.0]);
        let mut st = OptimizerState::new(0.1, 1);
        adam_step(&mut p, &mut st, &names).unwrap();
        let got = p.get("x").unwrap().data()[0];
        assert!((got + 0.1).abs() < 1e-6, "update was {got}");
    }

    #[test]
    fn quadratic_descends() {
        // f(x) = x^2, grad = 2x; a small step must reduce the loss
        let (mut p, names) = one_param(vec![1.0]);
        let x0 = p.get("x").unwrap().data()[0];
        p.get_mut("x").unwrap().accumulate_grad(&[2.0 * x0]);
        let mut st = OptimizerState::new(0.01, 1);
        adam_step(&mut p, &mut st, &names).unwrap();
        let x1 = p.get("x").unwrap().data()[0];
        assert!(x1 * x1 < x0 * x0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut p, names) = one_param(vec![1.0]);
        p.get_mut("x").unwrap().accumulate_grad(&[f64::NAN]);
        let mut st = OptimizerState::new(0.1, 1);
        match adam_step(&mut p, &mut st, &names) {
            Err(ModelError::NanGradient(n)) => assert_eq!(n, "x"),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let st = OptimizerState::new(1.0, 10);
        assert!((st.lr_at(1) - 0.1).abs() < 1e-12);
        assert!((st.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((st.lr_at(40) - 0.5).abs() < 1e-12);
        assert!(st.lr_at(5) < st.lr_at(10));
        assert!(st.lr_at(20) < st.lr_at(10));
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let (mut p, names) = one_param(vec![0.0, 0.0]);
        p.get_mut("x").unwrap().accumulate_grad(&[30.0, 40.0]);
        let pre = clip_global_norm(&mut p, &names, 5.0);
        assert!((pre - 50.0).abs() < 1e-9);
        let g = p.get("x").unwrap().grad().unwrap();
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 5.0).abs() < 1e-9);
    }
}
