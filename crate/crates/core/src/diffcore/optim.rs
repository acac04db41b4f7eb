use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamTree;
use super::tensor::Scalar;
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(0.5),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            clip_norm: None,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimizer over a [`ParamTree`]. Steps either ascend an
/// objective (`θ ← θ + α g`) or descend a loss.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Gradient ascent on every path for which `trainable` holds. Other paths
    /// are left bitwise untouched. Returns the pre-clip gradient norm.
    pub fn ascend<T: Scalar>(
        &mut self,
        params: &mut ParamTree<T>,
        grads: &ParamTree<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<f64, DiffError> {
        self.apply(params, grads, trainable, 1.0)
    }

    pub fn descend<T: Scalar>(
        &mut self,
        params: &mut ParamTree<T>,
        grads: &ParamTree<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<f64, DiffError> {
        self.apply(params, grads, trainable, -1.0)
    }

    fn apply<T: Scalar>(
        &mut self,
        params: &mut ParamTree<T>,
        grads: &ParamTree<T>,
        trainable: impl Fn(&str) -> bool,
        sign: f64,
    ) -> Result<f64, DiffError> {
        params.check_same_structure(grads)?;
        if !grads.all_finite() {
            return Err(DiffError::NonFinite("optimizer gradient"));
        }
        let norm = grads
            .iter()
            .filter(|(k, _)| trainable(k))
            .map(|(_, g)| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let cfg = self.config.clone();
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for ((path, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
            if !trainable(path) {
                continue;
            }
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        let upd = sign * cfg.lr * clip * gv.to_f64_lossy();
                        *w = T::from_f64_lossy(w.to_f64_lossy() + upd);
                    }
                }
                OptimizerKind::Adam => {
                    let mo = self.moments.entry(path.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                    });
                    if mo.m.len() != p.len() {
                        return Err(DiffError::Structure(format!("moment size changed for {}", path)));
                    }
                    for (i, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gv = gv.to_f64_lossy() * clip;
                        mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * gv;
                        mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * gv * gv;
                        let m_hat = mo.m[i] / bc1;
                        let v_hat = mo.v[i] / bc2;
                        let upd = sign * cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                        *w = T::from_f64_lossy(w.to_f64_lossy() + upd);
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Convenience for tests and one-off updates: a fresh single step.
pub fn optimizer_step<T: Scalar>(
    params: &ParamTree<T>,
    grads: &ParamTree<T>,
    config: &OptimizerConfig,
) -> Result<ParamTree<T>, DiffError> {
    let mut out = params.clone();
    Optimizer::new(config.clone()).ascend(&mut out, grads, |_| true)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn tree(v: f64) -> ParamTree<f64> {
        let mut t = ParamTree::new();
        t.insert("w", Tensor::from_f64(&[1], &[v]).unwrap());
        t
    }

    #[test]
    fn sgd_ascent_convention() {
        let out = optimizer_step(&tree(0.0), &tree(1.0), &OptimizerConfig::sgd(0.1)).unwrap();
        assert!((out.get("w").unwrap().item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = tree(0.7);
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::default()] {
            let out = optimizer_step(&p, &tree(0.0), &cfg).unwrap();
            assert_eq!(out, p);
        }
    }

    #[test]
    fn adam_constant_gradient_trace() {
        // Hand recurrence for g = 2, lr = 0.1: m_t = (1 - 0.9^t)·2 and
        // v_t = (1 - 0.999^t)·4, so after bias correction every step is
        // 0.1 · 2 / (2 + 1e-8).
        let cfg = OptimizerConfig {
            clip_norm: None,
            lr: 0.1,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg);
        let mut p = tree(0.0);
        let g = tree(2.0);
        let step = 0.1 * 2.0 / (2.0 + 1e-8);
        let mut prev = 0.0;
        for k in 1..=3 {
            opt.ascend(&mut p, &g, |_| true).unwrap();
            let w = p.get("w").unwrap().item();
            assert!((w - prev - step).abs() < 1e-12, "step {}", k);
            assert!((w - k as f64 * step).abs() < 1e-12);
            prev = w;
        }
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1.0,
            clip_norm: Some(0.5),
            ..OptimizerConfig::default()
        };
        let mut t = ParamTree::<f64>::new();
        t.insert("a", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let out = optimizer_step(&t.zeros_like(), &t, &cfg).unwrap();
        let d = out.get("a").unwrap().to_f64_vec();
        assert!((d[0] - 0.3).abs() < 1e-12 && (d[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn frozen_paths_untouched() {
        let mut p = ParamTree::<f32>::new();
        p.insert("keep", Tensor::from_f64(&[1], &[0.25]).unwrap());
        p.insert("train", Tensor::from_f64(&[1], &[0.25]).unwrap());
        let mut g = p.zeros_like();
        g.get_mut("keep").unwrap().data_mut()[0] = 1.0;
        g.get_mut("train").unwrap().data_mut()[0] = 1.0;
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.ascend(&mut p, &g, |k| k == "train").unwrap();
        assert_eq!(p.get("keep").unwrap().item().to_bits(), 0.25f32.to_bits());
        assert!(p.get("train").unwrap().item() > 0.25);
    }

    #[test]
    fn structure_mismatch_rejected() {
        let mut g = ParamTree::<f64>::new();
        g.insert("other", Tensor::zeros(&[1]));
        assert!(optimizer_step(&tree(0.0), &g, &OptimizerConfig::sgd(0.1)).is_err());
    }
}
