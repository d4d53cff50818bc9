use std::collections::BTreeMap;

use super::{Float, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers keyed by parameter name, plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left alone.
pub fn adam_step<T: Float>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let cfg = state.config;
    let (b1, b2) = (T::cast(cfg.beta1), T::cast(cfg.beta2));
    let c1 = T::cast(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = T::cast(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::cast(cfg.lr), T::cast(cfg.epsilon));

    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v]).unwrap());
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::vector(vec![v]).unwrap())])
    }

    // Scalar Adam written out by hand.
    fn scalar_trace(p0: f64, gs: &[f64], cfg: AdamConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.epsilon);
        }
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = single(0.7);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &grad(0.0), &mut st).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = single(1.0);
        let mut st = AdamState::new(cfg);
        adam_step(&mut p, &grad(1.0), &mut st).unwrap();
        let got = p.get("w").unwrap().data()[0];
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert!((got - (1.0 - 5e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((got - scalar_trace(1.0, &[1.0], cfg)).abs() < 1e-15);
    }

    #[test]
    fn two_step_trace() {
        let cfg = AdamConfig::default();
        let mut p = single(1.0);
        let mut st = AdamState::new(cfg);
        adam_step(&mut p, &grad(1.0), &mut st).unwrap();
        adam_step(&mut p, &grad(1.0), &mut st).unwrap();
        let got = p.get("w").unwrap().data()[0];
        assert!((got - scalar_trace(1.0, &[1.0, 1.0], cfg)).abs() < 1e-15);
        // both bias-corrected moments are exactly 1 for a constant gradient
        assert!((got - (1.0 - 2.0 * 5e-4 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut st = AdamState::new(AdamConfig::default());
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, 2.0]).unwrap())]);
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::Dimension { .. })));
    }
}
