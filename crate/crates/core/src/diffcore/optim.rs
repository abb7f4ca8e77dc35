use super::{DiffError, OptState, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), then zeroes gradients.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, cfg: &AdamConfig, t: i64) -> Result<(), DiffError> {
    if t <= 0 {
        return Err(DiffError::State(format!("adam step counter must be positive, got {t}")));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    // theta -= lr * (m / c1) / (sqrt(v / c2) + eps)
    let step = T::of(cfg.lr / c1);
    let inv_c2 = T::of(1.0 / c2);
    let eps = T::of(cfg.eps);
    // Moments of idle parameters decay geometrically into the subnormal range,
    // where arithmetic is an order of magnitude slower; flush them to zero.
    let tiny = T::of(1e-30);

    for p in params.iter_mut() {
        if matches!(p.opt_state, OptState::Empty) {
            p.opt_state = OptState::Adam {
                first: Tensor::zeros(p.value.shape()),
                second: Tensor::zeros(p.value.shape()),
            };
        }
        let OptState::Adam { first, second } = &mut p.opt_state else {
            unreachable!()
        };
        let g = p.grad.data_mut();
        let w = p.value.data_mut();
        let m = first.data_mut();
        let v = second.data_mut();
        for i in 0..g.len() {
            let gi = g[i];
            let mi = b1 * m[i] + one_b1 * gi;
            let vi = b2 * v[i] + one_b2 * gi * gi;
            m[i] = if mi.abs() < tiny { T::zero() } else { mi };
            v[i] = if vi < tiny { T::zero() } else { vi };
            w[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            g[i] = T::zero();
        }
    }
    Ok(())
}

/// Plain gradient descent `theta <- theta - lr * grad`, then zeroes gradients.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, lr: f64) {
    let lr = T::of(lr);
    for p in params.iter_mut() {
        let g = p.grad.data_mut();
        let w = p.value.data_mut();
        for (wi, gi) in w.iter_mut().zip(g.iter_mut()) {
            *wi -= lr * *gi;
            *gi = T::zero();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Stateful optimizer wrapper that owns the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    adam: AdamConfig,
    t: i64,
}

impl Optimizer {
    pub fn adam(cfg: AdamConfig) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            adam: cfg,
            t: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> i64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>) -> Result<(), DiffError> {
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam => adam_step(params, &self.adam, self.t),
            OptimizerKind::Sgd => {
                sgd_step(params, self.adam.lr);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(vec![theta]).unwrap()).unwrap();
        store
    }

    fn set_grad(store: &mut ParamStore<f64>, g: f64) {
        store.iter_mut().next().unwrap().grad.data_mut()[0] = g;
    }

    fn theta(store: &ParamStore<f64>) -> f64 {
        store.iter().next().unwrap().value.data()[0]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.7);
        for t in 1..=5 {
            adam_step(&mut store, &AdamConfig::default(), t).unwrap();
        }
        assert_eq!(theta(&store), 0.7);
        sgd_step(&mut store, 0.3);
        assert_eq!(theta(&store), 0.7);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        set_grad(&mut store, 1.0);
        let cfg = AdamConfig::default();
        adam_step(&mut store, &cfg, 1).unwrap();
        let expected = -cfg.lr * 1.0 / (1.0 + cfg.eps);
        assert!((theta(&store) - expected).abs() < 1e-15);
        assert_eq!(store.iter().next().unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn non_positive_step_rejected() {
        let mut store = scalar_store(0.0);
        assert!(matches!(
            adam_step(&mut store, &AdamConfig::default(), 0),
            Err(DiffError::State(_))
        ));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = scalar_store(0.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut converged = None;
        for t in 1..=10_000 {
            let g = 2.0 * (theta(&store) - 3.0);
            set_grad(&mut store, g);
            adam_step(&mut store, &cfg, t).unwrap();
            if (theta(&store) - 3.0).abs() < 1e-3 {
                converged = Some(t);
                break;
            }
        }
        assert!(converged.is_some(), "theta = {}", theta(&store));
    }

    #[test]
    fn sgd_closed_form() {
        let mut store = scalar_store(1.0);
        set_grad(&mut store, 2.0);
        sgd_step(&mut store, 0.5);
        assert_eq!(theta(&store), 0.0);
    }

    #[test]
    fn sgd_and_adam_agree_on_direction() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let start: f64 = rng.random_range(-5.0..5.0);
            let g: f64 = rng.random_range(-3.0..3.0);
            if g == 0.0 {
                continue;
            }
            let mut a = scalar_store(start);
            let mut s = scalar_store(start);
            set_grad(&mut a, g);
            set_grad(&mut s, g);
            adam_step(&mut a, &AdamConfig { lr: 0.01, ..AdamConfig::default() }, 1).unwrap();
            sgd_step(&mut s, 0.01);
            assert_eq!((theta(&a) - start).signum(), (theta(&s) - start).signum());
        }
    }
}
