use super::{AutodiffError, Gradients, ParamStore};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let (b1, b2) = self.betas;
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::InvalidOptimizer(format!("{self:?}")))
        }
    }

    /// Applies one update to every parameter. Rejects non-finite gradients
    /// before touching any state.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) -> Result<(), AutodiffError> {
        self.validate()?;
        if grads.len() != store.len() {
            return Err(AutodiffError::StoreMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if !grads.is_finite() {
            return Err(AutodiffError::NonFiniteGradient);
        }
        let (b1, b2) = self.betas;
        for (p, g) in store.params_mut().iter_mut().zip(grads.iter()) {
            p.step_count += 1;
            let bc1 = 1.0 - b1.powi(p.step_count as i32);
            let bc2 = 1.0 - b2.powi(p.step_count as i32);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    fn grad_of(store: &ParamStore, g: f64) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        grads.get_mut(crate::autodiff::ParamId(0)).data_mut()[0] = g;
        grads
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut s = scalar_store(0.7);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::with_lr(0.1)
        };
        let g = grad_of(&s, 0.0);
        opt.step(&mut s, &g).unwrap();
        opt.step(&mut s, &g).unwrap();
        let p = s.get(crate::autodiff::ParamId(0));
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(p.step_count, 2);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut s = scalar_store(1.0);
        let opt = AdamW {
            lr: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let g = grad_of(&s, 1.0);
        opt.step(&mut s, &g).unwrap();
        let v = s.value(crate::autodiff::ParamId(0)).data()[0];
        assert!((v - 0.9).abs() < 1e-6, "{v}");
    }

    #[test]
    fn decoupled_decay_only() {
        let mut s = scalar_store(2.0);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        let g = grad_of(&s, 0.0);
        opt.step(&mut s, &g).unwrap();
        let v = s.value(crate::autodiff::ParamId(0)).data()[0];
        assert!((v - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_parameters_untouched() {
        let mut s = scalar_store(1.0);
        let before = s.clone();
        let g = grad_of(&s, f64::NAN);
        let err = AdamW::default().step(&mut s, &g);
        assert!(matches!(err, Err(AutodiffError::NonFiniteGradient)));
        assert_eq!(s, before);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut s = scalar_store(1.0);
        let g = grad_of(&s, 1.0);
        assert!(AdamW::with_lr(0.0).step(&mut s, &g).is_err());
        let bad = AdamW {
            betas: (1.0, 0.9),
            ..AdamW::default()
        };
        assert!(bad.step(&mut s, &g).is_err());
    }
}
