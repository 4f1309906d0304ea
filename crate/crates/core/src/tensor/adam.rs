//! Adam optimizer with bias correction, plus global gradient-norm clipping.

use super::{Scalar, Tensor, TensorError};

/// Adam hyperparameters. Defaults follow the standard recommendation:
/// learning rate 1e-3, beta1 0.9, beta2 0.999, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamParams {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Optimizer moments, exposed so checkpoints can persist them exactly.
/// `first_moment[i]` / `second_moment[i]` correspond to the i-th registered
/// parameter, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

/// Adam over a fixed set of named parameters. The optimizer shares storage
/// with the model through the tensor handles; `step` updates values in place.
#[derive(Debug)]
pub struct Adam<T: Scalar> {
    params: Vec<(String, Tensor<T>)>,
    hyper: AdamParams,
    state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>, hyper: AdamParams) -> Result<Self, TensorError> {
        for (i, (name, tensor)) in params.iter().enumerate() {
            if !tensor.requires_grad() {
                return Err(TensorError::InvalidParameter(format!(
                    "optimizer parameter \"{name}\" does not require gradients"
                )));
            }
            if params[..i].iter().any(|(other, _)| other == name) {
                return Err(TensorError::InvalidParameter(format!(
                    "duplicate optimizer parameter name \"{name}\""
                )));
            }
        }
        let state = AdamState {
            step_count: 0,
            first_moment: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
        };
        Ok(Adam {
            params,
            hyper,
            state,
        })
    }

    pub fn hyper(&self) -> &AdamParams {
        &self.hyper
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// Restores previously saved moments (checkpoint resume). Shapes must
    /// match the registered parameters exactly.
    pub fn set_state(&mut self, state: AdamState<T>) -> Result<(), TensorError> {
        if state.first_moment.len() != self.params.len()
            || state.second_moment.len() != self.params.len()
        {
            return Err(TensorError::InvalidParameter(format!(
                "optimizer state holds {} moment vectors for {} parameters",
                state.first_moment.len(),
                self.params.len()
            )));
        }
        for (i, (name, p)) in self.params.iter().enumerate() {
            if state.first_moment[i].len() != p.numel() || state.second_moment[i].len() != p.numel()
            {
                return Err(TensorError::InvalidParameter(format!(
                    "optimizer state size mismatch for parameter \"{name}\""
                )));
            }
        }
        self.state = state;
        Ok(())
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// One Adam update. Every registered parameter must carry a gradient;
    /// a missing gradient is reported by name rather than silently skipped.
    pub fn step(&mut self) -> Result<(), TensorError> {
        let grads: Vec<Vec<T>> = self
            .params
            .iter()
            .map(|(name, p)| {
                p.grad()
                    .ok_or_else(|| TensorError::MissingGradient(name.clone()))
            })
            .collect::<Result<_, _>>()?;

        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let c1 = 1.0 - self.hyper.beta1.powi(t);
        let c2 = 1.0 - self.hyper.beta2.powi(t);
        let (b1, b2) = (self.hyper.beta1, self.hyper.beta2);
        let (lr, eps) = (self.hyper.learning_rate, self.hyper.epsilon);

        for (i, (_, p)) in self.params.iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            let mut values = p.values();
            for j in 0..values.len() {
                let gj = g[j].to_f64();
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let m_hat = mj / c1;
                let v_hat = vj / c2;
                values[j] = T::from_f64(values[j].to_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
            p.set_values(values)?;
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. Parameters without gradients are an error.
pub fn clip_grad_norm<T: Scalar>(
    params: &[(String, Tensor<T>)],
    max_norm: f64,
) -> Result<f64, TensorError> {
    let mut total_sq = 0.0f64;
    for (name, p) in params {
        let g = p
            .grad()
            .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
        for v in g {
            let x = v.to_f64();
            total_sq += x * x;
        }
    }
    let norm = total_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for (_, p) in params {
            let mut slot = p.0.grad.borrow_mut();
            if let Some(g) = slot.as_mut() {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        // With bias correction, the very first update is close to
        // lr * sign(gradient) when epsilon is negligible.
        let p = Tensor::<f64>::parameter(vec![1.0], &[1]).unwrap();
        let mut opt = Adam::new(
            vec![("p".to_string(), p.clone())],
            AdamParams::with_learning_rate(1e-3),
        )
        .unwrap();
        let loss = p.scale(2.5).sum_all();
        loss.backward().unwrap();
        opt.step().unwrap();
        let got = p.values()[0];
        assert!((got - (1.0 - 1e-3)).abs() < 1e-9, "{got}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        // Minimise (p - 3)^2 from p = 0.
        let p = Tensor::<f32>::parameter(vec![0.0], &[1]).unwrap();
        let mut opt = Adam::new(
            vec![("p".to_string(), p.clone())],
            AdamParams::with_learning_rate(0.1),
        )
        .unwrap();
        let target = Tensor::<f32>::constant(vec![3.0], &[1]).unwrap();
        for _ in 0..400 {
            opt.zero_grad();
            let d = p.sub(&target).unwrap();
            let loss = d.mul(&d).unwrap().sum_all();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        assert!((p.values()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn missing_gradient_is_reported_by_name() {
        let a = Tensor::<f32>::parameter(vec![1.0], &[1]).unwrap();
        let b = Tensor::<f32>::parameter(vec![1.0], &[1]).unwrap();
        let mut opt = Adam::new(
            vec![("a".to_string(), a.clone()), ("weights.b".to_string(), b)],
            AdamParams::default(),
        )
        .unwrap();
        let loss = a.scale(1.0).sum_all();
        loss.backward().unwrap();
        let err = opt.step().unwrap_err();
        assert_eq!(err, TensorError::MissingGradient("weights.b".to_string()));
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let a = Tensor::<f32>::parameter(vec![1.0], &[1]).unwrap();
        let b = Tensor::<f32>::parameter(vec![2.0], &[1]).unwrap();
        let err = Adam::new(
            vec![("w".to_string(), a), ("w".to_string(), b)],
            AdamParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::InvalidParameter(_)));
    }

    #[test]
    fn state_round_trips_through_set_state() {
        let p = Tensor::<f32>::parameter(vec![0.5, -0.5], &[2]).unwrap();
        let mut opt = Adam::new(
            vec![("p".to_string(), p.clone())],
            AdamParams::default(),
        )
        .unwrap();
        let loss = p.mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        opt.step().unwrap();
        let saved = opt.state().clone();

        let p2 = Tensor::<f32>::parameter(p.values(), &[2]).unwrap();
        let mut opt2 = Adam::new(
            vec![("p".to_string(), p2.clone())],
            AdamParams::default(),
        )
        .unwrap();
        opt2.set_state(saved.clone()).unwrap();
        assert_eq!(opt2.state(), &saved);

        // Identical gradients now produce identical updates.
        p.zero_grad();
        let l1 = p.mul(&p).unwrap().sum_all();
        l1.backward().unwrap();
        opt.step().unwrap();
        let l2 = p2.mul(&p2).unwrap().sum_all();
        l2.backward().unwrap();
        opt2.step().unwrap();
        assert_eq!(p.values(), p2.values());
    }

    #[test]
    fn clip_rescales_only_when_norm_exceeds_the_cap() {
        let p = Tensor::<f64>::parameter(vec![3.0, 4.0], &[2]).unwrap();
        let named = vec![("p".to_string(), p.clone())];
        let loss = p.mul(&p).unwrap().sum_all(); // grad = 2p = [6, 8], norm 10
        loss.backward().unwrap();
        let norm = clip_grad_norm(&named, 5.0).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        let g = p.grad().unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);

        // Below the cap nothing changes.
        let norm2 = clip_grad_norm(&named, 100.0).unwrap();
        assert!((norm2 - 5.0).abs() < 1e-12);
        assert_eq!(p.grad().unwrap(), g);
    }
}
