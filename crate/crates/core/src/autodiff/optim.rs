use super::{AutodiffError, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` given matching `grads`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
    ) -> Result<(), AutodiffError> {
        if params.len() != grads.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam",
                detail: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam",
                    detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if let Some(m) = self.first.get(i) {
                if m.len() != p.len() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adam",
                        detail: format!("param {i} changed size"),
                    });
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (k, (x, gk)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::row_vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let g = Tensor::zeros(1, 3);
        let mut adam = Adam::default();
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = Tensor::row_vector(vec![0.0, 0.0]);
        let g = Tensor::row_vector(vec![0.5, -2.0]);
        let mut adam = Adam::new(1e-2);
        let mut prev = p.clone();
        for _ in 0..100 {
            adam.step(&mut [&mut p], &[&g]).unwrap();
            assert!(p.get(0, 0) < prev.get(0, 0));
            assert!(p.get(0, 1) > prev.get(0, 1));
            prev = p.clone();
        }
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // f(x) = (x - 3)^2, minimizer 3.
        let mut p = Tensor::scalar(-1.0);
        let mut adam = Adam::new(1e-2);
        for _ in 0..2000 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-3, "got {}", p.item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(2, 2);
        let g = Tensor::zeros(1, 4);
        let err = Adam::default().step(&mut [&mut p], &[&g]).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
    }
}
