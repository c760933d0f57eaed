use crate::scalar::Real;
use crate::tensor::Tensor;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<R> {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<R>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![R::zero(); p.len()], vec![R::zero(); p.len()]))
            .unzip();
        Self { cfg, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<R>>,
        grads: &[Vec<R>],
    ) -> Result<(), TrainError> {
        let params: Vec<&mut Tensor<R>> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::StateMismatch {
                index: params.len().min(grads.len()),
                expected: self.m.len(),
                found: params.len().max(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(TrainError::StateMismatch {
                    index: i,
                    expected: self.m[i].len(),
                    found: if p.len() != self.m[i].len() { p.len() } else { g.len() },
                });
            }
        }
        self.step += 1;
        let (b1, b2) = (R::lit(self.cfg.beta1), R::lit(self.cfg.beta2));
        let c1 = R::one() - b1.powi(self.step);
        let c2 = R::one() - b2.powi(self.step);
        let (lr, eps) = (R::lit(self.cfg.lr), R::lit(self.cfg.eps));
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = b1 * *mi + (R::one() - b1) * gi;
                *vi = b2 * *vi + (R::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[x]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![scalar(0.75)];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            opt.step(p.iter_mut(), &[vec![0.0]]).unwrap();
        }
        assert_eq!(p[0].data(), &[0.75]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g = 1 and v̂ = g² = 1 after bias correction, so Δ = lr / (1 + eps).
        let mut p = vec![scalar(0.0)];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(p.iter_mut(), &[vec![1.0]]).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn minimises_quadratic_bowl() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut p = vec![scalar(1.0)];
        let mut opt = Adam::new(cfg, &p);
        for _ in 0..500 {
            let x = p[0].data()[0];
            opt.step(p.iter_mut(), &[vec![2.0 * x]]).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2, "{}", p[0].data()[0]);
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut p = vec![scalar(0.0)];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert!(opt.step(p.iter_mut(), &[vec![1.0, 2.0]]).is_err());
        let mut q = [Tensor::<f64>::zeros(&[2]).unwrap()];
        assert!(opt.step(q.iter_mut(), &[vec![1.0, 2.0]]).is_err());
    }
}
