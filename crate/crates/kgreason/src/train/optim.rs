//! Adam optimizer and the warmup/decay learning-rate schedule.

use crate::model::{ModelParams, Real};

/// Adam moment estimates, one slot per parameter, in the same fixed tensor
/// order `ModelParams::flat_tensors_mut` walks.
pub struct AdamState<F: Real> {
    m: ModelParams<F>,
    v: ModelParams<F>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update with bias-corrected moments. `grads` is read-only in
    /// spirit; it is only borrowed mutably for the flat view.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &mut ModelParams<F>, lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.eps);

        let p = params.flat_tensors_mut();
        let g = grads.flat_tensors_mut();
        let m = self.m.flat_tensors_mut();
        let v = self.v.flat_tensors_mut();
        assert_eq!(p.len(), g.len());
        assert_eq!(p.len(), m.len());
        assert_eq!(p.len(), v.len());
        for (((pt, gt), mt), vt) in p.into_iter().zip(g).zip(m).zip(v) {
            assert_eq!(pt.len(), gt.len());
            for i in 0..pt.len() {
                mt[i] = b1 * mt[i] + (one - b1) * gt[i];
                vt[i] = b2 * vt[i] + (one - b2) * gt[i] * gt[i];
                let mhat = mt[i] / corr1;
                let vhat = vt[i] / corr2;
                pt[i] = pt[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup over the first tenth of training, then linear decay toward
/// zero. The peak value is `base`, reached at the end of warmup.
pub fn schedule_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    assert!(total_steps > 0, "schedule needs at least one step");
    assert!(step < total_steps, "step beyond schedule");
    let warmup = (total_steps / 10).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 4,
            blocks: 1,
            heads: 2,
            max_len: 8,
            maxout_pieces: 2,
            vocab_size: 6,
            classify_entities: None,
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize sum (p - 0.5)^2; gradient 2(p - 0.5) drives every
        // parameter to 0.5.
        let mut params = ModelParams::<f64>::init(&tiny_config(), 7).unwrap();
        let mut grads = params.zeros_like();
        let mut opt = AdamState::new(&params);
        for _ in 0..800 {
            let p = params.flat_tensors_mut();
            let g = grads.flat_tensors_mut();
            for (pt, gt) in p.into_iter().zip(g) {
                for i in 0..pt.len() {
                    gt[i] = 2.0 * (pt[i] - 0.5);
                }
            }
            opt.step(&mut params, &mut grads, 0.05);
        }
        for t in params.flat_tensors_mut() {
            for &x in t.iter() {
                assert_abs_diff_eq!(x, 0.5, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the very first update is lr * sign(g).
        let mut params = ModelParams::<f64>::zeros(&tiny_config()).unwrap();
        let mut grads = params.zeros_like();
        grads.flat_tensors_mut()[0][0] = 0.3;
        let mut opt = AdamState::new(&params);
        opt.step(&mut params, &mut grads, 0.01);
        assert_abs_diff_eq!(params.flat_tensors_mut()[0][0], -0.01, epsilon = 1e-6);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let base = 1.0;
        let total = 100;
        assert_abs_diff_eq!(schedule_lr(base, 0, total), 0.1);
        assert_abs_diff_eq!(schedule_lr(base, 9, total), 1.0);
        assert_abs_diff_eq!(schedule_lr(base, 10, total), 1.0);
        assert_abs_diff_eq!(schedule_lr(base, 99, total), 1.0 / 90.0);
        let peak = (0..total).map(|s| schedule_lr(base, s, total)).fold(0.0, f64::max);
        assert_abs_diff_eq!(peak, base);
        for s in 0..total {
            assert!(schedule_lr(base, s, total) > 0.0);
        }
    }

    #[test]
    fn short_schedules_stay_positive() {
        for total in 1..12 {
            for s in 0..total {
                let lr = schedule_lr(3e-4, s, total);
                assert!(lr > 0.0 && lr <= 3e-4 + 1e-12);
            }
        }
    }
}
