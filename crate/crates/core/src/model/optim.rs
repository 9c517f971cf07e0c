use crate::error::{ensure_shape, RcfError, Result};

/// Adaptive moment estimation with coupled L2 weight decay and polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub min_lr: f64,
    pub power: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, min_lr: f64, power: f64, total_steps: usize, weight_decay: f64) -> Self {
        Self {
            lr,
            min_lr,
            power,
            total_steps,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Learning rate for the step about to be taken. A zero base rate stays zero.
    pub fn current_lr(&self, schedule_step: usize) -> f64 {
        if self.lr == 0.0 {
            return 0.0;
        }
        let total = self.total_steps.max(1) as f64;
        let frac = (1.0 - schedule_step as f64 / total).max(0.0);
        (self.lr - self.min_lr) * frac.powf(self.power) + self.min_lr
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        ensure_shape!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            "optimizer tracks {} parameters, got {} values and {} grads",
            self.m.len(),
            params.len(),
            grads.len()
        );
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(RcfError::Divergence(format!("non-finite gradient at optimizer step {}", self.step)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if lr != 0.0 {
                params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `ema <- m * ema + (1 - m) * params`, elementwise.
pub fn ema_update(ema: &mut [f64], params: &[f64], momentum: f64) -> Result<()> {
    ensure_shape!(ema.len() == params.len(), "EMA holds {} values, params {}", ema.len(), params.len());
    if !(0.0..=1.0).contains(&momentum) {
        return Err(RcfError::Value(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = momentum * *e + (1.0 - momentum) * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_edge_momenta() {
        let mut e = vec![2.0, -1.0];
        ema_update(&mut e, &[4.0, 5.0], 1.0).unwrap();
        assert_eq!(e, vec![2.0, -1.0]);
        ema_update(&mut e, &[4.0, 5.0], 0.0).unwrap();
        assert_eq!(e, vec![4.0, 5.0]);
        let mut e = vec![2.0];
        ema_update(&mut e, &[4.0], 0.5).unwrap();
        assert_eq!(e, vec![3.0]);
        assert!(ema_update(&mut e, &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn poly_schedule_endpoints() {
        let a = Adam::new(1, 1e-3, 1e-6, 0.9, 100, 0.0);
        assert!((a.current_lr(0) - 1e-3).abs() < 1e-15);
        assert!((a.current_lr(100) - 1e-6).abs() < 1e-15);
        assert!(a.current_lr(50) < 1e-3 && a.current_lr(50) > 1e-6);
        assert_eq!(Adam::new(1, 0.0, 1e-6, 0.9, 10, 0.0).current_lr(3), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2, 0.1, 0.0, 0.9, 10, 0.0);
        let mut p = vec![1.0, 1.0];
        a.update(&mut p, &[3.0, -0.5], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut a = Adam::new(1, 0.1, 0.0, 0.9, 10, 0.0);
        assert!(matches!(a.update(&mut [0.0], &[f64::NAN], 0.1), Err(RcfError::Divergence(_))));
    }
}
