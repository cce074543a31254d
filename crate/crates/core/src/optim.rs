//! Adam optimizer state for a single flat parameter vector.

/// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Multiply the learning rate (step decay schedules).
    pub fn scale_lr(&mut self, factor: f64) {
        self.lr *= factor;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One update step in place. `grad` must match the parameter length.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // f(x) = (x - 3)^2
        let mut x = vec![0.0];
        let mut opt = Adam::new(0.1, 1);
        for _ in 0..500 {
            let g = 2.0 * (x[0] - 3.0);
            opt.step(&mut x, &[g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn zero_gradient_means_zero_step() {
        let mut x = vec![1.25];
        let mut opt = Adam::new(0.01, 1);
        opt.step(&mut x, &[0.0]);
        assert_eq!(x[0], 1.25);
    }
}
