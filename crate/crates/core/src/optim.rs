use serde::{Deserialize, Serialize};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// One moment buffer per tensor, sized by `lens`.
    pub fn new(lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "tensor count mismatch");
        assert_eq!(grads.len(), self.m.len(), "tensor count mismatch");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_rest_leaves_params() {
        let mut adam = Adam::new([3]);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.update(vec![&mut p], vec![&[0.0; 3]], 0.1);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut adam = Adam::new([1]);
        let mut p = vec![1.0];
        adam.update(vec![&mut p], vec![&[2.0]], 0.1);
        let (m0, v0) = (adam.first_moments()[0][0], adam.second_moments()[0][0]);
        adam.update(vec![&mut p], vec![&[0.0]], 0.1);
        assert_eq!(adam.first_moments()[0][0], 0.9 * m0);
        assert_eq!(adam.second_moments()[0][0], 0.999 * v0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut adam = Adam::new([2]);
        let mut p = vec![0.3, 0.4];
        for _ in 0..5 {
            adam.update(vec![&mut p], vec![&[1.0, -1.0]], 0.0);
        }
        assert_eq!(p, vec![0.3, 0.4]);
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // f(w) = 3 (w - 1.7)^2, minimum at 1.7.
        let mut adam = Adam::new([1]);
        let mut w = vec![-2.0];
        for step in 0..200 {
            let g = 6.0 * (w[0] - 1.7);
            let lr = 1e-4 + 0.5 * (0.2 - 1e-4) * (1.0 + (std::f64::consts::PI * step as f64 / 199.0).cos());
            adam.update(vec![&mut w], vec![&[g]], lr);
        }
        assert!((w[0] - 1.7).abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * g / (|g| + eps)
        let mut adam = Adam::new([1]);
        let mut w = vec![0.0];
        adam.update(vec![&mut w], vec![&[4.0]], 0.01);
        assert!((w[0] + 0.01).abs() < 1e-9);
    }
}
