use super::ParamStore;

/// Adam with bias correction. Moments are created lazily on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.first.len() != store.len() {
            self.first = store.blocks().iter().map(|b| vec![0.0; b.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((block, m), v) in store.blocks_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let values = block.value.as_mut_slice();
            let grads = block.grad.as_slice();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Role};

    fn scalar_store(v: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("x", Role::Shared, Matrix::row_vector(&[v]));
        store
    }

    #[test]
    fn zero_gradient_first_step_is_a_no_op() {
        let mut store = scalar_store(1.25);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        assert_eq!(store.blocks()[0].value.as_slice(), &[1.25]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after bias correction, so |Δ| = lr·|g|/(|g|+ε)
        for &g in &[0.003, -2.0, 40.0] {
            let mut store = scalar_store(0.0);
            store.blocks_mut()[0].grad.as_mut_slice()[0] = g;
            let mut adam = Adam::new(1e-3);
            adam.step(&mut store);
            let moved = store.blocks()[0].value.as_slice()[0];
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "g={g}: {moved} vs {expected}");
            assert!((moved.abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn step_zeroes_gradients() {
        let mut store = scalar_store(0.0);
        store.blocks_mut()[0].grad.as_mut_slice()[0] = 1.0;
        Adam::new(0.1).step(&mut store);
        assert_eq!(store.blocks()[0].grad.as_slice(), &[0.0]);
    }
}
