/// Adam over one flat parameter buffer.
///
/// Entries whose gradient has never been nonzero have zero moments and would
/// not move under a dense update, so only entries touched at least once are
/// visited. The result is bitwise the dense update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    active: Vec<bool>,
    active_list: Vec<usize>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            active: vec![false; len],
            active_list: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `touched` lists the entries where `grad` may be nonzero; `None` means all.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], touched: Option<&[usize]>) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        match touched {
            Some(idx) => {
                for &i in idx {
                    if !self.active[i] && grad[i] != 0.0 {
                        self.active[i] = true;
                        self.active_list.push(i);
                    }
                }
            }
            None => {
                for (i, g) in grad.iter().enumerate() {
                    if !self.active[i] && *g != 0.0 {
                        self.active[i] = true;
                        self.active_list.push(i);
                    }
                }
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for &i in &self.active_list {
            let g = grad[i];
            let m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dense_reference(params: &mut [f64], grads: &[Vec<f64>], lr: f64, eps: f64) {
        let (mut m, mut v) = (vec![0.0; params.len()], vec![0.0; params.len()]);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            for i in 0..params.len() {
                m[i] = 0.9 * m[i] + (1.0 - 0.9) * g[i];
                v[i] = 0.999 * v[i] + (1.0 - 0.999) * g[i] * g[i];
                params[i] -= lr * (m[i] / (1.0 - 0.9f64.powi(t))) / ((v[i] / (1.0 - 0.999f64.powi(t))).sqrt() + eps);
            }
        }
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut adam = Adam::new(3, 0.01, 1e-15);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.5, -2.0, 0.0], None);
        assert!((p[0] - 0.99).abs() < 1e-12);
        assert!((p[1] - 2.01).abs() < 1e-12);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::new(4, 0.1, 1e-8);
        let mut p = vec![0.3, -1.0, 2.0, 5.0];
        adam.step(&mut p, &[0.0; 4], None);
        assert_eq!(p, vec![0.3, -1.0, 2.0, 5.0]);
    }

    #[test]
    fn sparse_updates_equal_dense_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40;
        let init: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = Vec::new();
        let mut touched = Vec::new();
        for _ in 0..30 {
            let mut g = vec![0.0; n];
            let mut t = Vec::new();
            for i in 0..n {
                if rng.random_bool(0.2) {
                    g[i] = rng.random_range(-1.0..1.0);
                    t.push(i);
                }
            }
            grads.push(g);
            touched.push(t);
        }
        let mut dense = init.clone();
        dense_reference(&mut dense, &grads, 0.01, 1e-8);
        let mut sparse = init;
        let mut adam = Adam::new(n, 0.01, 1e-8);
        for (g, t) in grads.iter().zip(&touched) {
            adam.step(&mut sparse, g, Some(t));
        }
        assert_eq!(sparse, dense);
        assert_eq!(adam.steps(), 30);
    }
}
