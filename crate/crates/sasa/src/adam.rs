//! Adam with bias correction, operating on flat `f64` parameter arrays.

/// Moment estimates and hyperparameters for one optimizer instance.
///
/// One pair of moment arrays per parameter array, in registration order;
/// `step_count` increases by exactly one per [`AdamState::step`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over all parameter arrays. `params[i]` and `grads[i]`
    /// must match the sizes given at construction; grads are consumed
    /// (zeroed) so a stale buffer can never be re-applied.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &mut [Vec<f64>]) {
        assert_eq!(params.len(), self.first_moment.len(), "param array count changed");
        assert_eq!(grads.len(), params.len(), "grad array count mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        for (i, param) in params.iter_mut().enumerate() {
            let grad = &mut grads[i];
            assert_eq!(param.len(), grad.len(), "param/grad length mismatch at {i}");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..param.len() {
                let g = grad[j];
                assert!(g.is_finite(), "non-finite gradient in array {i} at {j}");
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                param[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                assert!(param[j].is_finite(), "non-finite parameter after update");
                grad[j] = 0.0;
            }
        }
    }
}
