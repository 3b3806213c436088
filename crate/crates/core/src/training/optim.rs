use crate::numerics::{Scalar, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(params: &[Tensor<F>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter; `grads` are zeroed afterwards.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &mut [Tensor<F>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let one = F::one();
        let t = self.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let (lr, eps) = (F::c(self.lr), F::c(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter_mut()).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            g.fill(F::zero());
        }
    }
}
