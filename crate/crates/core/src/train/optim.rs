use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: T) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for ((_, p), (g, (m, v))) in params
            .iter_mut()
            .zip(grads.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())))
        {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient descent: `w ← w − lr · g`.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: T) {
    for ((_, p), g) in params.iter_mut().zip(grads) {
        if let Some(g) = g {
            for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * gi;
            }
        }
    }
}
