//! Loss terms of the domain-adversarial objective, as plain functions on
//! probability vectors and as graph nodes for training.

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp used before every logarithm.
pub const DEFAULT_PROB_EPS: f64 = 1e-7;

/// `−Σ_k y_k log p_k` with `p` clamped to `[eps, 1 − eps]`.
pub fn cross_entropy<T: Scalar>(probs: &[T], one_hot: &[T], eps: T) -> T {
    assert_eq!(probs.len(), one_hot.len());
    let hi = T::one() - eps;
    -probs
        .iter()
        .zip(one_hot)
        .map(|(&p, &y)| y * p.max(eps).min(hi).ln())
        .sum::<T>()
}

/// Activity cross-entropy.
pub fn activity_loss<T: Scalar>(probs: &[T], one_hot: &[T], eps: T) -> T {
    cross_entropy(probs, one_hot, eps)
}

/// Domain cross-entropy.
pub fn domain_loss<T: Scalar>(probs: &[T], one_hot: &[T], eps: T) -> T {
    cross_entropy(probs, one_hot, eps)
}

/// Confidence control: `−Σ_k [log p_k + log(1 − p_k)]`, clamped.
pub fn ccc_loss<T: Scalar>(probs: &[T], eps: T) -> T {
    let hi = T::one() - eps;
    -probs
        .iter()
        .map(|&p| {
            let p = p.max(eps).min(hi);
            p.ln() + (T::one() - p).ln()
        })
        .sum::<T>()
}

/// Adversarial strength for training progress `p ∈ [0, 1]`:
/// `(2 / (1 + e^{−10p}) − 1) · γ`.
pub fn lambda_schedule<T: Scalar>(progress: T, gamma: T) -> T {
    let two = T::of(2.0);
    (two / (T::one() + (T::of(-10.0) * progress).exp()) - T::one()) * gamma
}

/// `L_a + α·L_d + β·L_c`
pub fn total_loss<T: Scalar>(activity: T, domain: T, ccc: T, alpha: T, beta: T) -> T {
    activity + alpha * domain + beta * ccc
}

pub fn one_hot<T: Scalar>(index: usize, n: usize) -> Vec<T> {
    let mut v = vec![T::zero(); n];
    v[index] = T::one();
    v
}

/// Cross-entropy node for a `1 × n` probability row and a target class.
pub fn cross_entropy_node<T: Scalar>(g: &mut Graph<T>, probs: Var, target: usize, eps: T) -> Var {
    let n = g.value(probs).cols();
    let clamped = g.clamp(probs, eps, T::one() - eps);
    let logp = g.ln(clamped);
    let y = g.constant(Tensor::row_vector(one_hot(target, n)));
    let picked = g.mul(logp, y);
    let s = g.sum(picked);
    g.scale(s, -T::one())
}

/// Confidence-control node for a `1 × n` probability row.
pub fn ccc_node<T: Scalar>(g: &mut Graph<T>, probs: Var, eps: T) -> Var {
    let clamped = g.clamp(probs, eps, T::one() - eps);
    let logp = g.ln(clamped);
    let complement = g.affine(clamped, -T::one(), T::one());
    let log_q = g.ln(complement);
    let both = g.add(logp, log_q);
    let s = g.sum(both);
    g.scale(s, -T::one())
}
