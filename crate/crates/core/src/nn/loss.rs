use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Probabilities are clamped to `[ε, 1 − ε]` before the logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

/// Binary cross-entropy and its derivative with respect to `p`, both taken at
/// the clamped probability.
pub fn bce_loss(p: f64, y: f64) -> (f64, f64) {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = (p - y) / (p * (1.0 - p));
    (loss, grad)
}

/// Summed BCE over independent sigmoid units.
pub fn bce_vector<T: Scalar>(prediction: &Tensor<T>, target: &[f32]) -> Result<(f64, Tensor<T>)> {
    if prediction.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} units, target {}",
            prediction.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (&p, &y) in prediction.data().iter().zip(target) {
        let (l, g) = bce_loss(p.as_f64(), y as f64);
        total += l;
        grad.push(T::of(g));
    }
    Ok((total, Tensor::new(prediction.shape().to_vec(), grad)?))
}
