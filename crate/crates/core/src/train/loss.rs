use crate::error::{Error, Result};
use crate::nn::model::Prediction;
use crate::scalar::Scalar;
use crate::volume::Mask3D;

/// Mean smooth-L1 over voxels and its gradient with respect to `pred`.
///
/// Per voxel with `e = pred - target`: `0.5 e² / β` when `|e| < β`,
/// otherwise `|e| - 0.5 β`.
pub fn smooth_l1_with_grad<T: Scalar>(pred: &[T], target: &[u8], beta: f64) -> Result<(f64, Vec<T>)> {
    if !(beta > 0.0) {
        return Err(Error::config("smooth_l1_beta", "must be positive"));
    }
    assert_eq!(pred.len(), target.len(), "loss operand length");
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let e = p.as_f64() - t as f64;
            let (l, g) = if e.abs() < beta { (0.5 * e * e / beta, e / beta) } else { (e.abs() - 0.5 * beta, e.signum()) };
            total += l;
            T::from_f64_lossy(g / n)
        })
        .collect();
    Ok((total / n, grad))
}

pub fn smooth_l1_loss<T: Scalar>(pred: &Prediction<T>, target: &Mask3D, beta: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch { expected: target.shape().0, actual: pred.shape().0 });
    }
    Ok(smooth_l1_with_grad(pred.scores.data(), target.data(), beta)?.0)
}
