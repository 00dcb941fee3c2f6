use super::{cross_entropy_loss, Gradients, Mode, MlpModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Gradients below this magnitude are compared in absolute terms; central
/// differences cannot resolve them more finely in double precision.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn train_loss(model: &MlpModel, x: &Matrix, y: &[usize], mask_seed: u64) -> Result<f64> {
    let (logits, _) = model.forward(x, Mode::Train, mask_seed)?;
    Ok(cross_entropy_loss(&logits, y)?.0)
}

/// Analytic train-mode gradients of the mean cross-entropy.
pub fn analytic_gradients(model: &MlpModel, x: &Matrix, y: &[usize], mask_seed: u64) -> Result<Gradients> {
    let (logits, cache) = model.forward(x, Mode::Train, mask_seed)?;
    let (_, dlogits) = cross_entropy_loss(&logits, y)?;
    Ok(model.backward(&dlogits, &cache))
}

/// Compares backpropagated gradients with central differences on every
/// trainable parameter, using train-mode batchnorm and a fixed dropout mask
/// (`mask_seed`). Returns the worst [`relative_error`].
pub fn grad_check(model: &MlpModel, x: &Matrix, y: &[usize], epsilon: f64, mask_seed: u64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid("epsilon must lie in [1e-7, 1e-3]"));
    }
    let analytic = analytic_gradients(model, x, y, mask_seed)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.tensors.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + epsilon;
            let plus = train_loss(&probe, x, y, mask_seed)?;
            probe.tensors_mut()[t][i] = orig - epsilon;
            let minus = train_loss(&probe, x, y, mask_seed)?;
            probe.tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad[i], numeric));
        }
    }
    Ok(worst)
}
