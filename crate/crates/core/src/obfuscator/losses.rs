use crate::error::Result;
use crate::math::cosine_with_grads;

/// `1 + cos(z, z̃)`: 0 when `z̃ = −z`, 2 when `z̃ = z`.
pub fn loss_deid(z: &[f64], z_tilde: &[f64]) -> Result<f64> {
    deid_with_grads(z, z_tilde).map(|(l, _, _)| l)
}

/// Loss value with gradients with respect to `z` and `z̃`.
pub fn deid_with_grads(z: &[f64], z_tilde: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (c, gz, gzt) = cosine_with_grads(z, z_tilde)?;
    Ok((1.0 + c, gz, gzt))
}

/// KL divergence of `N(μ, e^logvar)` from the standard normal.
pub fn loss_kld(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Gradients of [`loss_kld`] with respect to `μ` and `logvar`.
pub fn kld_grads(mu: &[f64], logvar: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (mu.to_vec(), logvar.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect())
}
