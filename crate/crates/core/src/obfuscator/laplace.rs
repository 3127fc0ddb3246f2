use rand::Rng;

use crate::error::{Error, Result};

/// Inverse-CDF transform of `u ∈ (−½, ½)` into a `Laplace(0, scale)` draw.
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    if scale == 0.0 || u == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Draws from `Laplace(0, scale)`; scale 0 yields exactly 0.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("Laplace scale must be a nonnegative real, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(0.0);
    }
    // `random` covers [0, 1); u = −½ would map to −∞.
    let u = loop {
        let r: f64 = rng.random();
        if r > 0.0 {
            break r - 0.5;
        }
    };
    Ok(laplace_from_uniform(u, scale))
}

pub fn laplace_vec<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Result<Vec<f64>> {
    (0..dim).map(|_| sample_laplace(scale, rng)).collect()
}
