//! Small vector helpers shared by the losses and metrics, each paired with
//! its gradient where training needs one.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Per-element mean absolute difference.
pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    l1_distance(a, b) / a.len().max(1) as f64
}

/// Gradient of [`mean_abs_diff`] with respect to `a` (subgradient 0 at ties).
pub fn mean_abs_diff_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::NumericValue(format!("cannot normalize vector with norm {n}")));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Backpropagates through `u = t / ‖t‖` given `u`, `‖t‖` and `∂L/∂u`.
pub fn normalize_backward(unit: &[f64], raw_norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_unit);
    unit.iter().zip(grad_unit).map(|(u, g)| (g - u * proj) / raw_norm).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NumericValue("cosine of a zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Returns `cos(a, b)` with its gradients with respect to `a` and `b`.
pub fn cosine_with_grads(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NumericValue("cosine of a zero vector".into()));
    }
    let c = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    Ok((c, ga, gb))
}

pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

pub fn gaussian_vec<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Row-major `(rows × cols)` matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Vec<f64> {
    gaussian_vec(rows * cols, std, rng)
}

pub fn mat_vec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols).map(|row| dot(row, v)).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let a = [0.3, -0.7, 1.1];
        let b = [-0.2, 0.5, 0.4];
        let (_, ga, gb) = cosine_with_grads(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine(&ap, &b).unwrap() - cosine(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b;
            let mut bm = b;
            bp[i] += h;
            bm[i] -= h;
            let fd = (cosine(&a, &bp).unwrap() - cosine(&a, &bm).unwrap()) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let t = [0.4, -1.2, 0.9];
        let w = [0.7, 0.1, -0.3];
        let f = |t: &[f64]| dot(&normalize(t).unwrap(), &w);
        let u = normalize(&t).unwrap();
        let g = normalize_backward(&u, norm(&t), &w);
        let h = 1e-6;
        for i in 0..3 {
            let mut tp = t;
            let mut tm = t;
            tp[i] += h;
            tm[i] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_vectors_are_errors() {
        assert!(normalize(&[0.0, 0.0]).is_err());
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
