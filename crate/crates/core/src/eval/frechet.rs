use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MIN_SET_SIZE: usize = 32;

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mean = DVector::zeros(dim);
    for f in set {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in set {
        let d = DVector::from_column_slice(f) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

/// Principal square root of a symmetric matrix, negative eigenvalues clamped to zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The cross term uses `tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`, which equals
/// `tr((Σa Σb)^{1/2})` and only needs symmetric eigendecompositions.
pub fn frechet_proxy(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < MIN_SET_SIZE || b.len() < MIN_SET_SIZE {
        return Err(Error::InvalidInput(format!(
            "feature sets need at least {MIN_SET_SIZE} entries (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|f| f.len() != dim) {
        return Err(Error::InvalidInput("feature vectors differ in dimension".into()));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    let (ma, ca) = moments(a, dim);
    let (mb, cb) = moments(b, dim);
    let root_a = sym_sqrt(&ca);
    let cross = trace_sqrt(&(&root_a * &cb * &root_a));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};

    fn gaussian_set(n: usize, dim: usize, shift: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| gaussian_vec(&mut rng, dim).iter().zip(shift).map(|(v, s)| v + s).collect())
            .collect()
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = gaussian_set(64, 5, &[0.0; 5], 1);
        assert!(frechet_proxy(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn univariate_unit_shift() {
        let a = gaussian_set(100_000, 1, &[0.0], 2);
        let b = gaussian_set(100_000, 1, &[1.0], 3);
        let d = frechet_proxy(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 0.05, "{d}");
    }

    #[test]
    fn mean_shift_vector() {
        let v = [0.5, -1.0, 2.0];
        let base = gaussian_set(20_000, 3, &[0.0; 3], 4);
        let shifted: Vec<Vec<f64>> = base.iter().map(|f| f.iter().zip(&v).map(|(x, s)| x + s).collect()).collect();
        let d = frechet_proxy(&base, &shifted).unwrap();
        assert!((d - 5.25).abs() < 1e-8, "{d}");
        let other = gaussian_set(20_000, 3, &v, 5);
        assert!((frechet_proxy(&base, &other).unwrap() - 5.25).abs() < 0.1);
    }

    #[test]
    fn symmetric() {
        let a = gaussian_set(50, 4, &[0.0; 4], 6);
        let b: Vec<Vec<f64>> = gaussian_set(50, 4, &[1.0, 0.0, 0.0, 2.0], 7)
            .into_iter()
            .map(|f| f.iter().enumerate().map(|(i, v)| v * (1.0 + i as f64)).collect())
            .collect();
        let ab = frechet_proxy(&a, &b).unwrap();
        let ba = frechet_proxy(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} {ba}");
    }

    #[test]
    fn too_few_features() {
        let a = gaussian_set(31, 2, &[0.0; 2], 8);
        assert!(frechet_proxy(&a, &a).is_err());
    }
}
