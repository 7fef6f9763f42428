//! Closed-form Fréchet distance between Gaussians, computed without the
//! library's symmetric square root.

use jiehua_core::tensor::Rng;
use nalgebra::{DMatrix, DVector};

pub fn psd(b: &DMatrix<f64>) -> DMatrix<f64> {
    b.transpose() * b
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0) as f64)
}

/// Trace of sqrt(S1·S2) from the eigenvalues of the (non-symmetric)
/// product, which are real and non-negative for PSD factors.
pub fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    (s1 * s2)
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re.max(0.0).sqrt())
        .sum()
}

pub fn closed_form(
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    m2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> f64 {
    (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * trace_sqrt_product(s1, s2)
}

/// `n` rows drawn from N(m, s).
pub fn draws(m: &DVector<f64>, s: &DMatrix<f64>, n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let l = s.clone().cholesky().expect("positive definite").l();
    let d = m.len();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.normal() as f64);
        let x = m + &l * z;
        out.set_row(i, &x.transpose());
    }
    out
}

/// A random well-conditioned Gaussian pair in `d` dimensions.
pub fn gaussian_pair(
    d: usize,
    rng: &mut Rng,
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let s1 = psd(&random_matrix(d, d, rng)) + DMatrix::identity(d, d) * 0.5;
    let s2 = psd(&random_matrix(d, d, rng)) * 2.0 + DMatrix::identity(d, d) * 0.2;
    let m1 = DVector::from_fn(d, |_, _| rng.uniform_range(-1.0, 1.0) as f64);
    let m2 = DVector::from_fn(d, |_, _| rng.uniform_range(-1.0, 1.0) as f64);
    (m1, s1, m2, s2)
}
