mod common;

use common::fid_oracle::{closed_form, draws, gaussian_pair, psd, random_matrix};
use jiehua_core::fid::{fid, fit_gaussian, matrix_sqrt_psd, FeatureExtractor, GaussianStats};
use jiehua_core::tensor::Rng;
use jiehua_core::vision::{synth_images, Style};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn matches_closed_form_for_known_gaussians() {
    let mut rng = Rng::new(0xF1D);
    let d = 8;
    for trial in 0..3 {
        let (m1, s1, m2, s2) = gaussian_pair(d, &mut rng);
        let expected = closed_form(&m1, &s1, &m2, &s2);
        let a = fit_gaussian(&draws(&m1, &s1, 10_000, &mut rng)).unwrap();
        let b = fit_gaussian(&draws(&m2, &s2, 10_000, &mut rng)).unwrap();
        let got = fid(&a, &b).unwrap();
        let rel = (got - expected).abs() / expected;
        assert!(
            rel < 0.05,
            "trial {trial}: fid {got} vs closed form {expected}"
        );

        // The moments themselves, within 5% Frobenius.
        let err = (&a.sigma - &s1).norm() / s1.norm();
        assert!(err < 0.05, "covariance error {err}");
        let exact = GaussianStats {
            n: 10_000,
            mu: m1.clone(),
            sigma: s1.clone(),
        };
        let other = GaussianStats {
            n: 10_000,
            mu: m2.clone(),
            sigma: s2.clone(),
        };
        let on_true = fid(&exact, &other).unwrap();
        assert!((on_true - expected).abs() < 1e-6 * (1.0 + expected));
    }
}

#[test]
fn one_dimensional_closed_form() {
    let stats = |m: f64, v: f64| GaussianStats {
        n: 2,
        mu: DVector::from_element(1, m),
        sigma: DMatrix::from_element(1, 1, v),
    };
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let (m1, m2) = (
            rng.uniform_range(-5.0, 5.0) as f64,
            rng.uniform_range(-5.0, 5.0) as f64,
        );
        let (s1, s2) = (
            rng.uniform_range(0.0, 3.0) as f64,
            rng.uniform_range(0.0, 3.0) as f64,
        );
        let got = fid(&stats(m1, s1 * s1), &stats(m2, s2 * s2)).unwrap();
        let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

#[test]
fn sqrt_reconstruction_on_a_thousand_matrices() {
    let mut rng = Rng::new(0x5917);
    for i in 0..1000 {
        let d = 1 + i % 8;
        // Mix full-rank and rank-deficient factors.
        let rows = 1 + rng.below(d + 2);
        let a = psd(&random_matrix(rows, d, &mut rng)) * (1.0 + rng.uniform_range(0.0, 9.0) as f64);
        let r = matrix_sqrt_psd(&a).unwrap();
        let err = (&r * &r - &a).norm();
        assert!(err <= 1e-4 * (1.0 + a.norm()), "case {i}: error {err}");
        assert!((&r - r.transpose()).abs().max() < 1e-9);
    }
}

fn stats_strategy() -> impl Strategy<Value = (GaussianStats, GaussianStats)> {
    (1usize..6, any::<u64>()).prop_map(|(d, seed)| {
        let mut rng = Rng::new(seed);
        let mut one = || {
            let n = d + 2 + rng.below(20);
            let x = random_matrix(n, d, &mut rng) * (1.0 + rng.uniform_range(0.0, 3.0) as f64);
            fit_gaussian(&x).unwrap()
        };
        (one(), one())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fid_is_a_symmetric_nonnegative_divergence((a, b) in stats_strategy()) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()), "{} vs {}", ab, ba);
        prop_assert!(fid(&a, &a).unwrap().abs() <= 1e-9 * (1.0 + a.sigma.trace()));
    }

    #[test]
    fn shared_covariance_leaves_the_mean_term((a, _b) in stats_strategy(), shift in -3.0f64..3.0) {
        let mut moved = a.clone();
        moved.mu.add_scalar_mut(shift);
        let expect = shift * shift * a.mu.len() as f64;
        let got = fid(&a, &moved).unwrap();
        prop_assert!((got - expect).abs() <= 1e-6 * (1.0 + expect), "{} vs {}", got, expect);
    }

    #[test]
    fn fitted_covariance_is_symmetric_psd(seed in any::<u64>(), n in 2usize..40, d in 1usize..8) {
        let mut rng = Rng::new(seed);
        let s = fit_gaussian(&random_matrix(n, d, &mut rng)).unwrap();
        prop_assert_eq!(&s.sigma, &s.sigma.transpose());
        let min = s.sigma.clone().symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-6, "eigenvalue {}", min);
    }
}

#[test]
fn asymmetric_input_is_rejected() {
    let mut a = DMatrix::<f64>::identity(3, 3);
    a[(0, 2)] = 0.1;
    assert!(matrix_sqrt_psd(&a).is_err());
}

#[test]
fn extractor_separates_the_synthetic_styles() {
    let mut rng = Rng::new(21);
    let ruled = synth_images(Style::Ruled, 12, 64, &mut rng);
    let wash = synth_images(Style::Wash, 12, 64, &mut rng);
    let ex = FeatureExtractor::default();
    let fr = ex.extract(&ruled).unwrap();
    let fw = ex.extract(&wash).unwrap();
    let dist =
        |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| (a.row(i) - b.row(j)).norm();
    let mut within = Vec::new();
    let mut across = Vec::new();
    for i in 0..12 {
        for j in 0..12 {
            across.push(dist(&fr, i, &fw, j));
            if i < j {
                within.push(dist(&fr, i, &fr, j));
                within.push(dist(&fw, i, &fw, j));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&across) > mean(&within),
        "across {} within {}",
        mean(&across),
        mean(&within)
    );

    // The whole chain is a pure function of (seed, inputs).
    let again = FeatureExtractor::default().extract(&ruled).unwrap();
    assert_eq!(fr, again);
    let s1 = fit_gaussian(&fr).unwrap();
    let s2 = fit_gaussian(&fw).unwrap();
    assert_eq!(
        fid(&s1, &s2).unwrap().to_bits(),
        fid(&s1, &s2).unwrap().to_bits()
    );
}
