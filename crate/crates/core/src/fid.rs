//! Fréchet distance between Gaussian fits of image features.
//!
//! Features come from a fixed, randomly initialized conv net whose weights
//! are generated from [`EXTRACTOR_SEED`]. Scores are only comparable with
//! other scores from the same extractor.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::nn::{stack, Conv2d};
use crate::tensor::{Conv2dSpec, ParamStore, Rng, Tape};
use crate::vision::Image;

pub const EXTRACTOR_SEED: u64 = 0x5EED_F1D0;
pub const FEATURE_DIM: usize = 64;
const EXTRACT_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    seed: u64,
    store: ParamStore,
    convs: Vec<Conv2d>,
    dim: usize,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED, FEATURE_DIM)
    }
}

impl FeatureExtractor {
    /// Three stride-2 3×3 convolutions (3 → d/4 → d/2 → d) with ReLU, then a
    /// global average pool.
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(
            dim >= 4 && dim % 4 == 0,
            "feature dim must be a positive multiple of 4"
        );
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let widths = [3, dim / 4, dim / 2, dim];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Conv2d::new(
                    &mut store,
                    &format!("fid.conv{i}"),
                    w[0],
                    w[1],
                    3,
                    Conv2dSpec::new(2, 1),
                    true,
                    &mut rng,
                )
            })
            .collect();
        store.set_locked_all(true);
        Self {
            seed,
            store,
            convs,
            dim,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One feature row per image, in input order.
    pub fn extract(&self, images: &[Image]) -> Result<DMatrix<f64>> {
        let Some(first) = images.first() else {
            return Err(Error::InvalidArgument(
                "no images to extract features from".into(),
            ));
        };
        let (h, w) = (first.height(), first.width());
        if let Some(bad) = images.iter().find(|im| (im.height(), im.width()) != (h, w)) {
            return Err(Error::shape(
                "extract_features",
                format!(
                    "mixed resolutions {h}x{w} and {}x{}",
                    bad.height(),
                    bad.width()
                ),
            ));
        }
        let mut out = DMatrix::zeros(images.len(), self.dim);
        for (chunk_idx, chunk) in images.chunks(EXTRACT_BATCH).enumerate() {
            let parts: Vec<_> = chunk.iter().map(|im| im.to_rgb().to_signed_chw()).collect();
            let tape = Tape::no_grad();
            let mut x = tape.constant(stack(&parts)?);
            for conv in &self.convs {
                x = tape.relu(&conv.forward(&tape, &self.store, &x)?)?;
            }
            let s = x.shape().to_vec();
            let area = s[2] * s[3];
            let data = x.data();
            for b in 0..s[0] {
                for c in 0..s[1] {
                    let base = (b * s[1] + c) * area;
                    let sum: f64 = data[base..base + area].iter().map(|&v| v as f64).sum();
                    out[(chunk_idx * EXTRACT_BATCH + b, c)] = sum / area as f64;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub n: usize,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Column means and unbiased covariance of an n×d feature matrix.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for a covariance, got {n}"
        )));
    }
    let mu: DVector<f64> = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
    sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(GaussianStats { n, mu, sigma })
}

/// Q·diag(√max(λ, 0))·Qᵀ for a symmetric positive semidefinite matrix.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::shape(
            "matrix_sqrt_psd",
            format!("{}x{} is not square", a.nrows(), a.ncols()),
        ));
    }
    let asym = (a - a.transpose()).abs().max();
    if asym > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "matrix is not symmetric (max |A - Aᵀ| = {asym:e})"
        )));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// ‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1^½ Σ2 Σ1^½)^½), clamped at 0.
pub fn fid(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.mu.len() != s2.mu.len() {
        return Err(Error::shape(
            "fid",
            format!("dims {} vs {}", s1.mu.len(), s2.mu.len()),
        ));
    }
    let mean_term = (&s1.mu - &s2.mu).norm_squared();
    if s1.sigma == s2.sigma {
        // √(ΣΣ) = Σ, so the covariance term vanishes; skip the rounding.
        return Ok(mean_term);
    }
    let r1 = matrix_sqrt_psd(&s1.sigma)?;
    let m = &r1 * &s2.sigma * &r1;
    let m = (&m + m.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&m)?.trace();
    Ok((mean_term + s1.sigma.trace() + s2.sigma.trace() - 2.0 * cross).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Full Fréchet distance against a reference set of several images.
    Set,
    /// One random reference image per repeat; only the mean term is used.
    SingleImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub repeats: usize,
    pub reference_size: usize,
    pub mode: ReferenceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 10,
            reference_size: 64,
            mode: ReferenceMode::Set,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub extractor_seed: u64,
    pub generated_per_repeat: usize,
    pub reference_per_repeat: usize,
    pub mode: ReferenceMode,
}

impl fmt::Display for FidReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            ReferenceMode::Set => "set",
            ReferenceMode::SingleImage => "single_image",
        };
        writeln!(f, "# extractor_seed {}", self.extractor_seed)?;
        writeln!(f, "# generated_per_repeat {}", self.generated_per_repeat)?;
        writeln!(f, "# reference_per_repeat {}", self.reference_per_repeat)?;
        writeln!(f, "# reference_mode {mode}")?;
        for s in &self.scores {
            writeln!(f, "{s}")?;
        }
        writeln!(f, "mean {}", self.mean)
    }
}

/// Repeats: generate a batch, draw a reference subset, score. The callback
/// receives the repeat index and the shared RNG.
pub fn eval_protocol(
    generate: &mut dyn FnMut(usize, &mut Rng) -> Result<Vec<Image>>,
    reference: &[Image],
    extractor: &FeatureExtractor,
    config: &EvalConfig,
    rng: &mut Rng,
) -> Result<FidReport> {
    if config.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let wanted = match config.mode {
        ReferenceMode::Set => config.reference_size.min(reference.len()),
        ReferenceMode::SingleImage => 1,
    };
    if reference.is_empty() || (config.mode == ReferenceMode::Set && wanted < 2) {
        return Err(Error::InvalidArgument(format!(
            "reference pool of {} images is too small",
            reference.len()
        )));
    }
    let mut scores = Vec::with_capacity(config.repeats);
    let mut generated = 0;
    for repeat in 0..config.repeats {
        let wrap = |source| Error::Repeat {
            repeat,
            source: Box::new(source),
        };
        let images = generate(repeat, rng).map_err(wrap)?;
        generated = images.len();
        let mut order: Vec<usize> = (0..reference.len()).collect();
        rng.shuffle(&mut order);
        let refs: Vec<Image> = order[..wanted]
            .iter()
            .map(|&i| reference[i].clone())
            .collect();
        let score = (|| {
            let gen_stats = fit_gaussian(&extractor.extract(&images)?)?;
            match config.mode {
                ReferenceMode::Set => fid(&gen_stats, &fit_gaussian(&extractor.extract(&refs)?)?),
                ReferenceMode::SingleImage => {
                    let f = extractor.extract(&refs)?;
                    Ok((&gen_stats.mu - f.row(0).transpose()).norm_squared())
                }
            }
        })()
        .map_err(wrap)?;
        scores.push(score);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(FidReport {
        scores,
        mean,
        extractor_seed: extractor.seed(),
        generated_per_repeat: generated,
        reference_per_repeat: wanted,
        mode: config.mode,
    })
}
