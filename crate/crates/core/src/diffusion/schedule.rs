use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear beta schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// The usual 1e-4 → 0.02 over 1000 steps, rescaled to `steps` so the
    /// total noise injected stays comparable.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "diffusion needs at least one step".into(),
            ));
        }
        let k = 1000.0 / steps as f64;
        make_schedule(steps, (1e-4 * k).min(0.999), (0.02 * k).min(0.999))
    }

    /// √ᾱ_t and √(1−ᾱ_t).
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "diffusion needs at least one step".into(),
        ));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_diffuse",
            format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape()),
        ));
    }
    if t >= schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside schedule of {} steps",
            schedule.steps()
        )));
    }
    let (a, b) = schedule.coefficients(t);
    let (a, b) = (a as f32, b as f32);
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars, vec![0.5]);
    }

    #[test]
    fn default_fifty_steps() {
        let s = NoiseSchedule::scaled_default(50).unwrap();
        // oracle: cumulative product recomputed independently
        let mut prod = 1.0;
        for i in 0..50 {
            let beta = 0.002 + (0.4 - 0.002) * i as f64 / 49.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bars[i] - prod).abs() < 1e-12);
        }
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars[0] > 0.99);
        assert!(*s.alpha_bars.last().unwrap() < 0.05);
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.1).is_err());
    }

    #[test]
    fn limits_of_forward_process() {
        let mut rng = Rng::new(3);
        let z0 = Tensor::randn([2, 3], &mut rng);
        let eps = Tensor::randn([2, 3], &mut rng);
        let clean = NoiseSchedule {
            betas: vec![0.0],
            alphas: vec![1.0],
            alpha_bars: vec![1.0],
        };
        assert_eq!(forward_diffuse(&z0, 0, &eps, &clean).unwrap(), z0);
        let noise = NoiseSchedule {
            betas: vec![1.0],
            alphas: vec![0.0],
            alpha_bars: vec![0.0],
        };
        assert_eq!(forward_diffuse(&z0, 0, &eps, &noise).unwrap(), eps);
        assert!(forward_diffuse(&z0, 0, &Tensor::zeros([3, 2]), &noise).is_err());
    }

    #[test]
    fn noise_variance_matches_schedule() {
        let s = NoiseSchedule::scaled_default(50).unwrap();
        let t = 20;
        let mut rng = Rng::new(8);
        let eps = Tensor::randn([10_000], &mut rng);
        let zt = forward_diffuse(&Tensor::zeros([10_000]), t, &eps, &s).unwrap();
        let mean = zt.data().iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        let var = zt
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / 9_999.0;
        let expected = 1.0 - s.alpha_bars[t];
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }
}
