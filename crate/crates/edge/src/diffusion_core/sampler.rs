use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::predictor::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::error::{EdgeError, Result};

/// Descending timestep subsequence of length `steps` over `[0, t_count)`.
fn timestep_path(t_count: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .rev()
        .map(|k| ((k + 1) * t_count) / steps - 1)
        .collect()
}

/// Conditional ancestral (DDPM-style) sampling from z_T ~ N(0, I).
/// Deterministic given the RNG seed; one latent per condition row.
///
/// Each step re-expresses the update around the implied clean latent
/// x0 = (z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t); when `x0_clamp`
/// is given, x0 is clamped to that range before forming the posterior mean.
/// Clamping keeps small predictors from drifting outside the data range
/// over long chains.
pub fn sample<R: Rng>(
    predictor: &NoisePredictor,
    y: &Array2<f64>,
    schedule: &NoiseSchedule,
    steps: usize,
    latent_hw: (usize, usize),
    x0_clamp: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<Array4<f64>> {
    let t_count = schedule.t_count();
    if steps == 0 || steps > t_count {
        return Err(EdgeError::Config(format!(
            "sampler steps {steps} must be in [1, {t_count}]"
        )));
    }
    let n = y.nrows();
    let c = predictor.cfg.latent_channels;
    let (h, w) = latent_hw;
    let mut z = Array4::from_shape_fn((n, c, h, w), |_| rng.sample::<f64, _>(StandardNormal));

    let path = timestep_path(t_count, steps);
    for (k, &t) in path.iter().enumerate() {
        let ab_t = schedule.alpha_bar[t];
        let ab_prev = if k + 1 < path.len() {
            schedule.alpha_bar[path[k + 1]]
        } else {
            1.0
        };
        let alpha = ab_t / ab_prev;
        let eps_hat = predictor.predict(&z, &vec![t; n], y)?;

        let mut x0 = z.clone();
        x0.scaled_add(-(1.0 - ab_t).sqrt(), &eps_hat);
        x0 /= ab_t.sqrt();
        if let Some((lo, hi)) = x0_clamp {
            x0.mapv_inplace(|v| v.clamp(lo, hi));
        }

        // q(z_prev | z_t, x0): mean is a convex-like combination of x0 and z_t.
        let c0 = ab_prev.sqrt() * (1.0 - alpha) / (1.0 - ab_t);
        let c1 = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mut mean = x0;
        mean *= c0;
        mean.scaled_add(c1, &z);

        let last = k + 1 == path.len();
        if last {
            z = mean;
        } else {
            let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha)).sqrt();
            let noise =
                Array4::from_shape_fn((n, c, h, w), |_| rng.sample::<f64, _>(StandardNormal));
            z = mean;
            z.scaled_add(sigma, &noise);
        }
    }
    // guard against numerical blow-ups in long chains
    for mut zi in z.axis_iter_mut(Axis(0)) {
        zi.mapv_inplace(|v| v.clamp(-3.0, 3.0));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion_core::predictor::PredictorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn timestep_path_covers_full_range() {
        assert_eq!(timestep_path(100, 100).first(), Some(&99));
        assert_eq!(timestep_path(100, 100).last(), Some(&0));
        let p = timestep_path(100, 10);
        assert_eq!(p.len(), 10);
        assert_eq!(p[0], 99);
        assert_eq!(*p.last().unwrap(), 9);
        assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NoisePredictor::new(
            PredictorConfig {
                latent_channels: 2,
                hidden: 4,
                cond_dim: 3,
                time_dim: 4,
            },
            &mut rng,
        );
        let sched = NoiseSchedule::cosine(20);
        let y = Array2::from_elem((2, 3), 0.1);
        let a = sample(&p, &y, &sched, 10, (4, 4), None, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = sample(&p, &y, &sched, 10, (4, 4), None, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (2, 2, 4, 4));
    }

    #[test]
    fn clamped_sampling_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = NoisePredictor::new(
            PredictorConfig {
                latent_channels: 3,
                hidden: 4,
                cond_dim: 3,
                time_dim: 4,
            },
            &mut rng,
        );
        let sched = NoiseSchedule::cosine(50);
        let y = Array2::from_elem((2, 3), 0.2);
        let z = sample(&p, &y, &sched, 50, (6, 6), Some((0.0, 1.0)), &mut rng).unwrap();
        // The last step returns the clamped x0 directly.
        assert!(z.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn too_many_steps_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NoisePredictor::new(PredictorConfig::default(), &mut rng);
        let sched = NoiseSchedule::cosine(10);
        let y = Array2::zeros((1, 32));
        assert!(sample(&p, &y, &sched, 11, (4, 4), None, &mut rng).is_err());
    }
}
