use ndarray::Array4;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EdgeError, Result};

/// Cumulative signal coefficients ᾱ_t for every timestep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine-shaped ᾱ over `t_count` steps.
    pub fn cosine(t_count: usize) -> Self {
        assert!(t_count > 0);
        let s = 0.008;
        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let alpha_bar = (0..t_count)
            .map(|t| {
                let u = (t + 1) as f64 / t_count as f64;
                (f(u) / f0).clamp(1e-5, 1.0 - 1e-5)
            })
            .collect();
        let sched = NoiseSchedule { alpha_bar };
        sched.validate().expect("cosine schedule is valid");
        sched
    }

    pub fn t_count(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.is_empty() {
            return Err(EdgeError::Config("empty noise schedule".into()));
        }
        for (t, &a) in self.alpha_bar.iter().enumerate() {
            if !(0.0 < a && a < 1.0) {
                return Err(EdgeError::Config(format!(
                    "alpha_bar[{t}] = {a} outside (0,1)"
                )));
            }
            if t > 0 && a >= self.alpha_bar[t - 1] {
                return Err(EdgeError::Config(format!(
                    "alpha_bar not strictly decreasing at t={t}"
                )));
            }
        }
        Ok(())
    }

    fn check(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            EdgeError::Validation(format!(
                "timestep {t} out of range [0,{})",
                self.t_count()
            ))
        })
    }

    pub fn signal(&self, t: usize) -> Result<f64> {
        Ok(self.check(t)?.sqrt())
    }

    pub fn noise(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.check(t)?).sqrt())
    }
}

/// Latents plus the per-sample timesteps and the exact noise drawn.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub z: Array4<f64>,
    pub t: Vec<usize>,
    pub eps: Array4<f64>,
}

/// z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε with ε ~ N(0, I), ε retained.
pub fn forward_noise<R: Rng>(
    z0: &Array4<f64>,
    t: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentBatch> {
    let n = z0.dim().0;
    if t.len() != n {
        return Err(EdgeError::Validation(format!(
            "{} timesteps for a batch of {n}",
            t.len()
        )));
    }
    let eps = Array4::from_shape_fn(z0.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
    let mut z = z0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let s = schedule.signal(ti)?;
        let q = schedule.noise(ti)?;
        let mut zi = z.index_axis_mut(ndarray::Axis(0), i);
        zi *= s;
        zi.scaled_add(q, &eps.index_axis(ndarray::Axis(0), i));
    }
    Ok(LatentBatch {
        z,
        t: t.to_vec(),
        eps,
    })
}

/// z = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t — the exact inverse of [`forward_noise`]
/// when ε̂ equals the true noise.
pub fn reconstruct_latent(
    z_t: &Array4<f64>,
    eps_hat: &Array4<f64>,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    if z_t.raw_dim() != eps_hat.raw_dim() {
        return Err(EdgeError::Validation("z_t / eps_hat shape mismatch".into()));
    }
    let mut out = z_t.clone();
    for (i, &ti) in t.iter().enumerate() {
        let s = schedule.signal(ti)?;
        let q = schedule.noise(ti)?;
        let mut zi = out.index_axis_mut(ndarray::Axis(0), i);
        zi.scaled_add(-q, &eps_hat.index_axis(ndarray::Axis(0), i));
        zi /= s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_is_strictly_decreasing_in_unit_interval() {
        let s = NoiseSchedule::cosine(100);
        s.validate().unwrap();
        for t in 0..100 {
            let a = s.alpha_bar[t];
            // ᾱ_t + (1-ᾱ_t) = 1 identically
            assert_eq!(a + (1.0 - a), 1.0);
        }
    }

    #[test]
    fn zero_signal_case() {
        let s = NoiseSchedule::cosine(10);
        let z0 = Array4::zeros((2, 1, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = forward_noise(&z0, &[3, 7], &s, &mut rng).unwrap();
        for i in 0..2 {
            let q = s.noise(b.t[i]).unwrap();
            let zi = b.z.index_axis(ndarray::Axis(0), i);
            let ei = b.eps.index_axis(ndarray::Axis(0), i);
            for (zv, ev) in zi.iter().zip(ei.iter()) {
                assert!((zv - q * ev).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_oracle_scalar_forward() {
        // ᾱ_t = 0.64: z_t = 0.8*1.0 + 0.6*1.0 = 1.4
        let s = NoiseSchedule {
            alpha_bar: vec![0.9, 0.64, 0.3],
        };
        s.validate().unwrap();
        let z_t = 0.64f64.sqrt() * 1.0 + (1.0 - 0.64f64).sqrt() * 1.0;
        assert!((z_t - 1.4).abs() < 1e-12);
        assert!((s.signal(1).unwrap() - 0.8).abs() < 1e-12);
        assert!((s.noise(1).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn near_one_alpha_keeps_signal() {
        let s = NoiseSchedule::cosine(100);
        let z0 = Array4::from_elem((1, 1, 4, 4), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = forward_noise(&z0, &[0], &s, &mut rng).unwrap();
        let rel = (&b.z - &z0).mapv(f64::abs).sum() / z0.sum();
        let bound = s.noise(0).unwrap() * b.eps.mapv(f64::abs).sum() / z0.sum()
            + (1.0 - s.signal(0).unwrap());
        assert!(rel <= bound + 1e-12);
    }

    #[test]
    fn reconstruct_inverts_forward() {
        let s = NoiseSchedule::cosine(50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Array4::from_shape_fn((3, 2, 4, 4), |_| {
            use rand::Rng;
            rng.gen_range(-1.0..1.0)
        });
        let t = vec![0, 24, 49];
        let b = forward_noise(&z0, &t, &s, &mut rng).unwrap();
        let back = reconstruct_latent(&b.z, &b.eps, &t, &s).unwrap();
        for (a, b) in z0.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_oracle_reconstruction() {
        // z_t=1.0, ᾱ_t=0.25, ε̂=0.5 -> (1.0 - √0.75*0.5)/0.5 = 1.1339746
        let s = NoiseSchedule {
            alpha_bar: vec![0.5, 0.25],
        };
        let z_t = Array4::from_elem((1, 1, 1, 1), 1.0);
        let eps_hat = Array4::from_elem((1, 1, 1, 1), 0.5);
        let z = reconstruct_latent(&z_t, &eps_hat, &[1], &s).unwrap();
        assert!((z[[0, 0, 0, 0]] - 1.133_974_596_215_561_4).abs() < 1e-7);
    }

    #[test]
    fn zero_noise_estimate_rescales() {
        let s = NoiseSchedule::cosine(10);
        let z_t = Array4::from_elem((1, 1, 2, 2), 0.7);
        let eps_hat = Array4::zeros((1, 1, 2, 2));
        let z = reconstruct_latent(&z_t, &eps_hat, &[4], &s).unwrap();
        let expect = 0.7 / s.signal(4).unwrap();
        assert!(z.iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_timestep_errors() {
        let s = NoiseSchedule::cosine(10);
        let z0 = Array4::zeros((1, 1, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forward_noise(&z0, &[10], &s, &mut rng).is_err());
    }

    #[test]
    fn noise_marginal_variance_is_unit() {
        // z0 scalars with unit variance -> var(z_t) within 5% of 1 per t.
        let s = NoiseSchedule::cosine(20);
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for t in 0..20 {
            let z0 = Array4::from_shape_fn((n, 1, 1, 1), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let ts = vec![t; n];
            let b = forward_noise(&z0, &ts, &s, &mut rng).unwrap();
            let mean = b.z.sum() / n as f64;
            let var = b.z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
        let _ = rng.gen::<u8>();
    }
}
