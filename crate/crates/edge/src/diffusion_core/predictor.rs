use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EdgeError, Result};
use crate::nn::{join_name, silu, silu_deriv, sinusoidal_embedding, Conv2d, Linear, Param, ParamSet};

/// Shape configuration of the conditional noise predictor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct PredictorConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            latent_channels: 3,
            hidden: 16,
            cond_dim: 32,
            time_dim: 16,
        }
    }
}

/// Small conditional convolutional denoiser. The condition vector and a
/// sinusoidal timestep embedding are projected to the hidden width and
/// added feature-wise between the convolutions.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub cfg: PredictorConfig,
    pub conv_in: Conv2d,
    pub conv_mid: Conv2d,
    pub conv_out: Conv2d,
    pub cond_proj: Linear,
    pub time_proj: Linear,
}

/// Intermediate activations needed by the backward pass.
pub struct PredictorCache {
    x: Array4<f64>,
    h1_pre: Array4<f64>,
    h1: Array4<f64>,
    h2_pre: Array4<f64>,
    h2: Array4<f64>,
    y: Array2<f64>,
    temb: Array2<f64>,
}

impl NoisePredictor {
    pub fn new<R: Rng>(cfg: PredictorConfig, rng: &mut R) -> Self {
        NoisePredictor {
            cfg,
            conv_in: Conv2d::new(cfg.latent_channels, cfg.hidden, rng),
            conv_mid: Conv2d::new(cfg.hidden, cfg.hidden, rng),
            conv_out: Conv2d::new(cfg.hidden, cfg.latent_channels, rng),
            cond_proj: Linear::new(cfg.cond_dim, cfg.hidden, rng),
            time_proj: Linear::new(cfg.time_dim, cfg.hidden, rng),
        }
    }

    /// Predict ε̂ for a latent batch; returns the cache for backward.
    pub fn forward(
        &self,
        z_t: &Array4<f64>,
        t: &[usize],
        y: &Array2<f64>,
    ) -> Result<(Array4<f64>, PredictorCache)> {
        let (n, c, _, _) = z_t.dim();
        if c != self.cfg.latent_channels {
            return Err(EdgeError::Config(format!(
                "predictor expects {} latent channels, got {c}",
                self.cfg.latent_channels
            )));
        }
        if y.dim() != (n, self.cfg.cond_dim) {
            return Err(EdgeError::Config(format!(
                "condition shape {:?}, expected ({n}, {})",
                y.dim(),
                self.cfg.cond_dim
            )));
        }
        if t.len() != n {
            return Err(EdgeError::Config("timestep count != batch size".into()));
        }

        let h1_pre = self.conv_in.forward(&z_t.view());
        let h1 = h1_pre.mapv(silu);

        let temb = Array2::from_shape_fn((n, self.cfg.time_dim), |(i, k)| {
            sinusoidal_embedding(t[i], self.cfg.time_dim)[k]
        });
        let cond = self.cond_proj.forward(&y.view());
        let time = self.time_proj.forward(&temb.view());

        let mut h2_pre = self.conv_mid.forward(&h1.view());
        for bi in 0..n {
            for ch in 0..self.cfg.hidden {
                let add = cond[[bi, ch]] + time[[bi, ch]];
                h2_pre
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v + add);
            }
        }
        let h2 = h2_pre.mapv(silu);
        let eps_hat = self.conv_out.forward(&h2.view());
        Ok((
            eps_hat,
            PredictorCache {
                x: z_t.clone(),
                h1_pre,
                h1,
                h2_pre,
                h2,
                y: y.clone(),
                temb,
            },
        ))
    }

    /// Prediction only, for sampling and frozen inference.
    pub fn predict(&self, z_t: &Array4<f64>, t: &[usize], y: &Array2<f64>) -> Result<Array4<f64>> {
        Ok(self.forward(z_t, t, y)?.0)
    }

    /// Accumulate parameter gradients given dL/dε̂; returns dL/dy.
    pub fn backward(&mut self, cache: &PredictorCache, d_eps: &Array4<f64>) -> Array2<f64> {
        let d_h2 = self.conv_out.backward(&cache.h2.view(), &d_eps.view());
        let d_h2_pre = &d_h2 * &cache.h2_pre.mapv(silu_deriv);

        // feature-wise additions broadcast over space: sum spatial grads
        let (n, hidden, _, _) = d_h2_pre.dim();
        let mut d_add = Array2::zeros((n, hidden));
        for bi in 0..n {
            for ch in 0..hidden {
                d_add[[bi, ch]] = d_h2_pre
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ch)
                    .sum();
            }
        }
        let d_y = self.cond_proj.backward(&cache.y.view(), &d_add.view());
        let _ = self.time_proj.backward(&cache.temb.view(), &d_add.view());

        let d_h1 = self.conv_mid.backward(&cache.h1.view(), &d_h2_pre.view());
        let d_h1_pre = &d_h1 * &cache.h1_pre.mapv(silu_deriv);
        let _ = self.conv_in.backward(&cache.x.view(), &d_h1_pre.view());
        d_y
    }
}

impl ParamSet for NoisePredictor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv_in.visit(&join_name(prefix, "conv_in"), f);
        self.conv_mid.visit(&join_name(prefix, "conv_mid"), f);
        self.conv_out.visit(&join_name(prefix, "conv_out"), f);
        self.cond_proj.visit(&join_name(prefix, "cond_proj"), f);
        self.time_proj.visit(&join_name(prefix, "time_proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv_in.visit_mut(&join_name(prefix, "conv_in"), f);
        self.conv_mid.visit_mut(&join_name(prefix, "conv_mid"), f);
        self.conv_out.visit_mut(&join_name(prefix, "conv_out"), f);
        self.cond_proj.visit_mut(&join_name(prefix, "cond_proj"), f);
        self.time_proj.visit_mut(&join_name(prefix, "time_proj"), f);
    }
}
