use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EdgeError, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, silu, silu_deriv, upsample2, upsample2_backward, Conv2d,
    Param, ParamSet, RmsProp,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    /// Latent = pixel tensor; reconstruction is exact.
    Identity,
    /// Learned downsampling autoencoder.
    Tiny,
}

/// Image <-> latent codec. Identity mode is the test default so encoder
/// quality never confounds the loss experiments.
#[derive(Debug, Clone)]
pub enum LatentCodec {
    Identity,
    Tiny(TinyAutoencoder),
}

impl LatentCodec {
    pub fn new<R: Rng>(mode: CodecMode, latent_channels: usize, rng: &mut R) -> Self {
        match mode {
            CodecMode::Identity => LatentCodec::Identity,
            CodecMode::Tiny => LatentCodec::Tiny(TinyAutoencoder::new(latent_channels, rng)),
        }
    }

    pub fn mode(&self) -> CodecMode {
        match self {
            LatentCodec::Identity => CodecMode::Identity,
            LatentCodec::Tiny(_) => CodecMode::Tiny,
        }
    }

    /// (channels, height, width) of the latent for a given image size.
    pub fn latent_shape(&self, image_size: usize) -> (usize, usize, usize) {
        match self {
            LatentCodec::Identity => (3, image_size, image_size),
            LatentCodec::Tiny(ae) => (ae.latent_channels, image_size / 2, image_size / 2),
        }
    }

    /// Known value range of clean latents, if the codec guarantees one.
    /// Identity latents are pixels in [0, 1]; learned latents are unbounded.
    pub fn latent_range(&self) -> Option<(f64, f64)> {
        match self {
            LatentCodec::Identity => Some((0.0, 1.0)),
            LatentCodec::Tiny(_) => None,
        }
    }

    pub fn encode(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        if x.dim().1 != 3 {
            return Err(EdgeError::Config(format!(
                "codec expects 3-channel pixels, got {}",
                x.dim().1
            )));
        }
        match self {
            LatentCodec::Identity => Ok(x.clone()),
            LatentCodec::Tiny(ae) => Ok(ae.encode(x).0),
        }
    }

    pub fn decode(&self, z: &Array4<f64>) -> Result<Array4<f64>> {
        match self {
            LatentCodec::Identity => Ok(z.mapv(|v| v.clamp(0.0, 1.0))),
            LatentCodec::Tiny(ae) => Ok(ae.decode(z).0),
        }
    }
}

impl ParamSet for LatentCodec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let LatentCodec::Tiny(ae) = self {
            ae.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let LatentCodec::Tiny(ae) = self {
            ae.visit_mut(prefix, f);
        }
    }
}

/// Two-conv encoder with 2x downsampling and a mirrored decoder.
#[derive(Debug, Clone)]
pub struct TinyAutoencoder {
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub dec1: Conv2d,
    pub dec2: Conv2d,
    pub latent_channels: usize,
}

struct EncCache {
    x: Array4<f64>,
    h1_pre: Array4<f64>,
    h1_pooled: Array4<f64>,
}

struct DecCache {
    z: Array4<f64>,
    g1_pre: Array4<f64>,
    g1_up: Array4<f64>,
    out_pre: Array4<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl TinyAutoencoder {
    pub fn new<R: Rng>(latent_channels: usize, rng: &mut R) -> Self {
        let hidden = 8;
        TinyAutoencoder {
            enc1: Conv2d::new(3, hidden, rng),
            enc2: Conv2d::new(hidden, latent_channels, rng),
            dec1: Conv2d::new(latent_channels, hidden, rng),
            dec2: Conv2d::new(hidden, 3, rng),
            latent_channels,
        }
    }

    fn encode(&self, x: &Array4<f64>) -> (Array4<f64>, EncCache) {
        let h1_pre = self.enc1.forward(&x.view());
        let h1 = h1_pre.mapv(silu);
        let h1_pooled = avg_pool2(&h1.view());
        let z = self.enc2.forward(&h1_pooled.view());
        (
            z,
            EncCache {
                x: x.clone(),
                h1_pre,
                h1_pooled,
            },
        )
    }

    fn decode(&self, z: &Array4<f64>) -> (Array4<f64>, DecCache) {
        let g1_pre = self.dec1.forward(&z.view());
        let g1 = g1_pre.mapv(silu);
        let g1_up = upsample2(&g1.view());
        let out_pre = self.dec2.forward(&g1_up.view());
        let out = out_pre.mapv(sigmoid);
        (
            out,
            DecCache {
                z: z.clone(),
                g1_pre,
                g1_up,
                out_pre,
            },
        )
    }

    /// Mean reconstruction MSE over a pixel batch.
    pub fn reconstruction_mse(&self, x: &Array4<f64>) -> f64 {
        let (z, _) = self.encode(x);
        let (y, _) = self.decode(&z);
        (&y - x).mapv(|v| v * v).mean().unwrap()
    }

    /// One gradient step on reconstruction MSE; returns the loss before
    /// the update.
    fn train_step(&mut self, x: &Array4<f64>, opt: &mut RmsProp) -> f64 {
        let (z, ec) = self.encode(x);
        let (y, dc) = self.decode(&z);
        let count = y.len() as f64;
        let loss = (&y - x).mapv(|v| v * v).sum() / count;

        let dy = (&y - x) * (2.0 / count);
        // sigmoid backward
        let dout_pre = &dy * &dc.out_pre.mapv(|v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        });
        let dg1_up = self.dec2.backward(&dc.g1_up.view(), &dout_pre.view());
        let dg1 = upsample2_backward(&dg1_up.view());
        let dg1_pre = &dg1 * &dc.g1_pre.mapv(silu_deriv);
        let dz = self.dec1.backward(&dc.z.view(), &dg1_pre.view());
        let dh1_pooled = self.enc2.backward(&ec.h1_pooled.view(), &dz.view());
        let (_, _, h, w) = ec.h1_pre.dim();
        let dh1 = avg_pool2_backward(&dh1_pooled.view(), h, w);
        let dh1_pre = &dh1 * &ec.h1_pre.mapv(silu_deriv);
        let _ = self.enc1.backward(&ec.x.view(), &dh1_pre.view());

        opt.step(self, &[]);
        loss
    }

    /// Train on a pixel batch for `steps` full-batch iterations.
    pub fn train(&mut self, x: &Array4<f64>, steps: usize, lr: f64) -> Vec<f64> {
        let mut opt = RmsProp::new(lr);
        (0..steps).map(|_| self.train_step(x, &mut opt)).collect()
    }
}

impl ParamSet for TinyAutoencoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.enc1.visit(&crate::nn::join_name(prefix, "enc1"), f);
        self.enc2.visit(&crate::nn::join_name(prefix, "enc2"), f);
        self.dec1.visit(&crate::nn::join_name(prefix, "dec1"), f);
        self.dec2.visit(&crate::nn::join_name(prefix, "dec2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.enc1.visit_mut(&crate::nn::join_name(prefix, "enc1"), f);
        self.enc2.visit_mut(&crate::nn::join_name(prefix, "enc2"), f);
        self.dec1.visit_mut(&crate::nn::join_name(prefix, "dec1"), f);
        self.dec2.visit_mut(&crate::nn::join_name(prefix, "dec2"), f);
    }
}
