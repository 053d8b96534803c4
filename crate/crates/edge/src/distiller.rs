//! Fine-tuning of the diffusion model with the combined contrastive +
//! diversity objective, and distilled-set synthesis by caption-conditioned
//! sampling.

use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{DatasetManifest, DistilledDataset, ImageBuf, ImageTextPair, ProvenanceRecord};
use crate::diffusion_core::{forward_noise, reconstruct_latent, DiffusionModel};
use crate::edge_losses::{self, LossBreakdown, LossGrads};
use crate::error::{EdgeError, Result};
use crate::nn::RmsProp;

/// Which loss terms drive a training run. Mirrors the component-ablation
/// rows: MSE only (plain diffusion pretraining), +contrastive, and
/// +contrastive+diversity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub mse: bool,
    pub contrastive: bool,
    pub diversity: bool,
}

impl LossMask {
    pub fn mse_only() -> Self {
        LossMask {
            mse: true,
            contrastive: false,
            diversity: false,
        }
    }
    pub fn contrastive_only() -> Self {
        LossMask {
            mse: false,
            contrastive: true,
            diversity: false,
        }
    }
    /// The full combined objective, replacing the reconstruction term.
    pub fn edge() -> Self {
        LossMask {
            mse: false,
            contrastive: true,
            diversity: true,
        }
    }

    /// All terms: reconstruction kept as a stabilizer alongside the
    /// contrastive and diversity terms. At small model scale the pure
    /// contrastive objective degrades sample fidelity quickly, so this
    /// is the fine-tuning default.
    pub fn all() -> Self {
        LossMask {
            mse: true,
            contrastive: true,
            diversity: true,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.mse {
            parts.push("mse");
        }
        if self.contrastive {
            parts.push("contrastive");
        }
        if self.diversity {
            parts.push("diversity");
        }
        parts.join("+")
    }
}

impl Default for LossMask {
    fn default() -> Self {
        LossMask::edge()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    /// Weight of the auxiliary noise-prediction MSE term when enabled.
    pub mse_weight: f64,
    pub mask: LossMask,
    /// Parameter-name prefixes to train; empty trains everything.
    pub trainable_prefixes: Vec<String>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 8,
            epochs: 8,
            tau: 0.5,
            lambda_c: 1.0,
            lambda_d: 1.0,
            mse_weight: 1.0,
            mask: LossMask::all(),
            trainable_prefixes: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.tau <= 0.0 {
            return Err(EdgeError::Config("learning_rate and tau must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(EdgeError::Config(
                "batch_size must be >= 2 (diversity loss needs N >= 2)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(EdgeError::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_edge: f64,
    pub l_mse: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub mask: LossMask,
    pub steps: Vec<StepRecord>,
}

/// Observed tensors for one training step, exposed to test hooks so the
/// dataflow (loss fed from the reconstructed latent, not z0) is checkable.
pub struct StepTrace<'a> {
    pub step: usize,
    pub z0_embedding_raw: &'a Array2<f64>,
    pub reconstructed_embedding_raw: &'a Array2<f64>,
    pub loss_input_raw: &'a Array2<f64>,
}

struct CorpusCache {
    ids: Vec<String>,
    pixels: Vec<Array3<f64>>,
    captions: Vec<Vec<String>>,
}

fn load_corpus(corpus: &DatasetManifest) -> Result<CorpusCache> {
    if corpus.is_empty() {
        return Err(EdgeError::InsufficientData("empty training corpus".into()));
    }
    let pairs = corpus.load_pairs()?;
    Ok(CorpusCache {
        ids: pairs.iter().map(|p| p.image_id.clone()).collect(),
        pixels: pairs.iter().map(|p| p.image.to_f64()).collect(),
        captions: pairs.into_iter().map(|p| p.captions).collect(),
    })
}

fn stack_pixels(cache: &CorpusCache, idx: &[usize]) -> Array4<f64> {
    let (c, h, w) = cache.pixels[0].dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&cache.pixels[i]);
    }
    out
}

/// Fine-tune the model on a corpus. Deterministic given `config.seed`.
pub fn finetune(
    model: &mut DiffusionModel,
    corpus: &DatasetManifest,
    config: &TrainConfig,
) -> Result<TrainLog> {
    finetune_with_hook(model, corpus, config, &mut |_| {})
}

/// As [`finetune`], with an instrumentation hook called once per step.
pub fn finetune_with_hook(
    model: &mut DiffusionModel,
    corpus: &DatasetManifest,
    config: &TrainConfig,
    hook: &mut dyn FnMut(&StepTrace),
) -> Result<TrainLog> {
    config.validate()?;
    let cache = load_corpus(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = RmsProp::new(config.learning_rate);
    let t_count = model.schedule.t_count();
    let mut log = TrainLog {
        mask: config.mask,
        steps: Vec::new(),
    };
    let started = Instant::now();
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..cache.ids.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue; // contrastive/diversity terms need N >= 2
            }
            let n = batch.len();
            let pixels = stack_pixels(&cache, batch);
            let captions: Vec<&str> = batch
                .iter()
                .map(|&i| {
                    let caps = &cache.captions[i];
                    caps[rng.gen_range(0..caps.len())].as_str()
                })
                .collect();

            let z0 = model.codec.encode(&pixels)?;
            let y = model.encode_text(&captions)?;
            let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..t_count)).collect();
            let noised = forward_noise(&z0, &t, &model.schedule, &mut rng)?;
            let (eps_hat, pred_cache) = model.predictor.forward(&noised.z, &t, &y.y)?;
            let z_hat = reconstruct_latent(&noised.z, &eps_hat, &t, &model.schedule)?;

            let pooled = model.pool_latents(&z_hat);
            let z_feat_raw = model.proj.forward(&pooled.view());

            // loss values + gradient w.r.t. (z_feat_raw, y)
            let mut d_feat = Array2::zeros(z_feat_raw.raw_dim());
            let mut d_y = Array2::zeros(y.y.raw_dim());
            let mut breakdown = LossBreakdown {
                l_i2t: 0.0,
                l_t2i: 0.0,
                l_c: 0.0,
                l_d: 0.0,
                l_edge: 0.0,
                tau: config.tau,
                lambda_c: config.lambda_c,
                lambda_d: config.lambda_d,
            };
            let apply = |g: &LossGrads, scale: f64, d_feat: &mut Array2<f64>, d_y: &mut Array2<f64>| {
                d_feat.scaled_add(scale, &g.d_z);
                d_y.scaled_add(scale, &g.d_y);
            };
            if config.mask.contrastive {
                let (l_c, g) =
                    edge_losses::loss_c_grad(&z_feat_raw, &y.y, config.tau, config.lambda_c)?;
                // loss_c_grad folds lambda_c in; recover components for the log
                let (l_i2t, _) = edge_losses::loss_i2t_grad(&z_feat_raw, &y.y, config.tau)?;
                breakdown.l_i2t = l_i2t;
                breakdown.l_t2i = l_c - config.lambda_c * l_i2t;
                breakdown.l_c = l_c;
                apply(&g, 1.0, &mut d_feat, &mut d_y);
            }
            if config.mask.diversity {
                let (l_d, g) = edge_losses::loss_d_grad(&z_feat_raw, &y.y)?;
                breakdown.l_d = l_d;
                apply(&g, config.lambda_d, &mut d_feat, &mut d_y);
            }
            breakdown.l_edge = breakdown.l_c + config.lambda_d * breakdown.l_d;

            hook(&StepTrace {
                step,
                z0_embedding_raw: &model.proj.forward(&model.pool_latents(&z0).view()),
                reconstructed_embedding_raw: &z_feat_raw,
                loss_input_raw: &z_feat_raw,
            });

            // backprop: d_feat -> projection -> pooled -> z_hat -> eps_hat
            let d_pooled = model.proj.backward(&pooled.view(), &d_feat.view());
            let (_, c, h, w) = z_hat.dim();
            let spatial = (h * w) as f64;
            let mut d_eps = Array4::zeros(eps_hat.raw_dim());
            for bi in 0..n {
                // d z_hat / d eps_hat = -sqrt(1-ab)/sqrt(ab), uniform over space
                let s = model.schedule.signal(t[bi])?;
                let q = model.schedule.noise(t[bi])?;
                let factor = -q / s / spatial;
                for ch in 0..c {
                    let g = d_pooled[[bi, ch]] * factor;
                    d_eps
                        .index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), ch)
                        .fill(g);
                }
            }

            let mut l_mse = 0.0;
            if config.mask.mse {
                let count = eps_hat.len() as f64;
                let diff = &eps_hat - &noised.eps;
                l_mse = diff.mapv(|v| v * v).sum() / count;
                d_eps.scaled_add(config.mse_weight * 2.0 / count, &diff);
            }

            let total = breakdown.l_edge + config.mse_weight * l_mse * (config.mask.mse as u8 as f64);
            if !total.is_finite() {
                let batch_ids = batch.iter().map(|&i| cache.ids[i].clone()).collect();
                return Err(EdgeError::NonFiniteLoss { step, batch_ids });
            }

            let d_y_pred = model.predictor.backward(&pred_cache, &d_eps);
            let d_y_total = &d_y + &d_y_pred;
            model.text.backward(&captions, &d_y_total.view())?;

            opt.step(model, &config.trainable_prefixes);

            log.steps.push(StepRecord {
                step,
                l_i2t: breakdown.l_i2t,
                l_t2i: breakdown.l_t2i,
                l_c: breakdown.l_c,
                l_d: breakdown.l_d,
                l_edge: breakdown.l_edge,
                l_mse,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// What to synthesize: |S| pairs as |S|/cpi images, conditioned on seed
/// captions drawn from a source corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub pair_count: usize,
    pub cpi: usize,
    pub sampler_steps: usize,
    pub seed: u64,
}

impl SynthesisRequest {
    pub fn validate(&self) -> Result<()> {
        if self.cpi == 0 || self.pair_count == 0 {
            return Err(EdgeError::Config("pair_count and cpi must be positive".into()));
        }
        if self.pair_count % self.cpi != 0 {
            return Err(EdgeError::Config(format!(
                "pair_count {} not divisible by cpi {}",
                self.pair_count, self.cpi
            )));
        }
        if self.sampler_steps == 0 {
            return Err(EdgeError::Config("sampler_steps must be positive".into()));
        }
        Ok(())
    }
}

fn distinct_captions(source: &DatasetManifest) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for r in &source.records {
        for c in &r.captions {
            if seen.insert(c.clone()) {
                out.push(c.clone());
            }
        }
    }
    out
}

/// Sample an image per seed caption. Each image gets the seed caption as
/// its single initial caption; caption expansion raises it to `cpi`.
pub fn synthesize(
    model: &DiffusionModel,
    request: &SynthesisRequest,
    caption_source: &DatasetManifest,
) -> Result<DistilledDataset> {
    synthesize_tagged(model, request, caption_source, "edge-finetuned")
}

/// Synthesis with the un-fine-tuned model, kept as a separate entry so
/// provenance marks the baseline.
pub fn baseline_pretrained_synthesize(
    pretrained: &DiffusionModel,
    request: &SynthesisRequest,
    caption_source: &DatasetManifest,
) -> Result<DistilledDataset> {
    synthesize_tagged(pretrained, request, caption_source, "pretrained-baseline")
}

fn synthesize_tagged(
    model: &DiffusionModel,
    request: &SynthesisRequest,
    caption_source: &DatasetManifest,
    captioner_id: &str,
) -> Result<DistilledDataset> {
    request.validate()?;
    let n_images = request.pair_count / request.cpi;
    let mut captions = distinct_captions(caption_source);
    if captions.len() < n_images {
        return Err(EdgeError::InsufficientData(format!(
            "need {n_images} distinct seed captions, source has {}",
            captions.len()
        )));
    }
    // seed captions drawn uniformly without replacement
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    captions.shuffle(&mut rng);
    captions.truncate(n_images);

    let mut images = Vec::with_capacity(n_images);
    let mut provenance = Vec::with_capacity(n_images);
    for (i, caption) in captions.iter().enumerate() {
        // per-image sampler seed so parallel synthesis cannot reorder outputs
        let sampler_seed = request.seed.wrapping_add(1 + i as u64);
        let mut img_rng = ChaCha8Rng::seed_from_u64(sampler_seed);
        let y = model.encode_text(&[caption.as_str()])?;
        let z = model.sample(&y, request.sampler_steps, &mut img_rng)?;
        let pixels = model.codec.decode(&z)?;
        let image = ImageBuf::from_f64(&pixels.index_axis(Axis(0), 0).to_owned());
        let image_id = format!("syn_{i:04}");
        provenance.push(ProvenanceRecord {
            image_id: image_id.clone(),
            seed_caption: caption.clone(),
            sampler_seed,
            captioner_id: captioner_id.to_string(),
        });
        images.push(ImageTextPair {
            image_id,
            image,
            captions: vec![caption.clone()],
        });
    }
    let ds = DistilledDataset {
        images,
        cpi: 1,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Coreset baseline: a uniform sample of real (image, caption) pairs.
pub fn baseline_random_select(
    corpus: &DatasetManifest,
    pair_count: usize,
    seed: u64,
) -> Result<DistilledDataset> {
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (ri, r) in corpus.records.iter().enumerate() {
        for ci in 0..r.captions.len() {
            all.push((ri, ci));
        }
    }
    if all.len() < pair_count {
        return Err(EdgeError::InsufficientData(format!(
            "corpus has {} pairs, requested {pair_count}",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(pair_count);

    let mut images = Vec::with_capacity(pair_count);
    let mut provenance = Vec::with_capacity(pair_count);
    for (k, (ri, ci)) in all.iter().enumerate() {
        let rec = &corpus.records[*ri];
        let caption = rec.captions[*ci].clone();
        // one record per selected pair: ids stay unique even when an image
        // contributes several captions
        let image_id = format!("rand_{k:04}_{}", rec.image_id);
        provenance.push(ProvenanceRecord {
            image_id: image_id.clone(),
            seed_caption: caption.clone(),
            sampler_seed: seed,
            captioner_id: "random-baseline".to_string(),
        });
        images.push(ImageTextPair {
            image_id,
            image: corpus.load_image(rec)?,
            captions: vec![caption],
        });
    }
    let ds = DistilledDataset {
        images,
        cpi: 1,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Moving-average smoothing used by the directional training checks.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if values.len() < window || window == 0 {
        return values.to_vec();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
