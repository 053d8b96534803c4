//! Downstream evaluation: train a small dual encoder on a distilled set,
//! then measure bidirectional retrieval (IR@K / TR@K) and an alignment
//! score on a held-out validation corpus.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{DistilledDataset, ImageTextPair};
use crate::diffusion_core::{TextEncoder, TextEncoderConfig};
use crate::distiller::LossMask;
use crate::edge_losses::loss_c_grad;
use crate::error::{EdgeError, Result};
use crate::nn::{avg_pool2, avg_pool2_backward, silu, silu_deriv, Conv2d, Linear, Param, ParamSet, RmsProp};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Registered image-tower variants: (conv1 channels, conv2 channels).
pub fn registered_architectures() -> Vec<&'static str> {
    vec!["tiny-conv", "wide-conv"]
}

fn arch_channels(arch: &str) -> Result<(usize, usize)> {
    match arch {
        "tiny-conv" => Ok((8, 16)),
        "wide-conv" => Ok((12, 24)),
        other => Err(EdgeError::Config(format!(
            "unknown image tower architecture {other:?}; registered: {:?}",
            registered_architectures()
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub arch: String,
    pub embed_dim: usize,
    pub text_buckets: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub freeze_text: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            arch: "tiny-conv".to_string(),
            embed_dim: 16,
            text_buckets: 512,
            learning_rate: 5e-3,
            batch_size: 8,
            epochs: 30,
            tau: 0.5,
            // The text tower stays at its hash-anchored init by default:
            // with desk-scale distilled sets, jointly training both towers
            // lets the text side absorb the pairing and the image tower
            // stops generalizing to unseen renders.
            freeze_text: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        arch_channels(&self.arch)?;
        if self.embed_dim == 0 || self.text_buckets == 0 {
            return Err(EdgeError::Config("eval dims must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(EdgeError::Config(
                "eval batch_size must be >= 2 (contrastive loss)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(EdgeError::Config("eval epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.tau > 0.0) {
            return Err(EdgeError::Config(
                "eval learning_rate and tau must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Two-tower encoder. The image tower is conv → pool → conv → pool →
/// global mean → linear; the text tower is the hash-bucket embedding
/// encoder. Both sides are unit-normalized by the `embed_*` methods.
pub struct DualEncoder {
    pub arch: String,
    pub dim: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
    pub text: TextEncoder,
}

struct ImageCache {
    x: Array4<f64>,
    a1: Array4<f64>,
    p1: Array4<f64>,
    a2: Array4<f64>,
    p2: Array4<f64>,
    feat: Array2<f64>,
}

fn normalize_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    out
}

impl DualEncoder {
    pub fn new(cfg: &EvalConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (c1, c2) = arch_channels(&cfg.arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(DualEncoder {
            arch: cfg.arch.clone(),
            dim: cfg.embed_dim,
            conv1: Conv2d::new(3, c1, &mut rng),
            conv2: Conv2d::new(c1, c2, &mut rng),
            proj: Linear::new(c2, cfg.embed_dim, &mut rng),
            text: TextEncoder::new(
                &TextEncoderConfig {
                    buckets: cfg.text_buckets,
                    dim: cfg.embed_dim,
                },
                &mut rng,
            ),
        })
    }

    fn forward_images(&self, x: Array4<f64>) -> (Array2<f64>, ImageCache) {
        let a1 = self.conv1.forward(&x.view());
        let s1 = a1.mapv(silu);
        let p1 = avg_pool2(&s1.view());
        let a2 = self.conv2.forward(&p1.view());
        let s2 = a2.mapv(silu);
        let p2 = avg_pool2(&s2.view());
        let feat = p2.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        let raw = self.proj.forward(&feat.view());
        (raw, ImageCache { x, a1, p1, a2, p2, feat })
    }

    fn backward_images(&mut self, cache: &ImageCache, d_raw: &ArrayView2<f64>) {
        let d_feat = self.proj.backward(&cache.feat.view(), d_raw);
        let (b, c, h, w) = cache.p2.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut d_p2 = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let g = d_feat[[bi, ci]] * scale;
                d_p2.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|_| g);
            }
        }
        let (_, _, h2, w2) = cache.a2.dim();
        let d_s2 = avg_pool2_backward(&d_p2.view(), h2, w2);
        let d_a2 = &d_s2 * &cache.a2.mapv(silu_deriv);
        let d_p1 = self.conv2.backward(&cache.p1.view(), &d_a2.view());
        let (_, _, h1, w1) = cache.a1.dim();
        let d_s1 = avg_pool2_backward(&d_p1.view(), h1, w1);
        let d_a1 = &d_s1 * &cache.a1.mapv(silu_deriv);
        self.conv1.backward(&cache.x.view(), &d_a1.view());
    }

    /// Raw (un-normalized) image embeddings, one row per image.
    pub fn image_embedding_raw(&self, images: &[&crate::dataset_io::ImageBuf]) -> Result<Array2<f64>> {
        let x = stack_images(images)?;
        Ok(self.forward_images(x).0)
    }

    /// Unit-normalized image embeddings.
    pub fn embed_images(&self, images: &[&crate::dataset_io::ImageBuf]) -> Result<Array2<f64>> {
        Ok(normalize_rows(&self.image_embedding_raw(images)?.view()))
    }

    /// Unit-normalized caption embeddings.
    pub fn embed_captions(&self, captions: &[&str]) -> Result<Array2<f64>> {
        Ok(normalize_rows(&self.text.encode(captions)?.y.view()))
    }
}

impl ParamSet for DualEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let p = |n: &str| crate::nn::join_name(prefix, n);
        self.conv1.visit(&p("image.conv1"), f);
        self.conv2.visit(&p("image.conv2"), f);
        self.proj.visit(&p("image.proj"), f);
        self.text.visit(&p("text"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let p = |n: &str| crate::nn::join_name(prefix, n);
        self.conv1.visit_mut(&p("image.conv1"), f);
        self.conv2.visit_mut(&p("image.conv2"), f);
        self.proj.visit_mut(&p("image.proj"), f);
        self.text.visit_mut(&p("text"), f);
    }
}

/// Fresh model with a different image tower; the text tower weights and
/// embedding dim are kept from `model`.
pub fn swap_image_tower(model: &DualEncoder, arch: &str, seed: u64) -> Result<DualEncoder> {
    let (c1, c2) = arch_channels(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DualEncoder {
        arch: arch.to_string(),
        dim: model.dim,
        conv1: Conv2d::new(3, c1, &mut rng),
        conv2: Conv2d::new(c1, c2, &mut rng),
        proj: Linear::new(c2, model.dim, &mut rng),
        text: model.text.clone(),
    })
}

fn stack_images(images: &[&crate::dataset_io::ImageBuf]) -> Result<Array4<f64>> {
    if images.is_empty() {
        return Err(EdgeError::Validation("empty image batch".into()));
    }
    let (h, w) = (images[0].height, images[0].width);
    let mut x = Array4::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(EdgeError::Validation("image sizes differ in batch".into()));
        }
        x.index_axis_mut(Axis(0), i).assign(&img.to_f64());
    }
    Ok(x)
}

/// Every (image, caption) combination of a distilled set, flattened; each
/// combination counts as one training pair.
fn flatten_pairs(dataset: &DistilledDataset) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, p) in dataset.images.iter().enumerate() {
        for c in 0..p.captions.len() {
            out.push((i, c));
        }
    }
    out
}

/// Train a dual encoder on the distilled pairs with the symmetric
/// InfoNCE objective. Returns the model and the per-step loss trace.
pub fn train_eval_model(
    dataset: &DistilledDataset,
    config: &EvalConfig,
    seed: u64,
) -> Result<(DualEncoder, Vec<f64>)> {
    config.validate()?;
    let pairs = flatten_pairs(dataset);
    if pairs.len() < 2 {
        return Err(EdgeError::InsufficientData(
            "contrastive training needs at least 2 pairs".into(),
        ));
    }
    let mut model = DualEncoder::new(config, seed)?;
    let mut opt = RmsProp::new(config.learning_rate);
    let trainable: Vec<String> = if config.freeze_text {
        vec!["image".to_string()]
    } else {
        vec!["image".to_string(), "text".to_string()]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<_> = chunk.iter().map(|&(i, _)| &dataset.images[i].image).collect();
            let captions: Vec<&str> = chunk
                .iter()
                .map(|&(i, c)| dataset.images[i].captions[c].as_str())
                .collect();
            let x = stack_images(&images)?;
            let (z_raw, cache) = model.forward_images(x);
            let y_raw = model.text.encode(&captions)?.y;
            let (loss, grads) = loss_c_grad(&z_raw, &y_raw, config.tau, 1.0)?;
            model.backward_images(&cache, &grads.d_z.view());
            if !config.freeze_text {
                model.text.backward(&captions, &grads.d_y.view())?;
            }
            opt.step(&mut model, &trainable);
            model.zero_grads();
            losses.push(loss);
        }
    }
    Ok((model, losses))
}

/// Bidirectional retrieval metrics plus the matched-pair alignment score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ir_at: BTreeMap<usize, f64>,
    pub tr_at: BTreeMap<usize, f64>,
    pub alignment_score: f64,
    pub n_queries: usize,
}

impl RetrievalMetrics {
    pub fn validate(&self) -> Result<()> {
        for map in [&self.ir_at, &self.tr_at] {
            let mut prev = 0.0;
            for (&k, &v) in map {
                if !(0.0..=1.0).contains(&v) {
                    return Err(EdgeError::Validation(format!(
                        "recall@{k} = {v} out of [0,1]"
                    )));
                }
                if v + 1e-12 < prev {
                    return Err(EdgeError::Validation(format!(
                        "recall not monotone in K at K={k}"
                    )));
                }
                prev = v;
            }
        }
        if !(-1.0..=1.0).contains(&self.alignment_score) {
            return Err(EdgeError::Validation(format!(
                "alignment score {} out of [-1,1]",
                self.alignment_score
            )));
        }
        Ok(())
    }
}

/// Rank-based retrieval over precomputed unit embeddings. `owners[j]` is
/// the index of the image that caption j belongs to. Ties break toward
/// the lower candidate index.
pub fn retrieval_from_embeddings(
    img_emb: &ArrayView2<f64>,
    cap_emb: &ArrayView2<f64>,
    owners: &[usize],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    let n_img = img_emb.nrows();
    let n_cap = cap_emb.nrows();
    if n_img == 0 || n_cap != owners.len() || n_cap == 0 {
        return Err(EdgeError::Validation("empty retrieval instance".into()));
    }
    for &k in ks {
        if k == 0 || k > n_img || k > n_cap {
            return Err(EdgeError::Validation(format!(
                "K={k} exceeds candidate count ({n_img} images, {n_cap} captions)"
            )));
        }
    }
    let sims = img_emb.dot(&cap_emb.t()); // (n_img, n_cap)

    let mut ir_at = BTreeMap::new();
    let mut tr_at = BTreeMap::new();
    for &k in ks {
        // text-to-image: one query per caption; correct image must be top-K
        let mut ir_hits = 0usize;
        for (j, &owner) in owners.iter().enumerate() {
            let own = sims[[owner, j]];
            let rank = (0..n_img)
                .filter(|&i| {
                    let s = sims[[i, j]];
                    s > own || (s == own && i < owner)
                })
                .count();
            if rank < k {
                ir_hits += 1;
            }
        }
        ir_at.insert(k, ir_hits as f64 / n_cap as f64);

        // image-to-text: one query per image; any own caption in top-K
        let mut tr_hits = 0usize;
        for i in 0..n_img {
            let mut idx: Vec<usize> = (0..n_cap).collect();
            idx.sort_by(|&a, &b| {
                sims[[i, b]]
                    .partial_cmp(&sims[[i, a]])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            if idx[..k].iter().any(|&j| owners[j] == i) {
                tr_hits += 1;
            }
        }
        tr_at.insert(k, tr_hits as f64 / n_img as f64);
    }

    let alignment_score = owners
        .iter()
        .enumerate()
        .map(|(j, &owner)| sims[[owner, j]])
        .sum::<f64>()
        / n_cap as f64;

    let out = RetrievalMetrics {
        ir_at,
        tr_at,
        alignment_score,
        n_queries: n_cap,
    };
    out.validate()?;
    Ok(out)
}

/// Embed a validation corpus with `model` and compute retrieval metrics.
pub fn compute_retrieval(
    model: &DualEncoder,
    validation: &[ImageTextPair],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if validation.is_empty() {
        return Err(EdgeError::Validation("empty validation corpus".into()));
    }
    let images: Vec<_> = validation.iter().map(|p| &p.image).collect();
    let mut captions = Vec::new();
    let mut owners = Vec::new();
    for (i, p) in validation.iter().enumerate() {
        if p.captions.is_empty() {
            return Err(EdgeError::Validation(format!(
                "validation image {} has no captions",
                p.image_id
            )));
        }
        for c in &p.captions {
            captions.push(c.as_str());
            owners.push(i);
        }
    }
    let img_emb = model.embed_images(&images)?;
    let cap_emb = model.embed_captions(&captions)?;
    retrieval_from_embeddings(&img_emb.view(), &cap_emb.view(), &owners, ks)
}

/// Per-seed runs plus mean/stddev aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub per_seed: Vec<(u64, RetrievalMetrics)>,
    pub mean: RetrievalMetrics,
    pub stddev: RetrievalMetrics,
}

fn aggregate(per_seed: &[(u64, RetrievalMetrics)]) -> (RetrievalMetrics, RetrievalMetrics) {
    let n = per_seed.len() as f64;
    let ks: Vec<usize> = per_seed[0].1.ir_at.keys().copied().collect();
    let stat = |get: &dyn Fn(&RetrievalMetrics) -> f64| {
        let m = per_seed.iter().map(|(_, r)| get(r)).sum::<f64>() / n;
        let var = per_seed.iter().map(|(_, r)| (get(r) - m).powi(2)).sum::<f64>() / n;
        (m, var.sqrt())
    };
    let mut mean = RetrievalMetrics {
        ir_at: BTreeMap::new(),
        tr_at: BTreeMap::new(),
        alignment_score: 0.0,
        n_queries: per_seed[0].1.n_queries,
    };
    let mut stddev = mean.clone();
    for &k in &ks {
        let (m, s) = stat(&|r: &RetrievalMetrics| r.ir_at[&k]);
        mean.ir_at.insert(k, m);
        stddev.ir_at.insert(k, s);
        let (m, s) = stat(&|r: &RetrievalMetrics| r.tr_at[&k]);
        mean.tr_at.insert(k, m);
        stddev.tr_at.insert(k, s);
    }
    let (m, s) = stat(&|r: &RetrievalMetrics| r.alignment_score);
    mean.alignment_score = m;
    stddev.alignment_score = s;
    (mean, stddev)
}

/// Train + evaluate once per seed and aggregate.
pub fn evaluate_pipeline(
    distilled: &DistilledDataset,
    validation: &[ImageTextPair],
    config: &EvalConfig,
    ks: &[usize],
    seeds: &[u64],
) -> Result<AggregateMetrics> {
    if seeds.is_empty() {
        return Err(EdgeError::Config("need at least one evaluation seed".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (model, _) = train_eval_model(distilled, config, seed)?;
        per_seed.push((seed, compute_retrieval(&model, validation, ks)?));
    }
    let (mean, stddev) = aggregate(&per_seed);
    Ok(AggregateMetrics {
        per_seed,
        mean,
        stddev,
    })
}

/// Digest of a distilled set's provenance records, for tying a metrics
/// report back to the dataset it measured.
pub fn provenance_digest(dataset: &DistilledDataset) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for r in &dataset.provenance {
        eat(r.image_id.as_bytes());
        eat(r.seed_caption.as_bytes());
        eat(&r.sampler_seed.to_le_bytes());
        eat(r.captioner_id.as_bytes());
    }
    format!("{h:016x}")
}

/// Full structured metrics report for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mask: LossMask,
    pub provenance_digest: String,
    pub seeds: Vec<u64>,
    pub metrics: AggregateMetrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| EdgeError::Validation(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| EdgeError::Validation(format!("report parse: {e}")))
    }
}
