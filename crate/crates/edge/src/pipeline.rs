//! End-to-end orchestration behind the CLI commands: corpus preparation,
//! pretraining + fine-tuning, synthesis, caption expansion, evaluation,
//! and the ablation runner. Everything is deterministic per config+seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caption_synthesis::{
    Captioner, MllmClient, MllmClientConfig, PromptTemplate, TemplateCaptioner,
};
use crate::config::{
    AblationMask, AblationPlan, CaptionerKind, ExperimentConfig, RunDescriptor, RunLock,
};
use crate::dataset_io::{
    load_distilled, load_manifest, toy::generate_toy_corpus, write_distilled, DatasetManifest,
    DistilledDataset,
};
use crate::diffusion_core::DiffusionModel;
use crate::distiller::{
    self, baseline_pretrained_synthesize, baseline_random_select, finetune, LossMask,
    SynthesisRequest, TrainConfig, TrainLog,
};
use crate::error::{EdgeError, Result};
use crate::retrieval_eval::{evaluate_pipeline, provenance_digest, AggregateMetrics, MetricsReport};

pub const PRETRAINED_CKPT: &str = "pretrained.ckpt.json";
pub const FINETUNED_CKPT: &str = "finetuned.ckpt.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_REPORT: &str = "metrics_report.json";
pub const ABLATION_TABLE: &str = "ablation_table.json";

/// Load the source corpus named by the config, generating the toy corpus
/// under the run directory when no manifest path is given.
pub fn ensure_corpus(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    match &cfg.corpus.manifest {
        Some(path) => load_manifest(path),
        None => {
            let dir = cfg.run_dir().join("corpus");
            generate_toy_corpus(&cfg.corpus.toy, cfg.corpus.toy_seed, &dir)
        }
    }
}

pub fn build_captioner(cfg: &ExperimentConfig) -> Result<Box<dyn Captioner>> {
    match cfg.captioner.kind {
        CaptionerKind::Template => Ok(Box::new(TemplateCaptioner::new())),
        CaptionerKind::Mllm => {
            let mut client_cfg = MllmClientConfig::from_env();
            // env override wins; config endpoint is the fallback
            if std::env::var(crate::caption_synthesis::ENDPOINT_ENV).is_err() {
                if let Some(ep) = &cfg.captioner.endpoint {
                    client_cfg.endpoint = ep.clone();
                }
            }
            client_cfg.max_retries = cfg.captioner.max_retries;
            Ok(Box::new(MllmClient::new(client_cfg)?))
        }
    }
}

fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut text = serde_json::to_string(&serde_json::json!({ "mask": log.mask }))
        .expect("mask serializes");
    text.push('\n');
    for s in &log.steps {
        text.push_str(&serde_json::to_string(s).expect("step serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| EdgeError::Write {
        path: path.to_path_buf(),
        source: e,
    })
}

fn descriptor(cfg: &ExperimentConfig, command: &str) -> RunDescriptor {
    RunDescriptor {
        command: command.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        started_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
    }
}

pub struct DistillArtifacts {
    pub pretrained: PathBuf,
    pub finetuned: PathBuf,
    pub log: PathBuf,
}

/// Pretrain (MSE only), then fine-tune with the configured loss mask.
pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<DistillArtifacts> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    descriptor(cfg, "distill").write(&run_dir)?;
    let corpus = ensure_corpus(cfg)?;

    let mut model = DiffusionModel::new(cfg.model, cfg.seed);
    if cfg.pretrain_epochs > 0 {
        let pre = TrainConfig {
            mask: LossMask::mse_only(),
            learning_rate: cfg.pretrain_learning_rate,
            epochs: cfg.pretrain_epochs,
            seed: cfg.seed,
            ..cfg.train.clone()
        };
        finetune(&mut model, &corpus, &pre)?;
    }
    let pretrained = run_dir.join(PRETRAINED_CKPT);
    model.save(&pretrained)?;

    let tune = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let log = finetune(&mut model, &corpus, &tune)?;
    let finetuned = run_dir.join(FINETUNED_CKPT);
    model.save(&finetuned)?;
    let log_path = run_dir.join(TRAIN_LOG);
    write_train_log(&log_path, &log)?;
    Ok(DistillArtifacts {
        pretrained,
        finetuned,
        log: log_path,
    })
}

/// Which generator produces the distilled set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynthesisSource {
    /// EDGE-fine-tuned checkpoint.
    Finetuned(PathBuf),
    /// Un-fine-tuned checkpoint (pretrained baseline).
    Pretrained(PathBuf),
    /// Coreset baseline: random real pairs, no generator.
    Random,
}

impl SynthesisSource {
    fn dir_name(&self) -> &'static str {
        match self {
            SynthesisSource::Finetuned(_) => "distilled",
            SynthesisSource::Pretrained(_) => "distilled-pretrained",
            SynthesisSource::Random => "distilled-random",
        }
    }
}

/// Synthesize a distilled set and, when cpi > 1, expand captions. The
/// resulting directory holds PNGs, the manifest, and provenance.
pub fn cmd_synthesize(cfg: &ExperimentConfig, source: &SynthesisSource) -> Result<PathBuf> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    descriptor(cfg, "synthesize").write(&run_dir)?;
    let corpus = ensure_corpus(cfg)?;
    let request = SynthesisRequest {
        seed: cfg.seed,
        ..cfg.synthesis.clone()
    };

    let dataset = match source {
        SynthesisSource::Finetuned(ckpt) => {
            let model = DiffusionModel::load(ckpt)?;
            let ds = distiller::synthesize(&model, &request, &corpus)?;
            expand_if_needed(cfg, ds, request.cpi)?
        }
        SynthesisSource::Pretrained(ckpt) => {
            let model = DiffusionModel::load(ckpt)?;
            let ds = baseline_pretrained_synthesize(&model, &request, &corpus)?;
            expand_if_needed(cfg, ds, request.cpi)?
        }
        SynthesisSource::Random => baseline_random_select(&corpus, request.pair_count, cfg.seed)?,
    };

    let out = run_dir.join(source.dir_name());
    write_distilled(&dataset, &out)?;
    Ok(out)
}

fn expand_if_needed(
    cfg: &ExperimentConfig,
    dataset: DistilledDataset,
    cpi: usize,
) -> Result<DistilledDataset> {
    if cpi <= 1 {
        return Ok(dataset);
    }
    let captioner = build_captioner(cfg)?;
    let prompt = PromptTemplate::by_name(&cfg.captioner.prompt)?;
    crate::caption_synthesis::expand(
        dataset,
        cpi,
        captioner.as_ref(),
        &prompt,
        cfg.captioner.max_in_flight,
    )
}

/// Expand an existing distilled directory to `cpi` captions per image.
pub fn cmd_caption(cfg: &ExperimentConfig, distilled_dir: &Path, cpi: usize) -> Result<PathBuf> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    descriptor(cfg, "caption").write(&run_dir)?;
    let dataset = load_distilled(distilled_dir)?;
    let expanded = expand_if_needed(cfg, dataset, cpi)?;
    write_distilled(&expanded, distilled_dir)?;
    Ok(distilled_dir.to_path_buf())
}

/// Train the evaluation encoder on the distilled set per seed and report
/// retrieval metrics against the source corpus.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    distilled_dir: &Path,
    seeds: &[u64],
) -> Result<(MetricsReport, PathBuf)> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    descriptor(cfg, "eval").write(&run_dir)?;
    let corpus = ensure_corpus(cfg)?;
    let dataset = load_distilled(distilled_dir)?;
    let report = eval_distilled(cfg, &dataset, &corpus, seeds)?;
    let path = run_dir.join(METRICS_REPORT);
    fs::write(&path, report.to_json()?).map_err(|e| EdgeError::Write {
        path: path.clone(),
        source: e,
    })?;
    Ok((report, path))
}

fn eval_distilled(
    cfg: &ExperimentConfig,
    dataset: &DistilledDataset,
    corpus: &DatasetManifest,
    seeds: &[u64],
) -> Result<MetricsReport> {
    let validation = corpus.load_pairs()?;
    let metrics = evaluate_pipeline(dataset, &validation, &cfg.eval.model, &cfg.eval.ks, seeds)?;
    Ok(MetricsReport {
        mask: cfg.train.mask,
        provenance_digest: provenance_digest(dataset),
        seeds: seeds.to_vec(),
        metrics,
    })
}

/// One row of the component-ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: AblationMask,
    pub metrics: AggregateMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub shared_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| EdgeError::Validation(format!("table serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EdgeError::Validation(format!("table parse: {e}")))
    }

    /// Human-readable rendering with one row per mask.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "shared_seed={} eval_seeds={:?}\nmask",
            self.shared_seed, self.eval_seeds
        );
        for &k in &self.ks {
            out.push_str(&format!("\tIR@{k}"));
        }
        for &k in &self.ks {
            out.push_str(&format!("\tTR@{k}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(row.mask.label());
            for &k in &self.ks {
                out.push_str(&format!("\t{:.4}", row.metrics.mean.ir_at[&k]));
            }
            for &k in &self.ks {
                out.push_str(&format!("\t{:.4}", row.metrics.mean.tr_at[&k]));
            }
            out.push('\n');
        }
        out
    }
}

/// In-memory ablation pipeline: shared corpus and pretrained model, one
/// fine-tune + synthesize + eval per mask with shared seeds.
pub fn run_ablation(cfg: &ExperimentConfig, plan: &AblationPlan) -> Result<AblationTable> {
    cfg.validate()?;
    if plan.masks.is_empty() {
        return Err(EdgeError::Config("ablation plan has no masks".into()));
    }
    let corpus = ensure_corpus(cfg)?;

    let mut pretrained = DiffusionModel::new(cfg.model, cfg.seed);
    if cfg.pretrain_epochs > 0 {
        let pre = TrainConfig {
            mask: LossMask::mse_only(),
            learning_rate: cfg.pretrain_learning_rate,
            epochs: cfg.pretrain_epochs,
            seed: cfg.seed,
            ..cfg.train.clone()
        };
        finetune(&mut pretrained, &corpus, &pre)?;
    }

    let mut rows = Vec::with_capacity(plan.masks.len());
    for mask in &plan.masks {
        // Every row synthesizes the same image budget (`pair_count`
        // images); caption synthesis then multiplies captions on top of
        // that shared budget, mirroring its additive role.
        let (pair_count, cpi) = if mask.caption_synthesis() {
            (
                cfg.synthesis.pair_count * cfg.synthesis.cpi,
                cfg.synthesis.cpi,
            )
        } else {
            (cfg.synthesis.pair_count, 1)
        };
        let request = SynthesisRequest {
            seed: cfg.seed,
            pair_count,
            cpi,
            ..cfg.synthesis.clone()
        };
        let dataset = match mask {
            AblationMask::MseOnly => {
                baseline_pretrained_synthesize(&pretrained, &request, &corpus)?
            }
            _ => {
                let mut model = pretrained.clone();
                let tune = TrainConfig {
                    mask: mask.loss_mask(),
                    seed: cfg.seed,
                    ..cfg.train.clone()
                };
                finetune(&mut model, &corpus, &tune)?;
                distiller::synthesize(&model, &request, &corpus)?
            }
        };
        let dataset = expand_if_needed(cfg, dataset, request.cpi)?;
        let report = eval_distilled(cfg, &dataset, &corpus, &cfg.eval.seeds)?;
        rows.push(AblationRow {
            mask: *mask,
            metrics: report.metrics,
        });
    }
    Ok(AblationTable {
        shared_seed: cfg.seed,
        eval_seeds: cfg.eval.seeds.clone(),
        ks: cfg.eval.ks.clone(),
        rows,
    })
}

/// Run the ablation and write the table under the run directory.
pub fn cmd_ablate(cfg: &ExperimentConfig, plan: &AblationPlan) -> Result<(AblationTable, PathBuf)> {
    let run_dir = cfg.run_dir();
    let _lock = RunLock::acquire(&run_dir)?;
    descriptor(cfg, "ablate").write(&run_dir)?;
    let table = run_ablation(cfg, plan)?;
    let path = run_dir.join(ABLATION_TABLE);
    fs::write(&path, table.to_json()?).map_err(|e| EdgeError::Write {
        path: path.clone(),
        source: e,
    })?;
    let txt = run_dir.join("ablation_table.txt");
    fs::write(&txt, table.render_text()).map_err(|e| EdgeError::Write {
        path: txt,
        source: e,
    })?;
    Ok((table, path))
}
