//! Experiment configuration (one flat TOML file per run) and run
//! directory management.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset_io::toy::ToyCorpusSpec;
use crate::diffusion_core::ModelConfig;
use crate::distiller::{LossMask, SynthesisRequest, TrainConfig};
use crate::error::{EdgeError, Result};
use crate::retrieval_eval::EvalConfig;

/// Which captioner expands the distilled set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CaptionerKind {
    Template,
    Mllm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    pub kind: CaptionerKind,
    pub prompt: String,
    pub endpoint: Option<String>,
    pub max_retries: usize,
    pub max_in_flight: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            kind: CaptionerKind::Template,
            prompt: "llava_style".to_string(),
            endpoint: None,
            max_retries: 2,
            max_in_flight: 4,
        }
    }
}

/// Source corpus: an existing manifest, or a generated toy corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub manifest: Option<PathBuf>,
    pub toy: ToyCorpusSpec,
    pub toy_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            manifest: None,
            toy: ToyCorpusSpec::default(),
            toy_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    #[serde(flatten)]
    pub model: EvalConfig,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            model: EvalConfig::default(),
            ks: vec![1, 5, 10],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// MSE-only epochs that produce the pretrained model before any
    /// fine-tuning objective is applied.
    pub pretrain_epochs: usize,
    /// Learning rate for the MSE-only pretraining stage. Pretraining
    /// tolerates (and benefits from) a much larger step size than the
    /// contrastive fine-tune.
    pub pretrain_learning_rate: f64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthesis: SynthesisRequest,
    pub captioner: CaptionerConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "run".to_string(),
            seed: 0,
            out_dir: PathBuf::from("runs"),
            pretrain_epochs: 4,
            pretrain_learning_rate: 3e-3,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthesis: SynthesisRequest {
                pair_count: 32,
                cpi: 2,
                sampler_steps: 25,
                seed: 0,
            },
            captioner: CaptionerConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EdgeError::Load {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| EdgeError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || self
                .run_id
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(EdgeError::Config(format!(
                "run_id {:?} must be non-empty [A-Za-z0-9_-]",
                self.run_id
            )));
        }
        self.corpus.toy.validate()?;
        if self.pretrain_learning_rate <= 0.0 {
            return Err(EdgeError::Config(
                "pretrain_learning_rate must be positive".into(),
            ));
        }
        self.train.validate()?;
        self.synthesis.validate()?;
        self.eval.model.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(EdgeError::Config("eval.seeds must not be empty".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EdgeError::Config(
                "eval.ks must be non-empty and strictly increasing".into(),
            ));
        }
        crate::caption_synthesis::PromptTemplate::by_name(&self.captioner.prompt)?;
        Ok(())
    }

    /// Directory holding every artifact of this run.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| EdgeError::Config(format!("serialize: {e}")))
    }
}

/// Table 6-style ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMask {
    MseOnly,
    PlusContrastive,
    PlusContrastiveDiversity,
    EdgePlusCaptionSynthesis,
}

impl AblationMask {
    pub fn all() -> [AblationMask; 4] {
        [
            AblationMask::MseOnly,
            AblationMask::PlusContrastive,
            AblationMask::PlusContrastiveDiversity,
            AblationMask::EdgePlusCaptionSynthesis,
        ]
    }

    /// Loss mask applied during fine-tuning. `MseOnly` means no
    /// fine-tuning beyond the pretrained model.
    /// Loss terms are added cumulatively on top of the reconstruction
    /// objective, so each row differs from the previous one by exactly
    /// the component named in its label.
    pub fn loss_mask(&self) -> LossMask {
        match self {
            AblationMask::MseOnly => LossMask::mse_only(),
            AblationMask::PlusContrastive => LossMask {
                mse: true,
                contrastive: true,
                diversity: false,
            },
            AblationMask::PlusContrastiveDiversity | AblationMask::EdgePlusCaptionSynthesis => {
                LossMask::all()
            }
        }
    }

    /// Whether caption expansion runs after synthesis.
    pub fn caption_synthesis(&self) -> bool {
        matches!(self, AblationMask::EdgePlusCaptionSynthesis)
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationMask::MseOnly => "mse_only",
            AblationMask::PlusContrastive => "plus_contrastive",
            AblationMask::PlusContrastiveDiversity => "plus_contrastive_diversity",
            AblationMask::EdgePlusCaptionSynthesis => "edge_plus_caption_synthesis",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPlan {
    pub masks: Vec<AblationMask>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            masks: AblationMask::all().to_vec(),
        }
    }
}

/// Exclusive ownership of a run directory for the lifetime of a command.
/// The lock file is removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| EdgeError::Write {
            path: run_dir.to_path_buf(),
            source: e,
        })?;
        let path = run_dir.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(EdgeError::Validation(format!(
                    "run directory {} is locked by another command (remove {} if stale)",
                    run_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(EdgeError::Write { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Machine-readable record of what produced a run directory's contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Wall-clock metadata; excluded from reproducibility comparisons.
    pub started_unix_ms: u128,
}

impl RunDescriptor {
    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(format!("run_{}.json", self.command));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| EdgeError::Config(format!("descriptor: {e}")))?;
        fs::write(&path, text).map_err(|e| EdgeError::Write { path, source: e })
    }
}
