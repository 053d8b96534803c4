//! Caption expansion: raise every distilled image to η captions via a
//! pluggable captioner — an external multimodal-model client or the
//! offline deterministic template captioner.

mod client;
mod template;

pub use client::{CaptionRephraser, MllmClient, MllmClientConfig, ENDPOINT_ENV};
pub use template::TemplateCaptioner;

use std::sync::Mutex;

use crate::dataset_io::{DistilledDataset, ImageBuf};
use crate::error::{EdgeError, Result};

pub const MAX_CAPTION_WORDS: usize = 64;

/// One captioning call.
#[derive(Debug, Clone)]
pub struct CaptionRequest {
    pub image: ImageBuf,
    pub prompt: String,
    pub max_captions: usize,
    pub captioner_id: String,
    /// Index distinguishing repeated requests for the same image; the
    /// template captioner uses it to vary its grammar deterministically.
    pub variation: usize,
}

impl CaptionRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(EdgeError::Validation("empty captioning prompt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn llava_style() -> Self {
        PromptTemplate {
            name: "llava_style".to_string(),
            text: "Describe the image in one sentence".to_string(),
        }
    }

    pub fn gpt_style() -> Self {
        PromptTemplate {
            name: "gpt_style".to_string(),
            text: "Describe the image briefly in one sentence. Do not start with 'the image.'"
                .to_string(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "llava_style" => Ok(Self::llava_style()),
            "gpt_style" => Ok(Self::gpt_style()),
            other => Err(EdgeError::Config(format!("unknown prompt template {other}"))),
        }
    }
}

/// A caption source. Implementations must be thread-safe; `expand` issues
/// calls with bounded parallelism.
pub trait Captioner: Send + Sync {
    fn caption(&self, request: &CaptionRequest) -> Result<String>;
    fn id(&self) -> &str;
}

fn validate_caption(raw: &str) -> Result<String> {
    let trimmed = raw.trim().to_string();
    if trimmed.is_empty() {
        return Err(EdgeError::Validation("captioner returned an empty caption".into()));
    }
    let words = trimmed.split_whitespace().count();
    if words > MAX_CAPTION_WORDS {
        return Err(EdgeError::Validation(format!(
            "caption has {words} words, cap is {MAX_CAPTION_WORDS}"
        )));
    }
    Ok(trimmed)
}

/// Expand every image of a distilled set to exactly `cpi` captions. The
/// seed caption stays first; new captions are generated from the
/// synthesized image itself (post-training strategy).
pub fn expand(
    dataset: DistilledDataset,
    cpi: usize,
    captioner: &dyn Captioner,
    prompt: &PromptTemplate,
    max_in_flight: usize,
) -> Result<DistilledDataset> {
    if cpi == 0 {
        return Err(EdgeError::Config("cpi must be positive".into()));
    }
    for p in &dataset.images {
        if p.captions.is_empty() {
            return Err(EdgeError::Validation(format!(
                "image {} has no seed caption",
                p.image_id
            )));
        }
        if p.captions.len() > cpi {
            return Err(EdgeError::Config(format!(
                "image {} already has {} captions, more than cpi={cpi}",
                p.image_id,
                p.captions.len()
            )));
        }
    }
    if dataset.images.iter().all(|p| p.captions.len() == cpi) {
        return Ok(DistilledDataset { cpi, ..dataset });
    }

    let workers = max_in_flight.max(1).min(dataset.images.len().max(1));
    let results: Vec<Mutex<Option<Result<Vec<String>>>>> =
        (0..dataset.images.len()).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for w in 0..workers {
            let images = &dataset.images;
            let results = &results;
            scope.spawn(move || {
                for (i, pair) in images.iter().enumerate() {
                    if i % workers != w {
                        continue;
                    }
                    let mut extra = Vec::new();
                    let mut outcome = Ok(());
                    for v in pair.captions.len()..cpi {
                        let req = CaptionRequest {
                            image: pair.image.clone(),
                            prompt: prompt.text.clone(),
                            max_captions: 1,
                            captioner_id: captioner.id().to_string(),
                            variation: v,
                        };
                        match captioner.caption(&req).and_then(|c| validate_caption(&c)) {
                            Ok(c) => extra.push(c),
                            Err(e) => {
                                outcome = Err(EdgeError::Expansion {
                                    image_id: pair.image_id.clone(),
                                    message: e.to_string(),
                                });
                                break;
                            }
                        }
                    }
                    *results[i].lock().unwrap() = Some(outcome.map(|_| extra));
                }
            });
        }
    });

    // assemble in deterministic image order regardless of completion order
    let mut images = Vec::with_capacity(dataset.images.len());
    for (pair, slot) in dataset.images.into_iter().zip(results) {
        let extra = slot
            .into_inner()
            .unwrap()
            .expect("worker wrote every assigned slot")?;
        let mut captions = pair.captions;
        captions.extend(extra);
        images.push(crate::dataset_io::ImageTextPair { captions, ..pair });
    }
    let out = DistilledDataset {
        images,
        cpi,
        provenance: dataset.provenance,
    };
    out.validate()?;
    Ok(out)
}

/// Rephrase captions before they are used as sampling conditions
/// (pre-processing strategy; off by default).
pub fn rephrase_preprocess(
    captions: &[String],
    client: &dyn CaptionRephraser,
) -> Result<Vec<String>> {
    if captions.is_empty() {
        return Err(EdgeError::Validation("no captions to rephrase".into()));
    }
    captions
        .iter()
        .map(|c| client.rephrase(c).and_then(|r| validate_caption(&r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::{ImageTextPair, ProvenanceRecord};

    struct CannedCaptioner {
        text: String,
    }

    impl Captioner for CannedCaptioner {
        fn caption(&self, req: &CaptionRequest) -> Result<String> {
            req.validate()?;
            Ok(format!("{} variant {}", self.text, req.variation))
        }
        fn id(&self) -> &str {
            "canned"
        }
    }

    struct EmptyCaptioner;
    impl Captioner for EmptyCaptioner {
        fn caption(&self, _: &CaptionRequest) -> Result<String> {
            Ok("   ".to_string())
        }
        fn id(&self) -> &str {
            "empty"
        }
    }

    fn dataset(n: usize) -> DistilledDataset {
        let images = (0..n)
            .map(|i| ImageTextPair {
                image_id: format!("img_{i}"),
                image: ImageBuf::new(8, 8),
                captions: vec![format!("seed caption {i}")],
            })
            .collect();
        let provenance = (0..n)
            .map(|i| ProvenanceRecord {
                image_id: format!("img_{i}"),
                seed_caption: format!("seed caption {i}"),
                sampler_seed: i as u64,
                captioner_id: "test".into(),
            })
            .collect();
        DistilledDataset {
            images,
            cpi: 1,
            provenance,
        }
    }

    #[test]
    fn builtin_prompts_are_byte_exact() {
        assert_eq!(
            PromptTemplate::llava_style().text,
            "Describe the image in one sentence"
        );
        assert_eq!(
            PromptTemplate::gpt_style().text,
            "Describe the image briefly in one sentence. Do not start with 'the image.'"
        );
    }

    #[test]
    fn cpi_one_is_identity() {
        let ds = dataset(3);
        let before: Vec<Vec<String>> = ds.images.iter().map(|p| p.captions.clone()).collect();
        let out = expand(
            ds,
            1,
            &CannedCaptioner { text: "x".into() },
            &PromptTemplate::llava_style(),
            4,
        )
        .unwrap();
        let after: Vec<Vec<String>> = out.images.iter().map(|p| p.captions.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn expansion_reaches_cpi_and_preserves_seed() {
        let out = expand(
            dataset(5),
            2,
            &CannedCaptioner { text: "a shape".into() },
            &PromptTemplate::llava_style(),
            4,
        )
        .unwrap();
        assert_eq!(out.pair_count(), 10);
        for (i, p) in out.images.iter().enumerate() {
            assert_eq!(p.captions.len(), 2);
            assert_eq!(p.captions[0], format!("seed caption {i}"));
        }
    }

    #[test]
    fn empty_caption_from_captioner_is_expansion_error() {
        let err = expand(
            dataset(2),
            2,
            &EmptyCaptioner,
            &PromptTemplate::llava_style(),
            1,
        )
        .unwrap_err();
        match err {
            EdgeError::Expansion { image_id, .. } => assert!(image_id.starts_with("img_")),
            other => panic!("expected expansion error, got {other}"),
        }
    }

    struct IdentityRephraser;
    impl CaptionRephraser for IdentityRephraser {
        fn rephrase(&self, caption: &str) -> Result<String> {
            Ok(caption.to_string())
        }
    }

    #[test]
    fn rephrase_identity_and_arity() {
        let caps = vec!["one".to_string(), "two".to_string(), "three".to_string()];
        let out = rephrase_preprocess(&caps, &IdentityRephraser).unwrap();
        assert_eq!(out, caps);
        assert!(rephrase_preprocess(&[], &IdentityRephraser).is_err());
    }

    #[test]
    fn overlong_caption_rejected() {
        let long = vec!["word".to_string(); 65].join(" ");
        assert!(validate_caption(&long).is_err());
        assert!(validate_caption(&"word ".repeat(64)).is_ok());
    }
}
