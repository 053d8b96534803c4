//! Blocking HTTP client for an external multimodal captioning service.
//! Images are shipped as base64 PNG; the service replies with a single
//! caption string. Failures are retried with linear backoff.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{CaptionRequest, Captioner};
use crate::error::{EdgeError, Result};

pub const ENDPOINT_ENV: &str = "EDGE_CAPTIONER_ENDPOINT";

#[derive(Debug, Clone)]
pub struct MllmClientConfig {
    pub endpoint: String,
    pub max_retries: usize,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for MllmClientConfig {
    fn default() -> Self {
        MllmClientConfig {
            endpoint: "http://127.0.0.1:8080/caption".to_string(),
            max_retries: 2,
            backoff: Duration::from_millis(50),
            timeout: Duration::from_secs(30),
        }
    }
}

impl MllmClientConfig {
    /// Default config with the endpoint taken from `EDGE_CAPTIONER_ENDPOINT`
    /// when that variable is set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(ep) = std::env::var(ENDPOINT_ENV) {
            if !ep.trim().is_empty() {
                cfg.endpoint = ep;
            }
        }
        cfg
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    image: String,
    prompt: &'a str,
    variation: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    caption: String,
}

pub struct MllmClient {
    cfg: MllmClientConfig,
    http: reqwest::blocking::Client,
    id: String,
}

impl MllmClient {
    pub fn new(cfg: MllmClientConfig) -> Result<Self> {
        if cfg.endpoint.trim().is_empty() {
            return Err(EdgeError::Config("captioner endpoint is empty".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| EdgeError::Config(format!("http client: {e}")))?;
        Ok(MllmClient {
            cfg,
            http,
            id: "mllm-client".to_string(),
        })
    }

    fn call_once(&self, body: &WireRequest) -> std::result::Result<String, String> {
        let resp = self
            .http
            .post(&self.cfg.endpoint)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("status {}", resp.status()));
        }
        let parsed: WireResponse = resp.json().map_err(|e| e.to_string())?;
        Ok(parsed.caption)
    }
}

impl Captioner for MllmClient {
    fn caption(&self, request: &CaptionRequest) -> Result<String> {
        request.validate()?;
        let png = request.image.to_png_bytes()?;
        let body = WireRequest {
            image: base64::engine::general_purpose::STANDARD.encode(png),
            prompt: &request.prompt,
            variation: request.variation,
        };
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff * attempt as u32);
            }
            match self.call_once(&body) {
                Ok(c) => return Ok(c),
                Err(e) => last = e,
            }
        }
        Err(EdgeError::Transport {
            retries: self.cfg.max_retries,
            message: last,
        })
    }

    fn id(&self) -> &str {
        &self.id
    }
}

/// Text-only rephrasing used by the pre-processing caption strategy.
pub trait CaptionRephraser {
    fn rephrase(&self, caption: &str) -> Result<String>;
}

impl CaptionRephraser for MllmClient {
    fn rephrase(&self, caption: &str) -> Result<String> {
        #[derive(Serialize)]
        struct Req<'a> {
            prompt: &'a str,
            caption: &'a str,
        }
        let body = Req {
            prompt: "Rephrase this caption in one sentence",
            caption,
        };
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff * attempt as u32);
            }
            let out = self
                .http
                .post(&self.cfg.endpoint)
                .json(&body)
                .send()
                .map_err(|e| e.to_string())
                .and_then(|r| {
                    if r.status().is_success() {
                        r.json::<WireResponse>().map_err(|e| e.to_string())
                    } else {
                        Err(format!("status {}", r.status()))
                    }
                });
            match out {
                Ok(r) => return Ok(r.caption),
                Err(e) => last = e,
            }
        }
        Err(EdgeError::Transport {
            retries: self.cfg.max_retries,
            message: last,
        })
    }
}
