//! Offline captioner that reads an image's attributes back off the pixels
//! and recaptions it through the toy grammar. Fully deterministic, so the
//! whole pipeline can run without a network.

use super::{CaptionRequest, Captioner};
use crate::dataset_io::toy::{caption_text, estimate_attributes};
use crate::error::Result;

pub struct TemplateCaptioner {
    /// Mean-squared-error budget above which a match is rejected and the
    /// hash fallback caption is used instead.
    pub max_mse: f64,
}

impl Default for TemplateCaptioner {
    fn default() -> Self {
        TemplateCaptioner { max_mse: 0.25 }
    }
}

impl TemplateCaptioner {
    pub fn new() -> Self {
        Self::default()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Captioner for TemplateCaptioner {
    fn caption(&self, request: &CaptionRequest) -> Result<String> {
        request.validate()?;
        match estimate_attributes(&request.image, self.max_mse) {
            Some(attrs) => Ok(caption_text(&attrs, request.variation)),
            None => {
                // no template is close enough: emit a generic but still
                // deterministic sentence keyed on the pixel content
                let h = fnv1a(&request.image.data) ^ request.variation as u64;
                let tones = ["muted", "bright", "soft", "sharp"];
                let tone = tones[(h % tones.len() as u64) as usize];
                Ok(format!("an abstract {tone} pattern of colored pixels"))
            }
        }
    }

    fn id(&self) -> &str {
        "template-captioner"
    }
}
