//! OpenAI-style chat completion client.
//!
//! Request: `{"model", "temperature", "messages": [system, user]}` where the
//! user message is a list of parts: one text part followed by one
//! `image_url` part per attached frame (PNG data URLs, longest side capped).
//! The credential is sent as a bearer token.

use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{Completion, CompletionBackend, SendError, Usage};
use crate::frames::ImageStore;
use crate::prompt::Prompt;

pub struct RemoteBackend {
    endpoint: String,
    model: String,
    credential: String,
    temperature: f64,
    max_image_side: u32,
    images: Arc<dyn ImageStore>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Downscales so the longest side is at most `max_side` and re-encodes as
/// PNG, returned as a data URL.
pub fn encode_image(bytes: &[u8], max_side: u32) -> Result<String, image::ImageError> {
    let img = image::load_from_memory(bytes)?;
    let img = if img.width().max(img.height()) > max_side {
        img.resize(max_side, max_side, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(format!("data:image/png;base64,{}", B64.encode(out.into_inner())))
}

impl RemoteBackend {
    pub fn new(
        endpoint: &str,
        model: &str,
        credential: String,
        timeout: Duration,
        temperature: f64,
        max_image_side: u32,
        images: Arc<dyn ImageStore>,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            credential,
            temperature,
            max_image_side,
            images,
            agent,
        }
    }

    pub fn request_body(&self, prompt: &Prompt) -> Result<Value, SendError> {
        let mut parts = vec![json!({"type": "text", "text": prompt.user_text})];
        for frame in &prompt.images {
            let bytes = self.images.image_bytes(frame).map_err(|e| SendError::Rejected {
                status: 0,
                detail: e.to_string(),
            })?;
            if bytes.is_empty() {
                log::warn!("no image bytes for {}; attachment skipped", frame.key());
                continue;
            }
            let url = encode_image(&bytes, self.max_image_side).map_err(|e| SendError::Rejected {
                status: 0,
                detail: format!("{}: {e}", frame.key()),
            })?;
            parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        Ok(json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": parts},
            ],
        }))
    }
}

impl CompletionBackend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn send(&self, prompt: &Prompt, _attempt: u32) -> Result<Completion, SendError> {
        let body = self.request_body(prompt)?;
        let result = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.credential))
            .send_json(&body);
        let mut resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Err(SendError::Timeout(t.to_string())),
            Err(e) => return Err(SendError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        if status != 200 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(match status {
                408 | 429 | 500..=599 => SendError::Transient(format!("HTTP {status}: {detail}")),
                _ => SendError::Rejected { status, detail },
            });
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| SendError::Transient(format!("malformed response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| SendError::Transient("response has no choices".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(Completion {
            text,
            model_id: self.model.clone(),
            usage,
            sends: 0,
            corruptions: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_images_are_downscaled() {
        let img = image::RgbImage::from_pixel(1024, 256, image::Rgb([10, 20, 30]));
        let mut png = Cursor::new(Vec::new());
        img.write_to(&mut png, image::ImageFormat::Png).unwrap();
        let url = encode_image(png.get_ref(), 512).unwrap();
        let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
        let back = image::load_from_memory(&B64.decode(b64).unwrap()).unwrap();
        assert_eq!((back.width(), back.height()), (512, 128));
    }
}
