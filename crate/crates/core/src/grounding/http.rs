//! JSON-over-HTTP clients for the labeling/action adapter service.
//!
//! Endpoints: `POST /label`, `POST /action`, `GET /health`. Images travel as
//! standard base64; frame keys are passed alongside so stub backends can key
//! on them.

use std::time::Duration;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use serde::{Deserialize, Serialize};

use super::{ActionClient, ClientError, ImageInput, LabelClient};
use crate::lexicon::{Canonical, RoomLexicon};
use crate::model::{Action, RoomLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub room_type: String,
    #[serde(default)]
    pub objects: Vec<String>,
    pub room_confidence: f64,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub image_a: String,
    pub image_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResponse {
    pub action: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub backend_id: String,
    pub lexicon_version: String,
}

impl LabelRequest {
    pub fn from_image(image: ImageInput<'_>) -> Self {
        Self {
            image: B64.encode(image.bytes),
            key: Some(image.key.to_string()),
        }
    }
}

impl ActionRequest {
    pub fn from_images(a: ImageInput<'_>, b: ImageInput<'_>) -> Self {
        Self {
            image_a: B64.encode(a.bytes),
            image_b: B64.encode(b.bytes),
            key_a: Some(a.key.to_string()),
            key_b: Some(b.key.to_string()),
        }
    }
}

impl LabelResponse {
    pub fn into_label(self, lexicon: &RoomLexicon) -> Result<RoomLabel, ClientError> {
        let Canonical::Known(room) = lexicon.canonicalize(&self.room_type) else {
            return Err(ClientError::BadResponse(format!(
                "room type {:?} is not in the lexicon",
                self.room_type
            )));
        };
        RoomLabel::new(room, self.objects, self.room_confidence).map_err(|e| ClientError::BadResponse(e.to_string()))
    }
}

impl ActionResponse {
    pub fn into_action(self) -> Result<Action, ClientError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ClientError::BadResponse(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        match self.action.as_str() {
            "forward" => Ok(Action::Forward),
            "turn_left" => Ok(Action::TurnLeft),
            "turn_right" => Ok(Action::TurnRight),
            other => Err(ClientError::BadResponse(format!("unexpected action {other:?}"))),
        }
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
    agent: &ureq::Agent,
    url: &str,
    body: &Req,
) -> Result<Resp, ClientError> {
    let mut resp = agent
        .post(url)
        .send_json(body)
        .map_err(|e| ClientError::Unavailable(e.to_string()))?;
    let status = resp.status().as_u16();
    if status != 200 {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(ClientError::Unavailable(format!("HTTP {status}: {text}")));
    }
    resp.body_mut()
        .read_json::<Resp>()
        .map_err(|e| ClientError::BadResponse(e.to_string()))
}

fn health(agent: &ureq::Agent, base: &str) -> Result<HealthResponse, ClientError> {
    let mut resp = agent
        .get(format!("{base}/health"))
        .call()
        .map_err(|e| ClientError::Unavailable(e.to_string()))?;
    let status = resp.status().as_u16();
    if status != 200 {
        return Err(ClientError::Unavailable(format!("HTTP {status}")));
    }
    resp.body_mut()
        .read_json()
        .map_err(|e| ClientError::BadResponse(e.to_string()))
}

pub struct HttpLabelClient {
    base: String,
    agent: ureq::Agent,
    lexicon: RoomLexicon,
}

impl HttpLabelClient {
    pub fn new(base_url: &str, timeout: Duration, lexicon: RoomLexicon) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent: agent(timeout),
            lexicon,
        }
    }

    pub fn health(&self) -> Result<HealthResponse, ClientError> {
        health(&self.agent, &self.base)
    }
}

impl LabelClient for HttpLabelClient {
    fn label(&self, image: ImageInput<'_>) -> Result<RoomLabel, ClientError> {
        let resp: LabelResponse = post(&self.agent, &format!("{}/label", self.base), &LabelRequest::from_image(image))?;
        resp.into_label(&self.lexicon)
    }
}

pub struct HttpActionClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpActionClient {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent: agent(timeout),
        }
    }

    pub fn health(&self) -> Result<HealthResponse, ClientError> {
        health(&self.agent, &self.base)
    }
}

impl ActionClient for HttpActionClient {
    fn infer(&self, a: ImageInput<'_>, b: ImageInput<'_>) -> Result<Action, ClientError> {
        let resp: ActionResponse = post(&self.agent, &format!("{}/action", self.base), &ActionRequest::from_images(a, b))?;
        resp.into_action()
    }
}
