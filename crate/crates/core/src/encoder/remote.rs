//! Client for a model server speaking the `/encode` JSON contract:
//!
//! ```text
//! POST /encode {"modality":"text"|"image","payload":<text or base64 RGB8 square crop>,"dim":d}
//!   -> {"embedding":[f64; d]}
//! ```
//!
//! Returned vectors are always re-normalized here. Image payloads must be
//! square. A canary text is encoded twice on connect and must come back
//! bit-identical, otherwise the encoder is rejected as non-deterministic.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EncoderDescriptor, ImageContent, ImageRequest, Modality};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

const CANARY: &str = "determinism canary: a photo of a car";

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            max_attempts: 3,
            timeout: Duration::from_secs(30),
            backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    modality: &'a str,
    payload: &'a str,
    dim: usize,
}

#[derive(Deserialize)]
struct EncodeResponse {
    embedding: Vec<f64>,
}

pub struct RemoteEncoder {
    descriptor: EncoderDescriptor,
    endpoint: String,
    agent: ureq::Agent,
    config: RemoteConfig,
    permits: Semaphore,
}

impl std::fmt::Debug for RemoteEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEncoder")
            .field("endpoint", &self.endpoint)
            .field("dim", &self.descriptor.dim)
            .finish()
    }
}

impl RemoteEncoder {
    /// Connects to `base_url` and runs the determinism canary.
    pub fn connect(base_url: &str, dim: usize, config: RemoteConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Configuration("remote encoder dimension must be positive".into()));
        }
        let base = base_url.trim_end_matches('/');
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let encoder = Self {
            descriptor: EncoderDescriptor {
                encoder_id: format!("remote:{base}"),
                dim,
                modality: Modality::Both,
            },
            endpoint: format!("{base}/encode"),
            agent,
            permits: Semaphore::new(config.max_in_flight.max(1)),
            config,
        };
        let first = encoder.request("text", CANARY)?;
        let second = encoder.request("text", CANARY)?;
        let bits = |v: &EmbeddingVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&first) != bits(&second) {
            return Err(Error::Configuration(format!(
                "encoder at {base} returned different vectors for identical input"
            )));
        }
        Ok(encoder)
    }

    fn request(&self, modality: &str, payload: &str) -> Result<EmbeddingVector> {
        let _permit = self.permits.acquire();
        let body = EncodeRequest {
            modality,
            payload,
            dim: self.descriptor.dim,
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.try_once(&body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable { message, retry_after }) => {
                    if attempts >= self.config.max_attempts {
                        return Err(Error::Transport {
                            message,
                            attempts,
                            retryable: true,
                            retry_after,
                        });
                    }
                    let wait = retry_after
                        .unwrap_or(self.config.backoff * 2u32.saturating_pow(attempts - 1));
                    log::debug!("encoder request failed ({message}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }

    fn try_once(&self, body: &EncodeRequest<'_>) -> std::result::Result<EmbeddingVector, Attempt> {
        let mut resp = match self.agent.post(&self.endpoint).send_json(body) {
            Ok(r) => r,
            Err(e) => {
                return Err(Attempt::Retryable {
                    message: e.to_string(),
                    retry_after: None,
                })
            }
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(Attempt::Retryable {
                message: format!("server answered {status}"),
                retry_after,
            });
        }
        if status != 200 {
            return Err(Attempt::Fatal(Error::Transport {
                message: format!("server answered {status}"),
                attempts: 1,
                retryable: false,
                retry_after: None,
            }));
        }
        let parsed: EncodeResponse = resp.body_mut().read_json().map_err(|e| {
            Attempt::Fatal(Error::Transport {
                message: format!("malformed encoder response: {e}"),
                attempts: 1,
                retryable: false,
                retry_after: None,
            })
        })?;
        if parsed.embedding.len() != self.descriptor.dim {
            return Err(Attempt::Fatal(Error::Configuration(format!(
                "encoder returned {} values, expected {}",
                parsed.embedding.len(),
                self.descriptor.dim
            ))));
        }
        EmbeddingVector::from_f64(&parsed.embedding).map_err(Attempt::Fatal)
    }
}

enum Attempt {
    Retryable {
        message: String,
        retry_after: Option<Duration>,
    },
    Fatal(Error),
}

impl super::Encoder for RemoteEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("text is empty".into()));
        }
        self.request("text", text)
    }

    fn encode_image(&self, request: &ImageRequest<'_>) -> Result<EmbeddingVector> {
        let ImageContent::Pixels(buf) = request.content else {
            return Err(Error::InvalidInput(
                "remote encoder needs pixel crops, not synthetic token images".into(),
            ));
        };
        if !buf.is_square() {
            return Err(Error::InvalidInput(format!(
                "crop for `{}` is {}x{}; the encoder requires square input",
                request.key,
                buf.width(),
                buf.height()
            )));
        }
        let payload = base64::engine::general_purpose::STANDARD.encode(buf.data());
        self.request("image", &payload)
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|p| p.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|p| p.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}
