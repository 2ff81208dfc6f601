//! HTTP clients for the deployed models.
//!
//! * chat: any chat-completions compatible endpoint (`{model, messages}` in,
//!   `choices[0].message.content` out).
//! * captioner: raw image bytes in, `captionResult.text` (or the older
//!   `description.captions[0].text`) out.
//! * segmenter: raw image bytes in, `{width, height, masks: [{counts}]}` out,
//!   where `counts` is a row-major run-length encoding that starts with a run
//!   of unset pixels.

use std::io::Cursor;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use reqwest::{Client, RequestBuilder, Response, StatusCode};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{
    BackendConfig, BackendError, BackendHealth, Backends, CaptionResult, Captioner, ChatExchange,
    ChatMessage, ChatModel, ConfigError, ExchangeMeta, RetryPolicy, Segmenter,
};
use crate::geometry::{Bbox, Mask};
use crate::mask::RawSegment;

pub fn backends(config: &BackendConfig) -> Result<Backends, ConfigError> {
    let client = Client::builder()
        .timeout(config.request_timeout)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("http client: {e}")))?;
    let transport = |endpoint: &Option<String>, backend| {
        endpoint.as_ref().map(|url| HttpTransport {
            backend,
            client: client.clone(),
            endpoint: url.clone(),
            limiter: Arc::new(Semaphore::new(config.max_in_flight.max(1))),
            retry: config.retry,
            health_timeout: config.health_timeout,
        })
    };

    let segmenter: Arc<dyn Segmenter> = match transport(&config.segmenter_endpoint, "segmenter") {
        Some(http) => Arc::new(HttpSegmenter { http }),
        None => Arc::new(Unconfigured("segmenter")),
    };
    let captioner: Arc<dyn Captioner> = match transport(&config.caption_endpoint, "captioner") {
        Some(http) => Arc::new(HttpCaptioner {
            http,
            api_key: config.caption_api_key.clone(),
        }),
        None => Arc::new(Unconfigured("captioner")),
    };
    let chat: Arc<dyn ChatModel> = match transport(&config.chat_endpoint, "chat") {
        Some(http) => Arc::new(HttpChat {
            http,
            api_key: config.chat_api_key.clone(),
            model: config.chat_model.clone(),
        }),
        None => Arc::new(Unconfigured("chat")),
    };
    Ok(Backends {
        segmenter,
        captioner,
        chat,
    })
}

/// Shared plumbing: in-flight limit, retries, health probe.
#[derive(Clone)]
pub struct HttpTransport {
    backend: &'static str,
    client: Client,
    endpoint: String,
    limiter: Arc<Semaphore>,
    retry: RetryPolicy,
    health_timeout: Duration,
}

fn retryable_status(status: StatusCode) -> bool {
    status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS
}

impl HttpTransport {
    /// Sends the request, retrying connection failures, timeouts, 5xx and
    /// 429. Returns the response and the number of retries spent.
    async fn send(
        &self,
        build: impl Fn(&Client) -> RequestBuilder,
    ) -> Result<(Response, u32), BackendError> {
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                tokio::time::sleep(self.retry.delay(attempt - 1)).await;
            }
            let outcome = {
                let _permit = self.limiter.acquire().await.expect("semaphore never closed");
                build(&self.client).send().await
            };
            match outcome {
                Ok(resp) if retryable_status(resp.status()) => {
                    last = format!("HTTP {}", resp.status());
                }
                Ok(resp) if !resp.status().is_success() => {
                    let status = resp.status();
                    let body = resp.text().await.unwrap_or_default();
                    return Err(BackendError::Protocol {
                        backend: self.backend,
                        message: format!("HTTP {status}: {}", truncate(&body, 300)),
                    });
                }
                Ok(resp) => return Ok((resp, attempt)),
                Err(e) => last = e.to_string(),
            }
            tracing::warn!(backend = self.backend, attempt, error = %last, "request failed");
        }
        Err(BackendError::Transport {
            backend: self.backend,
            message: last,
            retries: self.retry.max_retries,
        })
    }

    async fn json<T: for<'de> Deserialize<'de>>(&self, resp: Response) -> Result<T, BackendError> {
        resp.json::<T>().await.map_err(|e| BackendError::Protocol {
            backend: self.backend,
            message: e.to_string(),
        })
    }

    async fn health(&self) -> BackendHealth {
        // any HTTP answer, even an error status, means the service is up
        match self
            .client
            .get(&self.endpoint)
            .timeout(self.health_timeout)
            .send()
            .await
        {
            Ok(_) => BackendHealth::Ok,
            Err(_) => BackendHealth::Down,
        }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub struct HttpChat {
    http: HttpTransport,
    api_key: Option<String>,
    model: String,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[async_trait]
impl ChatModel for HttpChat {
    async fn complete(&self, messages: &[ChatMessage]) -> Result<ChatExchange, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::Input("empty message list".into()));
        }
        let body = json!({ "model": self.model, "messages": messages });
        let started = Instant::now();
        let (resp, retries) = self
            .http
            .send(|c| {
                let req = c.post(&self.http.endpoint).json(&body);
                match &self.api_key {
                    Some(key) => req.bearer_auth(key),
                    None => req,
                }
            })
            .await?;
        let completion: ChatCompletion = self.http.json(resp).await?;
        let reply = completion
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol {
                backend: "chat",
                message: "reply has no choices[0].message.content".into(),
            })?;
        Ok(ChatExchange {
            messages: messages.to_vec(),
            reply,
            meta: ExchangeMeta {
                latency: started.elapsed(),
                retries,
            },
        })
    }

    async fn health(&self) -> BackendHealth {
        self.http.health().await
    }
}

pub struct HttpCaptioner {
    http: HttpTransport,
    api_key: Option<String>,
}

fn caption_text(body: &Value) -> Option<(String, Option<f64>)> {
    let entry = body
        .get("captionResult")
        .or_else(|| body.pointer("/description/captions/0"))?;
    let text = entry.get("text")?.as_str()?.to_string();
    Some((text, entry.get("confidence").and_then(Value::as_f64)))
}

/// Crops `region` out of `image` and re-encodes it as PNG.
pub fn crop_png(image: &[u8], region: Bbox) -> Result<Vec<u8>, BackendError> {
    let img = image::load_from_memory(image)
        .map_err(|e| BackendError::Input(format!("undecodable image: {e}")))?;
    if !region.fits_within(img.width() as usize, img.height() as usize) {
        return Err(BackendError::Input(format!(
            "region {region:?} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let crop = img.crop_imm(region.x1, region.y1, region.width(), region.height());
    let mut out = Cursor::new(Vec::new());
    crop.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| BackendError::Input(e.to_string()))?;
    Ok(out.into_inner())
}

#[async_trait]
impl Captioner for HttpCaptioner {
    async fn caption(
        &self,
        image: &[u8],
        region: Option<Bbox>,
    ) -> Result<CaptionResult, BackendError> {
        let payload = match region {
            Some(r) => crop_png(image, r)?,
            None => image.to_vec(),
        };
        // one extra attempt when the service answers with an empty caption
        for _ in 0..2 {
            let (resp, _) = self
                .http
                .send(|c| {
                    let req = c
                        .post(&self.http.endpoint)
                        .header("Content-Type", "application/octet-stream")
                        .body(payload.clone());
                    match &self.api_key {
                        Some(key) => req.header("Ocp-Apim-Subscription-Key", key),
                        None => req,
                    }
                })
                .await?;
            let body: Value = self.http.json(resp).await?;
            if let Some((text, confidence)) = caption_text(&body) {
                if let Some(caption) = CaptionResult::new(&text, confidence) {
                    return Ok(caption);
                }
            }
        }
        Err(BackendError::EmptyCaption)
    }

    async fn health(&self) -> BackendHealth {
        self.http.health().await
    }
}

pub struct HttpSegmenter {
    http: HttpTransport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterResponse {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<MaskRle>,
}

/// Row-major run lengths, alternating unset/set, starting with unset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub counts: Vec<usize>,
}

impl MaskRle {
    pub fn encode(mask: &Mask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &on in mask.as_slice() {
            if on != current {
                counts.push(run);
                run = 0;
                current = on;
            }
            run += 1;
        }
        counts.push(run);
        Self { counts }
    }

    pub fn decode(&self, width: usize, height: usize) -> Option<Mask> {
        let mut data = Vec::with_capacity(width * height);
        let mut on = false;
        for &n in &self.counts {
            data.extend(std::iter::repeat_n(on, n));
            on = !on;
        }
        Mask::from_vec(width, height, data)
    }
}

#[async_trait]
impl Segmenter for HttpSegmenter {
    async fn segment(&self, image: &[u8]) -> Result<Vec<RawSegment>, BackendError> {
        let img = image::load_from_memory(image)
            .map_err(|e| BackendError::Input(format!("undecodable image: {e}")))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (resp, _) = self
            .http
            .send(|c| {
                c.post(&self.http.endpoint)
                    .header("Content-Type", "application/octet-stream")
                    .body(image.to_vec())
            })
            .await?;
        let body: SegmenterResponse = self.http.json(resp).await?;
        let protocol = |message: String| BackendError::Protocol {
            backend: "segmenter",
            message,
        };
        if (body.width, body.height) != (w, h) {
            return Err(protocol(format!(
                "masks are {}x{}, image is {w}x{h}",
                body.width, body.height
            )));
        }
        let mut segments = Vec::with_capacity(body.masks.len());
        for (i, rle) in body.masks.iter().enumerate() {
            let mask = rle
                .decode(w, h)
                .ok_or_else(|| protocol(format!("mask {i} run lengths do not cover the image")))?;
            if mask.count() > 0 {
                let id = segments.len() as u32 + 1;
                segments.push(RawSegment::new(id, mask).expect("nonempty mask"));
            }
        }
        Ok(segments)
    }

    async fn health(&self) -> BackendHealth {
        self.http.health().await
    }
}

/// Placeholder for a backend whose endpoint is not set.
pub struct Unconfigured(pub &'static str);

impl Unconfigured {
    fn error(&self) -> BackendError {
        BackendError::Unconfigured { backend: self.0 }
    }
}

#[async_trait]
impl Segmenter for Unconfigured {
    async fn segment(&self, _: &[u8]) -> Result<Vec<RawSegment>, BackendError> {
        Err(self.error())
    }

    async fn health(&self) -> BackendHealth {
        BackendHealth::Unconfigured
    }
}

#[async_trait]
impl Captioner for Unconfigured {
    async fn caption(&self, _: &[u8], _: Option<Bbox>) -> Result<CaptionResult, BackendError> {
        Err(self.error())
    }

    async fn health(&self) -> BackendHealth {
        BackendHealth::Unconfigured
    }
}

#[async_trait]
impl ChatModel for Unconfigured {
    async fn complete(&self, _: &[ChatMessage]) -> Result<ChatExchange, BackendError> {
        Err(self.error())
    }

    async fn health(&self) -> BackendHealth {
        BackendHealth::Unconfigured
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip() {
        let mask = Mask::from_fn(5, 3, |x, y| (x + y) % 3 == 0);
        let rle = MaskRle::encode(&mask);
        assert_eq!(rle.decode(5, 3), Some(mask));
        assert_eq!(rle.decode(4, 3), None);
    }

    #[test]
    fn rle_starts_with_unset_run() {
        let mask = Mask::filled(2, 2, true);
        assert_eq!(MaskRle::encode(&mask).counts, vec![0, 4]);
    }

    #[test]
    fn caption_text_both_shapes() {
        let v4 = json!({"captionResult": {"text": "a door", "confidence": 0.9}});
        assert_eq!(caption_text(&v4), Some(("a door".into(), Some(0.9))));
        let v3 = json!({"description": {"captions": [{"text": "a mug"}]}});
        assert_eq!(caption_text(&v3), Some(("a mug".into(), None)));
        assert_eq!(caption_text(&json!({})), None);
    }
}
