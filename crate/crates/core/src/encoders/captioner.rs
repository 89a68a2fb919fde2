//! Client for an external image captioner.
//!
//! Protocol: `POST <endpoint>/describe` with
//! `{"image_b64", "prompt", "temperature", "top_p"}`, answered by
//! `{"caption"}`. Captions are fetched once and cached in `captions.jsonl`;
//! training never talks to the network.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::captions::{write_captions, CaptionPair};
use crate::error::{Error, Result};

pub const DEFAULT_PROMPT: &str = "What are the components in this picture?";
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_TOP_P: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub timeout: Duration,
    /// Total attempts per image for transport failures.
    pub attempts: u32,
    pub retry_delay: Duration,
    /// Maximum in-flight requests.
    pub concurrency: usize,
}

impl CaptionerConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            prompt: DEFAULT_PROMPT.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            timeout: Duration::from_secs(60),
            attempts: 3,
            retry_delay: Duration::from_millis(200),
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescribeRequest {
    pub image_b64: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
}

#[derive(Clone, Debug, Deserialize)]
struct DescribeResponse {
    caption: String,
}

impl DescribeRequest {
    pub fn new(image_bytes: &[u8], cfg: &CaptionerConfig) -> Self {
        Self {
            image_b64: base64::engine::general_purpose::STANDARD.encode(image_bytes),
            prompt: cfg.prompt.clone(),
            temperature: cfg.temperature,
            top_p: cfg.top_p,
        }
    }
}

fn agent(cfg: &CaptionerConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn describe_url(endpoint: &str) -> String {
    format!("{}/describe", endpoint.trim_end_matches('/'))
}

/// Sends one image to the captioner and returns its caption.
pub fn describe_via_captioner(image: &Path, cfg: &CaptionerConfig) -> Result<String> {
    let bytes = std::fs::read(image).map_err(|e| Error::io(image, e))?;
    let body = DescribeRequest::new(&bytes, cfg);
    describe_request(&agent(cfg), &body, cfg)
}

fn describe_request(agent: &ureq::Agent, body: &DescribeRequest, cfg: &CaptionerConfig) -> Result<String> {
    let url = describe_url(&cfg.endpoint);
    let attempts = cfg.attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        match agent.post(&url).send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if status != 200 {
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    return Err(Error::CaptionerStatus { status, body: text });
                }
                let parsed: DescribeResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| Error::CaptionerResponse(e.to_string()))?;
                let caption = parsed.caption.trim().to_string();
                if caption.is_empty() {
                    return Err(Error::CaptionerResponse("empty caption".into()));
                }
                return Ok(caption);
            }
            Err(e) => {
                last = e.to_string();
                if attempt < attempts {
                    thread::sleep(cfg.retry_delay);
                }
            }
        }
    }
    Err(Error::CaptionerRetriable {
        attempts,
        message: last,
    })
}

/// Captions both temporal images of every listed sample and writes
/// `captions.jsonl`. Requests run on up to `cfg.concurrency` threads; the
/// file is written once, in input order, after all requests finish.
pub fn caption_pairs(
    pairs: &[(String, PathBuf, PathBuf)],
    cfg: &CaptionerConfig,
    out: &Path,
) -> Result<Vec<CaptionPair>> {
    let agent = agent(cfg);
    let results: Mutex<Vec<Option<Result<CaptionPair>>>> =
        Mutex::new((0..pairs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let workers = cfg.concurrency.max(1).min(pairs.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    if *n >= pairs.len() {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let (id, a, b) = &pairs[i];
                let one = |p: &Path| -> Result<String> {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    describe_request(&agent, &DescribeRequest::new(&bytes, cfg), cfg)
                };
                let r = one(a).and_then(|t1| {
                    Ok(CaptionPair {
                        id: id.clone(),
                        t1,
                        t2: one(b)?,
                    })
                });
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let pairs: Vec<CaptionPair> = results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every index processed"))
        .collect::<Result<_>>()?;
    write_captions(out, &pairs)?;
    Ok(pairs)
}
