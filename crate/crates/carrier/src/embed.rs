//! Client for an external sentence-encoder service.
//!
//! Wire protocol: `POST {"sentences": [...]}` answered by
//! `{"vectors": [[...], ...]}` with one vector per sentence.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use carrier_core::cloud::EmbeddingCloud;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// Overrides the configured endpoint when set.
pub const ENDPOINT_ENV: &str = "CARRIER_EMBED_ENDPOINT";

const RESPONSE_LIMIT: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedClient {
    pub endpoint: String,
    pub batch_size: usize,
    /// Batches in flight at once.
    pub parallelism: usize,
    pub timeout_secs: f64,
    /// Retries after the first attempt on transport errors, 429 and 5xx.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl EmbedClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        EmbedClient {
            endpoint: endpoint.into(),
            batch_size: 256,
            parallelism: 4,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 200,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(AppError::Config(format!("no embedding endpoint; pass --endpoint or set {ENDPOINT_ENV}")));
        }
        if self.batch_size == 0 || self.parallelism == 0 {
            return Err(AppError::Config("batch_size and parallelism must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(AppError::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn request_count(&self, sentences: usize) -> usize {
        sentences.div_ceil(self.batch_size)
    }

    /// Embeds `sentences` in order. `ids` name the rows of the result.
    pub fn embed(&self, sentences: &[String], ids: Vec<String>, source: &str) -> Result<EmbeddingCloud> {
        self.validate()?;
        if sentences.is_empty() {
            return Err(AppError::Usage("nothing to embed".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(self.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let chunks: Vec<&[String]> = sentences.chunks(self.batch_size).collect();
        let results: Vec<Mutex<Option<Result<Vec<Vec<f64>>>>>> = chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let failed = std::sync::atomic::AtomicBool::new(false);
        thread::scope(|scope| {
            for _ in 0..self.parallelism.min(chunks.len()) {
                scope.spawn(|| loop {
                    if failed.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= chunks.len() {
                        break;
                    }
                    let out = self.post_batch(&agent, chunks[i]);
                    if out.is_err() {
                        failed.store(true, Ordering::Relaxed);
                    }
                    *results[i].lock().expect("slot lock") = Some(out);
                });
            }
        });
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(sentences.len());
        for slot in results {
            match slot.into_inner().expect("slot lock") {
                Some(Ok(batch)) => rows.extend(batch),
                Some(Err(e)) => return Err(e),
                // skipped after an earlier failure
                None => continue,
            }
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(AppError::Http("service returned empty vectors".into()));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(AppError::Http(format!("vector {i} has dimension {}, expected {d}", r.len())));
        }
        let points = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Ok(EmbeddingCloud::new(points, ids, source)?)
    }

    fn post_batch(&self, agent: &ureq::Agent, batch: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = serde_json::to_vec(&Request { sentences: batch })?;
        let mut attempt = 0;
        loop {
            let outcome = agent
                .post(&self.endpoint)
                .header("Content-Type", "application/json")
                .send(&body[..]);
            let retryable = match outcome {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        let text = resp
                            .body_mut()
                            .with_config()
                            .limit(RESPONSE_LIMIT)
                            .read_to_string()
                            .map_err(|e| AppError::Http(e.to_string()))?;
                        let parsed: Response = serde_json::from_str(&text)
                            .map_err(|e| AppError::Http(format!("malformed response: {e}")))?;
                        if parsed.vectors.len() != batch.len() {
                            return Err(AppError::Http(format!(
                                "{} vectors for {} sentences",
                                parsed.vectors.len(),
                                batch.len()
                            )));
                        }
                        return Ok(parsed.vectors);
                    }
                    if status == 429 || status >= 500 {
                        format!("status {status}")
                    } else {
                        return Err(AppError::Http(format!("status {status}")));
                    }
                }
                Err(e) => e.to_string(),
            };
            if attempt >= self.max_retries {
                return Err(AppError::Http(format!("{retryable} after {} attempts", attempt + 1)));
            }
            thread::sleep(Duration::from_millis(self.backoff_ms.saturating_mul(1 << attempt.min(16))));
            attempt += 1;
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    sentences: &'a [String],
}

#[derive(Deserialize)]
struct Response {
    vectors: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_count_is_ceiling_division() {
        let c = EmbedClient::new("http://localhost:1");
        assert_eq!(c.request_count(104_976), 411);
        assert_eq!(c.request_count(256), 1);
        assert_eq!(c.request_count(257), 2);
    }

    #[test]
    fn missing_endpoint_is_a_config_error() {
        let c = EmbedClient::new("");
        let err = c.embed(&["a".into()], vec!["0".into()], "t").unwrap_err();
        assert!(matches!(err, AppError::Config(_)));
    }

    #[test]
    fn unreachable_service_fails_after_retries() {
        let mut c = EmbedClient::new("http://127.0.0.1:9/embed");
        c.max_retries = 1;
        c.backoff_ms = 1;
        c.timeout_secs = 2.0;
        let err = c.embed(&["a".into()], vec!["0".into()], "t").unwrap_err();
        assert!(err.to_string().contains("after 2 attempts"), "{err}");
    }
}
