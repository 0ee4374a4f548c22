//! HTTP client for an external embedding service.
//!
//! Protocol: POST `<endpoint>/embed` with `{"texts":[...]}`; the server
//! replies `{"dim": n, "vectors": [[f32,...],...]}`. Vectors are returned
//! in request order and L2-normalized here if the server did not.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingMatrix, EmbeddingProvider};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    timeout: Duration,
    retries: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

impl RemoteEmbedder {
    /// `dim` is the expected embedding dimension; a server that answers
    /// with a different one is a contract violation.
    pub fn new(endpoint: impl Into<String>, dim: usize, timeout: Duration, retries: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Network {
                attempts: 0,
                reason: e.to_string(),
            })?;
        Ok(RemoteEmbedder {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            dim,
            timeout,
            retries,
        client,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn post(&self, texts: &[&str]) -> std::result::Result<reqwest::blocking::Response, reqwest::Error> {
        self.client
            .post(format!("{}/embed", self.endpoint))
            .json(&EmbedRequest { texts })
            .send()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<EmbeddingMatrix> {
        let attempts = self.retries + 1;
        let mut last_err = String::new();
        for attempt in 1..=attempts {
            match self.post(texts) {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_server_error() {
                        last_err = format!("HTTP status {status}");
                        if attempt == attempts {
                            return Err(Error::HttpStatus {
                                status: status.as_u16(),
                            });
                        }
                        continue;
                    }
                    if !status.is_success() {
                        return Err(Error::HttpStatus {
                            status: status.as_u16(),
                        });
                    }
                    let body: EmbedResponse = resp.json().map_err(|e| Error::Network {
                        attempts: attempt,
                        reason: format!("invalid response body: {e}"),
                    })?;
                    return decode_response(body, texts.len(), self.dim);
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Network {
            attempts,
            reason: last_err,
        })
    }
}

fn decode_response(body: EmbedResponse, sent: usize, expected_dim: usize) -> Result<EmbeddingMatrix> {
    if body.vectors.len() != sent {
        return Err(Error::VectorCountMismatch {
            sent,
            got: body.vectors.len(),
        });
    }
    if body.dim != expected_dim {
        return Err(Error::DimMismatch {
            expected: expected_dim,
            got: body.dim,
        });
    }
    let mut data = Vec::with_capacity(sent * body.dim);
    for v in &body.vectors {
        if v.len() != body.dim {
            return Err(Error::DimMismatch {
                expected: body.dim,
                got: v.len(),
            });
        }
        data.extend_from_slice(v);
    }
    let mut matrix = EmbeddingMatrix::new(body.dim, data)?;
    matrix.normalize_rows();
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_mismatch_detected() {
        let body = EmbedResponse {
            dim: 4,
            vectors: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
        };
        assert!(matches!(
            decode_response(body, 3, 4),
            Err(Error::VectorCountMismatch { sent: 3, got: 2 })
        ));
    }

    #[test]
    fn ragged_vectors_detected() {
        let body = EmbedResponse {
            dim: 4,
            vectors: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0]],
        };
        assert!(matches!(decode_response(body, 2, 4), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn vectors_are_normalized() {
        let body = EmbedResponse {
            dim: 4,
            vectors: vec![vec![3.0, 4.0, 0.0, 0.0]],
        };
        let m = decode_response(body, 1, 4).unwrap();
        assert!((f64::from(m.row(0)[0]) - 0.6).abs() < 1e-6);
        assert!(m.is_normalized());
    }
}
