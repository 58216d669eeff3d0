//! Async client for the routing service.

use std::time::Duration;

use eiarag_core::wire::{AnswerRequest, AnswerResponse, ErrorResponse, HealthResponse, RouteRequest, RouteResponse};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("service answered {status} ({kind}): {message}")]
    Api { status: u16, kind: String, message: String },
    #[error("malformed response from {url}: {message}")]
    Decode { url: String, message: String },
}

impl ClientError {
    pub fn kind(&self) -> &str {
        match self {
            ClientError::Transport { .. } => "transport",
            ClientError::Api { kind, .. } => kind,
            ClientError::Decode { .. } => "format",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceClient {
    base: String,
    http: reqwest::Client,
}

impl ServiceClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        Self::with_timeout(base_url, Duration::from_secs(30))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|source| ClientError::Transport {
                url: base_url.to_string(),
                source,
            })?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub async fn health(&self) -> Result<HealthResponse, ClientError> {
        let url = format!("{}/healthz", self.base);
        let resp = self.http.get(&url).send().await;
        self.finish(url, resp).await
    }

    pub async fn route(&self, question: &str) -> Result<RouteResponse, ClientError> {
        self.post(
            "route",
            &RouteRequest {
                question: question.to_string(),
            },
        )
        .await
    }

    pub async fn answer(&self, question: &str) -> Result<AnswerResponse, ClientError> {
        self.post(
            "answer",
            &AnswerRequest {
                question: question.to_string(),
            },
        )
        .await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = format!("{}/{path}", self.base);
        let resp = self.http.post(&url).json(body).send().await;
        self.finish(url, resp).await
    }

    async fn finish<T: DeserializeOwned>(
        &self,
        url: String,
        resp: Result<reqwest::Response, reqwest::Error>,
    ) -> Result<T, ClientError> {
        let resp = resp.map_err(|source| ClientError::Transport {
            url: url.clone(),
            source,
        })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|source| ClientError::Transport {
            url: url.clone(),
            source,
        })?;
        if !status.is_success() {
            let (kind, message) = match serde_json::from_slice::<ErrorResponse>(&bytes) {
                Ok(e) => (e.kind, e.error),
                Err(_) => ("http".to_string(), String::from_utf8_lossy(&bytes).into_owned()),
            };
            return Err(ClientError::Api {
                status: status.as_u16(),
                kind,
                message,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url,
            message: e.to_string(),
        })
    }
}
