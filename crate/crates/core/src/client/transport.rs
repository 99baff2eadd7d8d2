use std::time::Duration;

use thiserror::Error;

use super::wire::ChatRequest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("attempt timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Connection(String),
}

/// Delivers one chat-completions POST. Implemented over HTTP and by the
/// in-process simulator.
pub trait Transport: Send + Sync {
    fn post_chat(
        &self,
        base_url: &str,
        api_key: &str,
        request: &ChatRequest,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

pub fn completions_url(base_url: &str) -> String {
    format!("{}/v1/chat/completions", base_url.trim_end_matches('/'))
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

fn classify(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(e)
            if matches!(
                e.kind(),
                std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
            ) =>
        {
            TransportError::Timeout
        }
        other => TransportError::Connection(other.to_string()),
    }
}

impl Transport for HttpTransport {
    fn post_chat(
        &self,
        base_url: &str,
        api_key: &str,
        request: &ChatRequest,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut resp = self
            .agent
            .post(&completions_url(base_url))
            .header("Authorization", &format!("Bearer {api_key}"))
            .config()
            .timeout_global(Some(timeout))
            .build()
            .send_json(request)
            .map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(classify)?;
        Ok(HttpReply { status, body })
    }
}
