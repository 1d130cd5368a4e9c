//! Outbound envelopes over HTTP POST, retried with capped exponential backoff.

use std::time::Duration;

use comverse_core::transport::Envelope;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
    pub attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            initial: Duration::from_millis(100),
            max: Duration::from_secs(5),
            attempts: 6,
        }
    }
}

impl Backoff {
    /// Wait before retry number `n` (0-based).
    pub fn delay(&self, n: u32) -> Duration {
        self.initial.saturating_mul(1u32 << n.min(20)).min(self.max)
    }
}

#[derive(Debug, Error)]
pub enum SendError {
    /// The peer answered and refused the message; retrying will not help.
    #[error("{url} refused the envelope with {status}: {body}")]
    Refused { url: String, status: u16, body: String },
    #[error("{url} unreachable after {attempts} attempts: {last}")]
    Unreachable { url: String, attempts: u32, last: String },
}

#[derive(Clone, Debug)]
pub struct HttpTransport {
    client: reqwest::Client,
    backoff: Backoff,
}

impl HttpTransport {
    pub fn new(backoff: Backoff) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .expect("plain http client");
        HttpTransport { client, backoff }
    }

    pub fn url_for(env: &Envelope) -> String {
        format!("{}{}", env.to.http_base(), env.msg_type.route())
    }

    pub async fn send(&self, env: &Envelope) -> Result<(), SendError> {
        let url = Self::url_for(env);
        let mut last = String::new();
        for n in 0..self.backoff.attempts {
            if n > 0 {
                tokio::time::sleep(self.backoff.delay(n - 1)).await;
            }
            match self.client.post(&url).json(env).send().await {
                Ok(resp) if resp.status().is_success() => return Ok(()),
                Ok(resp) if resp.status().is_client_error() => {
                    let status = resp.status().as_u16();
                    let body = resp.text().await.unwrap_or_default();
                    return Err(SendError::Refused { url, status, body });
                }
                Ok(resp) => last = format!("status {}", resp.status()),
                Err(e) => last = e.to_string(),
            }
            tracing::debug!(%url, attempt = n, "send failed: {last}");
        }
        Err(SendError::Unreachable {
            url,
            attempts: self.backoff.attempts,
            last,
        })
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(Backoff::default())
    }
}
