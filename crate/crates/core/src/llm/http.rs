//! Wire-level client for the chat-completions protocol.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use super::{ChatBackend, ChatRequest, LlmError};

/// Environment variable holding the bearer token for live backends.
pub const API_KEY_ENV: &str = "VPL_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub url: String,
    /// JSON text.
    pub body: String,
    pub bearer: Option<String>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout(String),
    Connect(String),
    Other(String),
}

impl fmt::Display for TransportFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportFailure::Timeout(m) => write!(f, "timeout: {m}"),
            TransportFailure::Connect(m) => write!(f, "connect: {m}"),
            TransportFailure::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for TransportFailure {}

/// Sends a JSON POST and returns status and body, whatever the status.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportFailure>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportFailure> {
        let mut builder = self
            .agent
            .post(&request.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &request.bearer {
            builder = builder.header("Authorization", &format!("Bearer {key}"));
        }
        let result = builder
            .config()
            .timeout_global(Some(request.timeout))
            .build()
            .send(request.body.as_str());
        let mut response = result.map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportFailure::Timeout(e.to_string()),
            ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
                TransportFailure::Connect(e.to_string())
            }
            other => TransportFailure::Other(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportFailure::Other(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// A live chat-completions endpoint.
pub struct ChatCompletionsBackend {
    pub base_url: String,
    api_key: Option<String>,
    pub timeout: Duration,
    transport: Arc<dyn HttpTransport>,
}

impl fmt::Debug for ChatCompletionsBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatCompletionsBackend")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ChatCompletionsBackend {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            timeout,
            transport,
        }
    }

    /// Uses [`UreqTransport`] and reads the key from [`API_KEY_ENV`].
    pub fn from_env(base_url: impl Into<String>, timeout: Duration) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(base_url, key, timeout, Arc::new(UreqTransport::default()))
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

/// First choice's message content. A `null` content (refusals, filtered
/// output) comes back as an empty string for the verbalizer to handle.
pub fn parse_chat_response(body: &str) -> Result<String, LlmError> {
    let malformed = || LlmError::Malformed {
        excerpt: excerpt(body),
    };
    let value: serde_json::Value = serde_json::from_str(body).map_err(|_| malformed())?;
    let message = value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(malformed)?;
    match message.get("content") {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(serde_json::Value::Null) | None => Ok(String::new()),
        Some(_) => Err(malformed()),
    }
}

impl ChatBackend for ChatCompletionsBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let http = HttpRequest {
            url: self.endpoint(),
            body: serde_json::to_string(request).expect("chat request serializes"),
            bearer: self.api_key.clone(),
            timeout: self.timeout,
        };
        let response = self.transport.post_json(&http).map_err(|e| match e {
            TransportFailure::Timeout(m) => LlmError::Timeout(m),
            TransportFailure::Connect(m) | TransportFailure::Other(m) => LlmError::Connection(m),
        })?;
        let body = excerpt(&response.body);
        match response.status {
            200..=299 => parse_chat_response(&response.body),
            401 | 403 => Err(LlmError::Auth(body)),
            408 => Err(LlmError::Timeout(body)),
            429 => Err(LlmError::RateLimited(body)),
            500..=599 => Err(LlmError::Server {
                status: response.status,
                excerpt: body,
            }),
            status => Err(LlmError::Rejected {
                status,
                excerpt: body,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, BackendConfig};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Mutex;

    struct Canned {
        status: u16,
        body: String,
        seen: Mutex<Vec<HttpRequest>>,
    }

    impl HttpTransport for Canned {
        fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportFailure> {
            self.seen.lock().unwrap().push(request.clone());
            Ok(HttpResponse {
                status: self.status,
                body: self.body.clone(),
            })
        }
    }

    fn backend(status: u16, body: &str) -> (ChatCompletionsBackend, Arc<Canned>) {
        let canned = Arc::new(Canned {
            status,
            body: body.into(),
            seen: Mutex::new(vec![]),
        });
        let b = ChatCompletionsBackend::new(
            "http://llm.local/v1/",
            Some("sk-test".into()),
            Duration::from_secs(5),
            canned.clone(),
        );
        (b, canned)
    }

    fn request() -> ChatRequest {
        ChatRequest::new(
            &[ChatMessage::system(""), ChatMessage::user("hello")],
            &BackendConfig::default(),
        )
    }

    #[test]
    fn request_body_matches_wire_format() {
        let (b, canned) = backend(200, r#"{"choices":[{"message":{"role":"assistant","content":"this code is vulnerable"}}]}"#);
        assert_eq!(b.send(&request()).unwrap(), "this code is vulnerable");
        let seen = canned.seen.lock().unwrap();
        assert_eq!(seen[0].url, "http://llm.local/v1/chat/completions");
        assert_eq!(seen[0].bearer.as_deref(), Some("sk-test"));
        let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
        assert_eq!(
            body,
            serde_json::json!({
                "model": "gpt-3.5-turbo",
                "messages": [{"role": "system", "content": ""}, {"role": "user", "content": "hello"}],
                "temperature": 0.0,
                "max_tokens": 256
            })
        );
    }

    #[test]
    fn status_codes_map_to_error_classes() {
        assert!(matches!(backend(401, "no").0.send(&request()), Err(LlmError::Auth(_))));
        assert!(matches!(backend(429, "slow").0.send(&request()), Err(LlmError::RateLimited(_))));
        assert!(matches!(backend(503, "down").0.send(&request()), Err(LlmError::Server { status: 503, .. })));
        assert!(matches!(backend(400, "bad").0.send(&request()), Err(LlmError::Rejected { status: 400, .. })));
    }

    #[test]
    fn malformed_body_carries_excerpt() {
        let err = backend(200, "<html>oops</html>").0.send(&request()).unwrap_err();
        assert_eq!(err, LlmError::Malformed { excerpt: "<html>oops</html>".into() });
        assert!(!err.is_retryable());
    }

    #[test]
    fn null_content_passes_through_empty() {
        assert_eq!(
            parse_chat_response(r#"{"choices":[{"message":{"content":null}}]}"#).unwrap(),
            ""
        );
    }

    #[test]
    fn ureq_transport_talks_http() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = Vec::new();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                head.push(line);
            }
            let mut body = vec![0; content_length];
            reader.read_exact(&mut body).unwrap();
            let reply = r#"{"choices":[{"message":{"content":"this code is non-vulnerable"}}]}"#;
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            (head, String::from_utf8(body).unwrap())
        });

        let b = ChatCompletionsBackend::new(
            format!("http://{addr}/v1"),
            Some("k123".into()),
            Duration::from_secs(5),
            Arc::new(UreqTransport::default()),
        );
        assert_eq!(b.send(&request()).unwrap(), "this code is non-vulnerable");
        let (head, body) = server.join().unwrap();
        assert!(head[0].starts_with("POST /v1/chat/completions"));
        assert!(head.iter().any(|h| h.trim() == "authorization: Bearer k123" || h.trim() == "Authorization: Bearer k123"));
        assert!(body.contains("\"max_tokens\":256"));
    }

    #[test]
    fn connection_refused_is_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let b = ChatCompletionsBackend::new(
            format!("http://{addr}"),
            None,
            Duration::from_secs(2),
            Arc::new(UreqTransport::default()),
        );
        let err = b.send(&request()).unwrap_err();
        assert!(err.is_retryable(), "{err:?}");
    }
}
