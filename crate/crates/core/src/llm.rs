//! Text-completion clients for annotation and zero-shot baselines.

use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Anything that turns a prompt into a completion.
pub trait CompletionClient: Sync {
    fn complete(&self, prompt: &str, temperature: f64) -> Result<String>;
}

/// Chat-completions endpoint speaking the common
/// `{"model", "messages", "temperature"}` JSON protocol.
#[derive(Clone, Debug)]
pub struct HttpClient {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        timeout: Duration,
        api_key: Option<String>,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout,
            api_key,
            agent,
        }
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, prompt: &str, temperature: f64) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp: Value = req
            .send_json(&body)
            .and_then(|r| r.into_body().read_json())
            .map_err(|e| Error::Client(format!("{}: {e}", self.endpoint)))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                Error::Client(format!(
                    "{}: response has no choices[0].message.content",
                    self.endpoint
                ))
            })
    }
}

/// Closure-backed client for tests and offline runs.
pub struct FnClient<F>(pub F);

impl<F> CompletionClient for FnClient<F>
where
    F: Fn(&str) -> Result<String> + Sync,
{
    fn complete(&self, prompt: &str, _temperature: f64) -> Result<String> {
        (self.0)(prompt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Complete `prompt`, retrying failures with exponential backoff. Requests
/// and responses are logged under `doc_hash`.
pub fn complete_with_retry(
    client: &dyn CompletionClient,
    prompt: &str,
    temperature: f64,
    policy: RetryPolicy,
    doc_hash: &str,
) -> Result<String> {
    let mut delay = policy.base_delay;
    let mut last = None;
    for attempt in 1..=policy.attempts.max(1) {
        log::debug!(
            "request doc={doc_hash} attempt={attempt} prompt_chars={}",
            prompt.len()
        );
        match client.complete(prompt, temperature) {
            Ok(text) => {
                log::debug!("response doc={doc_hash} chars={}: {text}", text.len());
                return Ok(text);
            }
            Err(e) => {
                log::warn!("request doc={doc_hash} attempt {attempt} failed: {e}");
                last = Some(e);
                if attempt < policy.attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Run `f` over `items` with at most `in_flight` calls at a time; results
/// come back in input order.
pub fn map_in_flight<T: Sync, R: Send>(
    items: &[T],
    in_flight: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(in_flight.max(1)) {
        let results: Vec<R> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|item| s.spawn(|| f(item))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        out.extend(results);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Serve one HTTP request with `body` and return the request body seen.
    fn serve_once(body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            String::from_utf8(req).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn http_client_round_trip() {
        let (url, server) =
            serve_once(r#"{"choices":[{"message":{"role":"assistant","content":"(0, P19, 1)"}}]}"#);
        let client = HttpClient::new(url, "some-model", Duration::from_secs(5), Some("k".into()));
        assert_eq!(client.complete("hello", 0.0).unwrap(), "(0, P19, 1)");
        let sent: Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(sent["model"], "some-model");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["content"], "hello");
    }

    #[test]
    fn http_client_reports_bad_responses() {
        let (url, server) = serve_once(r#"{"choices":[]}"#);
        let client = HttpClient::new(url, "m", Duration::from_secs(5), None);
        assert!(matches!(client.complete("x", 0.0), Err(Error::Client(_))));
        server.join().unwrap();
        let dead = HttpClient::new("http://127.0.0.1:1/", "m", Duration::from_millis(200), None);
        assert!(dead.complete("x", 0.0).is_err());
    }

    #[test]
    fn retries_then_gives_up() {
        let calls = AtomicUsize::new(0);
        let flaky = FnClient(|_: &str| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(Error::Client("timeout".into()))
            } else {
                Ok("ok".to_string())
            }
        });
        let policy = RetryPolicy {
            attempts: 3,
            base_delay: Duration::ZERO,
        };
        assert_eq!(
            complete_with_retry(&flaky, "p", 0.0, policy, "h").unwrap(),
            "ok"
        );
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        calls.store(0, Ordering::SeqCst);
        let dead = FnClient(|_: &str| -> Result<String> {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(Error::Client("down".into()))
        });
        assert!(complete_with_retry(&dead, "p", 0.0, policy, "h").is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn in_flight_map_keeps_order() {
        let items: Vec<usize> = (0..23).collect();
        for cap in [1, 4, 100] {
            assert_eq!(
                map_in_flight(&items, cap, |x| x * 2),
                items.iter().map(|x| x * 2).collect::<Vec<_>>()
            );
        }
    }
}
