//! Remote annotation classifier: any chat-completion HTTP endpoint taking a
//! JSON body `{model, messages}` and returning `choices[0].message.content`.
//! The response content must be a JSON object
//! `{action_count, subject, verbs, objects}`, requested via the prompt
//! suffix. Retries with exponential backoff; a record whose classification
//! keeps failing stays pending.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};

use super::{Analysis, AnnotationClassifier};

/// Environment variables read by [`RemoteClassifier::from_env`].
pub const ENV_URL: &str = "TRIAD_CLASSIFIER_URL";
pub const ENV_KEY: &str = "TRIAD_CLASSIFIER_KEY";
pub const ENV_MODEL: &str = "TRIAD_CLASSIFIER_MODEL";

/// The classification question, followed verbatim by the annotation.
pub const QUESTION: &str =
    "Please identify how many actions are described in the following text, along with the relevant verbs and objects.";

const FORMAT_SUFFIX: &str = "Respond with only a JSON object of the form {\"action_count\": <integer>, \"subject\": <string>, \"verbs\": [<strings>], \"objects\": [<strings>]}.";

pub fn build_prompt(annotation: &str) -> String {
    format!("{QUESTION}\n\n{annotation}\n\n{FORMAT_SUFFIX}")
}

pub struct RemoteClassifier {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    model: String,
    pub attempts: usize,
    pub backoff_base: Duration,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

#[derive(Deserialize)]
struct WireAnalysis {
    action_count: usize,
    #[serde(default)]
    subject: Option<String>,
    #[serde(default)]
    verbs: Vec<String>,
    #[serde(default)]
    objects: Vec<String>,
}

impl RemoteClassifier {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        RemoteClassifier {
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            attempts: 3,
            backoff_base: Duration::from_secs(1),
        }
    }

    /// Endpoint and credentials from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_URL).map_err(|_| {
            Error::Config(format!(
                "{ENV_URL} not set; pass --offline to use the lexicon oracle"
            ))
        })?;
        let api_key = std::env::var(ENV_KEY).ok();
        let model = std::env::var(ENV_MODEL).unwrap_or_default();
        Ok(RemoteClassifier::new(endpoint, api_key, model))
    }

    fn request_once(&self, prompt: &str) -> Result<Analysis> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .set("Content-Type", "application/json")
            .send_json(body)
            .map_err(|e| Error::ClassifierUnavailable(e.to_string()))?;
        let parsed: ChatResponse = resp
            .into_json()
            .map_err(|e| Error::ClassifierUnavailable(format!("bad response: {e}")))?;
        let content = parsed
            .choices
            .first()
            .map(|c| c.message.content.as_str())
            .ok_or_else(|| Error::ClassifierUnavailable("response has no choices".into()))?;
        let wire: WireAnalysis = serde_json::from_str(strip_fences(content)).map_err(|e| {
            Error::ClassifierUnavailable(format!("unparseable classifier content: {e}"))
        })?;
        Ok(Analysis {
            action_count: wire.action_count,
            verbs: wire.verbs,
            objects: wire.objects,
            subject: wire.subject.unwrap_or_else(|| "robot".to_string()),
        })
    }
}

/// Tolerate models that wrap JSON in a code fence.
fn strip_fences(content: &str) -> &str {
    let trimmed = content.trim();
    let trimmed = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .unwrap_or(trimmed);
    trimmed.strip_suffix("```").unwrap_or(trimmed).trim()
}

impl AnnotationClassifier for RemoteClassifier {
    fn classify(&self, raw_text: &str) -> Result<Analysis> {
        if raw_text.trim().is_empty() {
            return Err(Error::InvalidAnnotation("empty annotation text".into()));
        }
        let prompt = build_prompt(raw_text);
        let mut delay = self.backoff_base;
        let mut last_err = None;
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.request_once(&prompt) {
                Ok(a) => return Ok(a),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::ClassifierUnavailable("no attempts".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal canned HTTP server; returns `responses[i]` for request i and
    /// records received bodies.
    fn mock_server(
        responses: Vec<(u16, String)>,
    ) -> (String, Arc<AtomicUsize>, std::sync::mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let hits2 = hits.clone();
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8_lossy(&buf).to_string()).ok();
                hits2.fetch_add(1, Ordering::SeqCst);
                let reason = if status == 200 { "OK" } else { "ERR" };
                let resp = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                reader.get_mut().write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), hits, rx)
    }

    fn ok_body() -> String {
        let content =
            "{\"action_count\": 1, \"subject\": \"robot\", \"verbs\": [\"open\"], \"objects\": [\"drawer\"]}";
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}]
        })
        .to_string()
    }

    #[test]
    fn sends_the_exact_question_and_parses_the_analysis() {
        let (url, _, rx) = mock_server(vec![(200, ok_body())]);
        let mut c = RemoteClassifier::new(url, Some("secret".into()), "test-model");
        c.backoff_base = Duration::from_millis(1);
        let a = c.classify("Robot opens the drawer").unwrap();
        assert_eq!(a.action_count, 1);
        assert_eq!(a.verbs, vec!["open"]);
        let body = rx.recv().unwrap();
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "test-model");
        let content = v["messages"][0]["content"].as_str().unwrap();
        assert!(
            content.starts_with(&format!("{QUESTION}\n\nRobot opens the drawer")),
            "prompt must be the question followed by the annotation: {content}"
        );
    }

    #[test]
    fn retries_until_success() {
        let (url, hits, _rx) = mock_server(vec![
            (500, "{}".to_string()),
            (500, "{}".to_string()),
            (200, ok_body()),
        ]);
        let mut c = RemoteClassifier::new(url, None, "");
        c.backoff_base = Duration::from_millis(1);
        let a = c.classify("Robot opens the drawer").unwrap();
        assert_eq!(a.action_count, 1);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, hits, _rx) = mock_server(vec![
            (500, "{}".to_string()),
            (500, "{}".to_string()),
            (500, "{}".to_string()),
        ]);
        let mut c = RemoteClassifier::new(url, None, "");
        c.backoff_base = Duration::from_millis(1);
        let err = c.classify("Robot opens the drawer").unwrap_err();
        assert!(matches!(err, Error::ClassifierUnavailable(_)));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fenced_json_content_is_tolerated() {
        assert_eq!(strip_fences("```json\n{\"a\":1}\n```"), "{\"a\":1}");
        assert_eq!(strip_fences("{\"a\":1}"), "{\"a\":1}");
    }
}
