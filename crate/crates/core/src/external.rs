//! Clients for an out-of-process model service.
//!
//! Every call is one JSON `POST` to a single URL with a hard timeout. The body's
//! `kind` field names the question:
//!
//! | kind | request fields | response |
//! |---|---|---|
//! | `policy` | `screen`, `goal`, `history` | `{"ranked_actions": [..], "reason": ".."}` |
//! | `vqa` | `prompt`, `screens` | `{"answer": true}` |
//! | `categorize` | `callee`, `path`, `flow_id` | `{"category": "direct"}` |
//! | `screen_error` | `screen` | `{"error": null}` or `{"error": "evidence"}` |
//!
//! The policy falls back to [`DefaultPolicy`] on any failure. The other clients
//! surface the failure so callers can record an abstention.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::crawler::{ClassifierError, DefaultPolicy, Goal, Policy, PolicyDecision, ScreenState, ScreenTransition, VqaClassifier};
use crate::rca::{Categorizer, ScreenClassifier};
use crate::topology::Relevance;

pub const URL_ENV: &str = "CHAOSFLOW_CLASSIFIER_URL";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct ModelEndpoint {
    url: String,
    agent: ureq::Agent,
}

impl ModelEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self { url: url.into(), agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }

    /// `CHAOSFLOW_CLASSIFIER_URL` wins over `configured` when set and non-empty.
    pub fn resolve(configured: Option<&str>, timeout: Duration) -> Option<Self> {
        let from_env = std::env::var(URL_ENV).ok().filter(|u| !u.is_empty());
        from_env.or_else(|| configured.map(str::to_string)).map(|u| Self::new(u, timeout))
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn ask<T: DeserializeOwned>(&self, body: Value) -> Result<T, ClassifierError> {
        self.agent
            .post(&self.url)
            .send_json(body)
            .map_err(|e| ClassifierError(e.to_string()))?
            .into_json()
            .map_err(|e| ClassifierError(format!("bad response body: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct ExternalPolicy {
    pub endpoint: ModelEndpoint,
}

impl Policy for ExternalPolicy {
    fn select(&self, screen: &ScreenState, goal: &Goal<'_>, history: &[ScreenTransition]) -> PolicyDecision {
        #[derive(Deserialize)]
        struct Reply {
            ranked_actions: Vec<String>,
            #[serde(default)]
            reason: String,
        }
        let body = json!({ "kind": "policy", "screen": screen, "goal": goal.step.goal, "history": history });
        match self.endpoint.ask::<Reply>(body) {
            Ok(r) if !r.ranked_actions.is_empty() => PolicyDecision::new(r.ranked_actions, r.reason),
            _ => {
                let d = DefaultPolicy.select(screen, goal, history);
                PolicyDecision::new(d.ranked_actions, format!("model unavailable; {}", d.reason))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalVqa {
    pub endpoint: ModelEndpoint,
}

impl VqaClassifier for ExternalVqa {
    fn answer(&self, prompt: &str, screens: &[ScreenState]) -> Result<bool, ClassifierError> {
        #[derive(Deserialize)]
        struct Reply {
            answer: bool,
        }
        let body = json!({ "kind": "vqa", "prompt": prompt, "screens": screens });
        self.endpoint.ask::<Reply>(body).map(|r| r.answer)
    }
}

#[derive(Debug, Clone)]
pub struct ExternalCategorizer {
    pub endpoint: ModelEndpoint,
}

impl Categorizer for ExternalCategorizer {
    fn categorize(&self, callee: &str, path: &str, flow_id: &str) -> Result<Relevance, ClassifierError> {
        #[derive(Deserialize)]
        struct Reply {
            category: Relevance,
        }
        let body = json!({ "kind": "categorize", "callee": callee, "path": path, "flow_id": flow_id });
        self.endpoint.ask::<Reply>(body).map(|r| r.category)
    }
}

#[derive(Debug, Clone)]
pub struct ExternalScreenClassifier {
    pub endpoint: ModelEndpoint,
}

impl ScreenClassifier for ExternalScreenClassifier {
    fn classify(&self, screen: &ScreenState) -> Result<Option<String>, ClassifierError> {
        #[derive(Deserialize)]
        struct Reply {
            error: Option<String>,
        }
        self.endpoint.ask::<Reply>(json!({ "kind": "screen_error", "screen": screen })).map(|r| r.error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves `replies` in order, one connection each.
    fn serve(replies: Vec<&'static str>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        std::thread::spawn(move || {
            for reply in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                    reply.len()
                )
                .unwrap();
            }
        });
        url
    }

    fn dead_url() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        url
    }

    #[test]
    fn vqa_round_trip_and_failure() {
        let url = serve(vec![r#"{"answer": true}"#, "not json"]);
        let vqa = ExternalVqa { endpoint: ModelEndpoint::new(url, DEFAULT_TIMEOUT) };
        assert_eq!(vqa.answer("Is it there?", &[]), Ok(true));
        assert!(vqa.answer("Is it there?", &[]).is_err());

        let vqa = ExternalVqa { endpoint: ModelEndpoint::new(dead_url(), Duration::from_millis(500)) };
        assert!(vqa.answer("q", &[]).is_err());
    }

    #[test]
    fn categorizer_parses_category() {
        let url = serve(vec![r#"{"category": "unrelated"}"#]);
        let c = ExternalCategorizer { endpoint: ModelEndpoint::new(url, DEFAULT_TIMEOUT) };
        assert_eq!(c.categorize("loyalty", "/loyalty/banner", "core-trip"), Ok(Relevance::Unrelated));
    }

    #[test]
    fn policy_falls_back_when_unreachable() {
        use crate::crawler::{ActionSpec, ElementState, ScreenElement, ScreenSpec, StepSpec};
        let step = StepSpec {
            goal: "go".into(),
            screen: ScreenSpec { screen_id: "s".into(), app: Default::default(), entry: "e".into(), elements: vec!["b".into()] },
            primary_action: ActionSpec { id: "tap_b".into(), element: "b".into(), extra_cost_ms: 0 },
            alternate_actions: vec![],
            optimal_action: None,
        };
        let screen = ScreenState {
            screen_id: "s".into(),
            elements: vec![ScreenElement { element_id: "b".into(), state: ElementState::Present }],
            rendered_at_ms: 0,
        };
        let goal = Goal { step: &step, wait_budget_ms: 0 };
        let p = ExternalPolicy { endpoint: ModelEndpoint::new(dead_url(), Duration::from_millis(500)) };
        let d = p.select(&screen, &goal, &[]);
        assert_eq!(d.chosen(), "tap_b");
        assert!(d.reason.starts_with("model unavailable"));

        let url = serve(vec![r#"{"ranked_actions": ["back"], "reason": "looks wrong"}"#]);
        let p = ExternalPolicy { endpoint: ModelEndpoint::new(url, DEFAULT_TIMEOUT) };
        assert_eq!(p.select(&screen, &goal, &[]).chosen(), "back");
    }
}
