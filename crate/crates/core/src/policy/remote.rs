//! Chat-completions client that can act as extractor or teacher.
//!
//! Token strings returned by the endpoint are mapped onto the shared
//! vocabulary, so the endpoint must tokenize compatibly for scoring to be
//! meaningful. Sampling works with any endpoint.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::vocab::{TokenId, Vocab};
use super::{Policy, PolicyError, Response, Source, TokenDistribution};
use crate::chat::{Chat, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    /// Largest `top_logprobs` the endpoint accepts.
    pub max_logprobs: usize,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            max_logprobs: 20,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    config: RemoteConfig,
    vocab: Arc<Vocab>,
    agent: ureq::Agent,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        RemoteClient { config, vocab: Vocab::standard(), agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Messages for a rendered context. A trailing non-empty assistant
    /// message is sent as a prefix to continue.
    fn messages(context: &str) -> Result<(Vec<Value>, bool), PolicyError> {
        let mut chat = Chat::parse_open(context)
            .ok_or_else(|| PolicyError::RemoteUnavailable("context is not a rendered chat".into()))?;
        let mut continuing = false;
        if let Some(last) = chat.messages.last() {
            if last.role == Role::Assistant {
                if last.content.is_empty() {
                    chat.messages.pop();
                } else {
                    continuing = true;
                }
            }
        }
        let msgs = chat.messages.iter().map(|m| json!({"role": m.role.api_name(), "content": m.content})).collect();
        Ok((msgs, continuing))
    }

    fn post(&self, mut body: Value, continuing: bool) -> Result<Value, PolicyError> {
        body["model"] = json!(self.config.model);
        if continuing {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(var) = &self.config.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| PolicyError::RemoteUnavailable(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))?;
        resp.body_mut().read_json::<Value>().map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))
    }

    /// Log-probs reported for the first generated token, merged onto the
    /// shared vocabulary.
    fn first_token_logprobs(&self, context: &str, k: usize) -> Result<Vec<(TokenId, f64)>, PolicyError> {
        if k > self.config.max_logprobs {
            return Err(PolicyError::KTooLarge { k, max: self.config.max_logprobs });
        }
        let (messages, continuing) = Self::messages(context)?;
        let body = json!({
            "messages": messages,
            "max_tokens": 1,
            "temperature": 1.0,
            "logprobs": true,
            "top_logprobs": k,
        });
        let v = self.post(body, continuing)?;
        let tops = v["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
            .as_array()
            .ok_or_else(|| PolicyError::RemoteUnavailable("response has no top_logprobs".into()))?;
        let mut merged: Vec<(TokenId, f64)> = Vec::new();
        for entry in tops {
            let (Some(tok), Some(lp)) = (entry["token"].as_str(), entry["logprob"].as_f64()) else {
                continue;
            };
            let Some(id) = self.vocab.id(tok) else {
                continue;
            };
            match merged.iter_mut().find(|e| e.0 == id) {
                Some(e) => {
                    let hi = e.1.max(lp);
                    e.1 = hi + ((e.1 - hi).exp() + (lp - hi).exp()).ln();
                }
                None => merged.push((id, lp)),
            }
        }
        merged.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(merged)
    }
}

impl Policy for RemoteClient {
    fn tag(&self) -> String {
        format!("remote:{}", self.config.model)
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn sample_response(
        &self,
        context: &str,
        temperature: f64,
        max_tokens: usize,
        seed: u64,
    ) -> Result<Response, PolicyError> {
        let (messages, continuing) = Self::messages(context)?;
        let body = json!({
            "messages": messages,
            "max_tokens": max_tokens,
            "temperature": temperature,
            "seed": seed,
        });
        let v = self.post(body, continuing)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| PolicyError::RemoteUnavailable("response has no message content".into()))?;
        Ok(Response::from_text(&self.vocab, text))
    }

    fn next_token_topk(&self, context: &str, k: usize) -> Result<TokenDistribution, PolicyError> {
        let mut entries = self.first_token_logprobs(context, k)?;
        entries.truncate(k);
        Ok(TokenDistribution { entries, source: Source::Teacher })
    }

    fn topk_along(
        &self,
        context: &str,
        continuation: &[TokenId],
        k: usize,
    ) -> Result<Vec<TokenDistribution>, PolicyError> {
        (0..continuation.len())
            .map(|t| self.next_token_topk(&format!("{context}{}", self.vocab.decode(&continuation[..t])), k))
            .collect()
    }

    /// Needs every requested token inside the endpoint's top log-probs.
    fn score_sets(
        &self,
        context: &str,
        continuation: &[TokenId],
        sets: &[Vec<TokenId>],
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        let mut out = Vec::with_capacity(sets.len());
        for (t, set) in sets.iter().enumerate() {
            let ctx = format!("{context}{}", self.vocab.decode(&continuation[..t]));
            let got = self.first_token_logprobs(&ctx, self.config.max_logprobs)?;
            let row = set
                .iter()
                .map(|id| {
                    got.iter()
                        .find(|e| e.0 == *id)
                        .map(|e| e.1)
                        .ok_or_else(|| PolicyError::MissingLogprob(self.vocab.token(*id).to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            out.push(row);
        }
        Ok(out)
    }
}
