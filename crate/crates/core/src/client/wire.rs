//! OpenAI-compatible chat-completions wire format.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// End-user tag; the simulator groups ledger charges by it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokensDetails {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_tokens: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireUsage {
    #[serde(default)]
    pub prompt_tokens: Option<u64>,
    #[serde(default)]
    pub completion_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens_details: Option<PromptTokensDetails>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceMessage {
    pub role: Role,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub index: u32,
    pub message: ChoiceMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub id: String,
    #[serde(default = "chat_completion_object")]
    pub object: String,
    #[serde(default)]
    pub model: String,
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub usage: Option<WireUsage>,
    #[serde(default)]
    pub system_fingerprint: Option<String>,
}

fn chat_completion_object() -> String {
    "chat.completion".to_string()
}

impl ChatResponse {
    pub fn content(&self) -> Option<&str> {
        self.choices.first()?.message.content.as_deref()
    }
}

/// Token usage as recorded by the auditor. Missing fields read as zero and
/// are flagged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub cached_tokens: u64,
    pub completion_tokens: u64,
    /// The gateway omitted the usage object or one of its counts.
    #[serde(default)]
    pub usage_missing: bool,
    /// The gateway did not report cached tokens.
    #[serde(default)]
    pub cache_unsupported: bool,
}

impl Usage {
    pub fn from_wire(wire: Option<&WireUsage>) -> Self {
        let Some(w) = wire else {
            return Usage {
                usage_missing: true,
                cache_unsupported: true,
                ..Usage::default()
            };
        };
        let cached = w
            .prompt_tokens_details
            .as_ref()
            .and_then(|d| d.cached_tokens);
        let prompt = w.prompt_tokens.unwrap_or(0);
        Usage {
            prompt_tokens: prompt,
            cached_tokens: cached.unwrap_or(0).min(prompt),
            completion_tokens: w.completion_tokens.unwrap_or(0),
            usage_missing: w.prompt_tokens.is_none() || w.completion_tokens.is_none(),
            cache_unsupported: cached.is_none(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_openai_body() {
        let body = r#"{"id":"x","object":"chat.completion","model":"gpt-4o",
            "choices":[{"index":0,"message":{"role":"assistant","content":"hi"},"finish_reason":"stop"}],
            "usage":{"prompt_tokens":10,"completion_tokens":2,"total_tokens":12,
                     "prompt_tokens_details":{"cached_tokens":4}},
            "system_fingerprint":"fp_1"}"#;
        let r: ChatResponse = serde_json::from_str(body).unwrap();
        assert_eq!(r.content(), Some("hi"));
        let u = Usage::from_wire(r.usage.as_ref());
        assert_eq!(
            (u.prompt_tokens, u.cached_tokens, u.completion_tokens),
            (10, 4, 2)
        );
        assert!(!u.cache_unsupported && !u.usage_missing);
        assert_eq!(r.system_fingerprint.as_deref(), Some("fp_1"));
    }

    #[test]
    fn missing_cache_field_flags() {
        let w = WireUsage {
            prompt_tokens: Some(7),
            completion_tokens: Some(1),
            ..Default::default()
        };
        let u = Usage::from_wire(Some(&w));
        assert_eq!(u.cached_tokens, 0);
        assert!(u.cache_unsupported);
        let none = Usage::from_wire(None);
        assert!(none.usage_missing && none.cache_unsupported);
    }
}
