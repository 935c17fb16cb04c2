//! Chat messages and their flat text rendering.
//!
//! A conversation renders as `<|user|>…<|end|><|assistant|>…<|end|>…`. A
//! generation prompt is the rendering followed by `<|assistant|>`; a policy's
//! reply ends with `<|end|>`, which is stripped from the stored text.

use serde::{Deserialize, Serialize};

pub const USER_MARKER: &str = "<|user|>";
pub const ASSISTANT_MARKER: &str = "<|assistant|>";
pub const END_MARKER: &str = "<|end|>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn marker(self) -> &'static str {
        match self {
            Role::User => USER_MARKER,
            Role::Assistant => ASSISTANT_MARKER,
        }
    }

    pub fn api_name(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chat {
    pub messages: Vec<Message>,
}

impl Chat {
    pub fn new(messages: Vec<Message>) -> Self {
        Chat { messages }
    }

    pub fn single_user(content: impl Into<String>) -> Self {
        Chat { messages: vec![Message::user(content)] }
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    /// Every message closed with the end marker.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(m.role.marker());
            out.push_str(&m.content);
            out.push_str(END_MARKER);
        }
        out
    }

    /// Rendering without the final end marker, so the text ends with the
    /// last message's content.
    pub fn render_open(&self) -> String {
        let mut out = self.render();
        if !self.messages.is_empty() {
            out.truncate(out.len() - END_MARKER.len());
        }
        out
    }

    pub fn generation_prompt(&self) -> String {
        let mut out = self.render();
        out.push_str(ASSISTANT_MARKER);
        out
    }

    /// Inverse of [`Chat::render_open`]. Returns `None` if the text is not a
    /// well-formed rendering.
    pub fn parse_open(text: &str) -> Option<Chat> {
        let mut messages = Vec::new();
        let mut rest = text;
        loop {
            let role = if let Some(r) = rest.strip_prefix(USER_MARKER) {
                rest = r;
                Role::User
            } else {
                let r = rest.strip_prefix(ASSISTANT_MARKER)?;
                rest = r;
                Role::Assistant
            };
            match rest.find(END_MARKER) {
                Some(end) => {
                    messages.push(Message { role, content: rest[..end].to_string() });
                    rest = &rest[end + END_MARKER.len()..];
                }
                None => {
                    messages.push(Message { role, content: rest.to_string() });
                    return Some(Chat { messages });
                }
            }
        }
    }
}

/// Removes delimited thinking blocks. An unclosed block runs to the end of
/// the text; a stray closing delimiter drops everything before it.
pub fn strip_thinking(text: &str, open: &str, close: &str) -> String {
    let mut text = text;
    if let Some(idx) = text.find(close) {
        if !text[..idx].contains(open) {
            text = &text[idx + close.len()..];
        }
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(open) {
        out.push_str(&rest[..start]);
        let after = &rest[start + open.len()..];
        match after.find(close) {
            Some(end) => rest = &after[end + close.len()..],
            None => {
                rest = "";
                break;
            }
        }
    }
    out.push_str(rest);
    out.trim().to_string()
}
