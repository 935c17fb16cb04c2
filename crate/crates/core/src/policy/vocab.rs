//! Character-plus-keyword tokenizer.
//!
//! Special markers and bracketed actions are single tokens, as are whole
//! words from a fixed lexicon (optionally carrying one leading space, the
//! way BPE vocabularies do). Everything else falls back to single
//! characters, so `decode(encode(s)) == s` for any text made of printable
//! ASCII, newlines and `√`.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use sha2::{Digest, Sha256};

use crate::chat::{ASSISTANT_MARKER, END_MARKER, THINK_CLOSE, THINK_OPEN, USER_MARKER};

pub type TokenId = u32;

pub const UNK: &str = "<|unk|>";
pub const ACTION_TOKENS: [&str; 8] = ["[up]", "[down]", "[left]", "[right]", "[w]", "[a]", "[s]", "[d]"];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: Vec<(String, TokenId)>,
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric()
}

fn word_run(s: &str) -> &str {
    let end = s.find(|c: char| !is_word_char(c)).unwrap_or(s.len());
    &s[..end]
}

impl Vocab {
    /// Builds a vocabulary whose keyword lexicon is every word (two or more
    /// characters) appearing in `sources`.
    pub fn from_sources<'a>(sources: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut words: Vec<String> = sources
            .into_iter()
            .flat_map(|s| s.split(|c: char| !is_word_char(c)))
            .filter(|w| w.len() >= 2)
            .map(str::to_string)
            .collect();
        words.sort();
        words.dedup();
        Vocab::from_lexicon(&words)
    }

    pub fn from_lexicon(words: &[String]) -> Vocab {
        let mut tokens: Vec<String> = vec![UNK.into()];
        for s in [USER_MARKER, ASSISTANT_MARKER, END_MARKER, THINK_OPEN, THINK_CLOSE] {
            tokens.push(s.into());
        }
        tokens.extend(ACTION_TOKENS.iter().map(|s| s.to_string()));
        tokens.push("\n".into());
        tokens.extend((0x20u8..=0x7e).map(|b| (b as char).to_string()));
        tokens.push("√".into());
        for w in words {
            tokens.push(w.clone());
            tokens.push(format!(" {w}"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut unique = Vec::with_capacity(tokens.len());
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), unique.len() as TokenId);
                unique.push(t);
            }
        }
        let mut specials: Vec<(String, TokenId)> = unique
            .iter()
            .filter(|t| t.len() > 1 && (t.starts_with('<') || t.starts_with('[')))
            .map(|t| (t.clone(), index[t]))
            .collect();
        specials.sort_by_key(|t| std::cmp::Reverse(t.0.len()));
        Vocab { tokens: unique, index, specials }
    }

    /// The vocabulary shared by every built-in policy.
    pub fn standard() -> Arc<Vocab> {
        static STANDARD: OnceLock<Arc<Vocab>> = OnceLock::new();
        STANDARD.get_or_init(|| Arc::new(Vocab::from_sources(crate::lexicon_sources()))).clone()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn unk_id(&self) -> TokenId {
        0
    }

    pub fn end_id(&self) -> TokenId {
        self.index[END_MARKER]
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 2);
        let mut i = 0;
        let mut prev_word_char = false;
        while i < text.len() {
            let rest = &text[i..];
            if rest.starts_with('<') || rest.starts_with('[') {
                if let Some((s, id)) = self.specials.iter().find(|(s, _)| rest.starts_with(s.as_str())) {
                    out.push(*id);
                    i += s.len();
                    prev_word_char = false;
                    continue;
                }
            }
            let c = rest.chars().next().expect("non-empty");
            if c == ' ' {
                let run = word_run(&rest[1..]);
                if !run.is_empty() {
                    if let Some(&id) = self.index.get(&rest[..1 + run.len()]) {
                        out.push(id);
                        i += 1 + run.len();
                        prev_word_char = true;
                        continue;
                    }
                }
            } else if is_word_char(c) && !prev_word_char {
                let run = word_run(rest);
                if run.len() >= 2 {
                    if let Some(&id) = self.index.get(run) {
                        out.push(id);
                        i += run.len();
                        prev_word_char = true;
                        continue;
                    }
                }
            }
            let mut buf = [0u8; 4];
            out.push(self.id(c.encode_utf8(&mut buf)).unwrap_or(0));
            i += c.len_utf8();
            prev_word_char = is_word_char(c);
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token(id)).collect()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    /// Longest prefix of `text` holding at most `max_tokens` tokens.
    pub fn truncate(&self, text: &str, max_tokens: usize) -> String {
        let ids = self.encode(text);
        if ids.len() <= max_tokens {
            text.to_string()
        } else {
            self.decode(&ids[..max_tokens])
        }
    }

    /// Content hash used to pair checkpoints with the vocabulary they were
    /// trained on.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0]);
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}
