//! Whitespace tokenizer over a fixed integer vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;
/// EDU-final punctuation used by the synthetic corpus.
pub const STOP: usize = 5;

const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<sep>", "<eos>", "<unk>", "."];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Special tokens followed by `w0 .. w{content_size-1}`.
    pub fn synthetic(content_size: usize) -> Self {
        Self::with_content((0..content_size).map(content_word))
    }

    /// Special tokens followed by `words` in the given order.
    pub fn with_content(words: impl IntoIterator<Item = String>) -> Self {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect::<Vec<_>>();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Data(format!("token `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Render ids as text, skipping padding and sequence markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | SEP | EOS))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn content_word(i: usize) -> String {
    format!("w{i}")
}

/// Content-word id for the synthetic vocabulary.
pub fn content_id(i: usize) -> usize {
    SPECIALS.len() + i
}
