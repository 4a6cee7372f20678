//! Whitespace word tokenizer over a fixed table.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding token, always id 0.
pub const PAD: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Tokenizer {
    /// Table with `PAD` at id 0 followed by `words` in order.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all = vec![PAD.to_string()];
        all.extend(words.into_iter().map(|w| w.as_ref().to_string()));
        Self::try_from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token ids padded to `len`.
    pub fn encode(&self, text: &str, len: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(len);
        for w in text.split_whitespace() {
            let id = self
                .ids
                .get(w)
                .ok_or_else(|| Error::data(format!("word `{w}` is not in the tokenizer table")))?;
            out.push(*id);
        }
        if out.len() > len {
            return Err(Error::data(format!(
                "`{text}` has {} tokens, limit is {len}",
                out.len()
            )));
        }
        out.resize(len, 0);
        Ok(out)
    }

    /// Words for non-pad ids joined by spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != 0)
            .map(|&i| self.words.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD) {
            return Err(Error::data(format!("tokenizer table must start with `{PAD}`")));
        }
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::data(format!("invalid tokenizer word `{w}`")));
            }
            if ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate tokenizer word `{w}`")));
            }
        }
        Ok(Self { words, ids })
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}
