//! Whitespace tokenizer with byte-level fallback.
//!
//! The vocabulary file holds one token per line; the line index is the
//! token id and the file order is descending corpus frequency. Words not in
//! the vocabulary are spelled with `<0xHH>` byte tokens, or `<unk>` when a
//! byte token is missing too.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

pub fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("vocabulary line {} is not a single token", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_owned).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                out.push(id);
                continue;
            }
            for b in word.bytes() {
                let id = self
                    .id(&byte_token(b))
                    .or_else(|| self.id(UNK_TOKEN))
                    .ok_or_else(|| {
                        Error::Data(format!("cannot tokenize {word:?}: no byte or <unk> token"))
                    })?;
                out.push(id);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_words_and_byte_fallback() {
        let v = Vocab::from_text("the\ncat\n<0x61>\n<0x62>\n<unk>\n").unwrap();
        assert_eq!(v.encode("the  cat\nthe").unwrap(), vec![0, 1, 0]);
        assert_eq!(v.encode("ab").unwrap(), vec![2, 3]);
        assert_eq!(v.encode("az").unwrap(), vec![2, 4]);
    }

    #[test]
    fn missing_fallback_is_an_error() {
        let v = Vocab::from_text("a\nb\n").unwrap();
        assert!(v.encode("c").is_err());
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::from_text("a\na\n").is_err());
        assert!(Vocab::from_text("").is_err());
    }
}
