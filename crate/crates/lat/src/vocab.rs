//! Token vocabularies with line-number indexing.
//!
//! The on-disk format is one token per line; a token's index is its line
//! number (0-based). Caption vocabularies reserve the first four slots for
//! `<pad>`, `<s>`, `</s>`, `<unk>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{LatError, Result};

pub const PAD: &str = "<pad>";
pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LatError::Contract(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// A caption vocabulary: the four special tokens, then `extra` in the
    /// given order.
    pub fn caption(extra: impl IntoIterator<Item = String>) -> Result<Vocab> {
        let mut tokens = vec![PAD.to_string(), START.to_string(), END.to_string(), UNK.to_string()];
        for t in extra {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                tokens.push(t.to_string());
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `<unk>` when present.
    pub fn get_or_unk(&self, token: &str) -> Result<usize> {
        self.get(token)
            .or_else(|| self.get(UNK))
            .ok_or_else(|| LatError::Contract(format!("token '{token}' not in vocabulary")))
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_vocab_reserves_specials() {
        let v = Vocab::caption(["car".to_string(), "3".to_string()]).unwrap();
        assert_eq!(v.get(PAD), Some(0));
        assert_eq!(v.get(START), Some(1));
        assert_eq!(v.get(END), Some(2));
        assert_eq!(v.get(UNK), Some(3));
        assert_eq!(v.get("car"), Some(4));
        assert!(v.len() >= 4);
    }

    #[test]
    fn duplicate_tokens_rejected() {
        assert!(Vocab::from_tokens(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn unknown_token_falls_back_to_unk() {
        let v = Vocab::caption(std::iter::empty()).unwrap();
        assert_eq!(v.get_or_unk("mystery").unwrap(), 3);
    }
}
