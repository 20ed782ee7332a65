//! Whitespace word tokenizer.
//!
//! Ids 0..3 are reserved: `<unk>`, `<sep>` (segment separator), `<eos>`.
//! The remaining ids are assigned in order of first appearance over the
//! texts the vocabulary is built from, which makes the id assignment a
//! deterministic function of the input order.

use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const UNK: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<unk>", "<sep>", "<eos>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        for text in texts {
            for tok in text.split_whitespace() {
                v.insert(tok);
            }
        }
        v
    }

    fn insert(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Tokenizes, failing on any out-of-vocabulary word.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::OutOfVocabulary(t.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Format("duplicate vocabulary entry".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknowns() {
        let v = Vocab::build(["the court holds that", "the loan is valid"]);
        let s = "the loan holds that the court is valid";
        assert_eq!(v.detokenize(&v.tokenize(s)), s);
        assert_eq!(v.tokenize("the zebra"), vec![v.id("the").unwrap(), UNK]);
        assert!(v.tokenize("").is_empty());
        assert!(v.tokenize_strict("zebra").is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::build(["a b c", "c d"]);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert_eq!(v.len(), 7);
    }
}
