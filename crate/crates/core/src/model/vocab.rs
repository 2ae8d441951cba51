use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<s>", "</s>"];

/// What a vocabulary entry is.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Special,
    LanguageTag(String),
    Surface(String),
}

/// Joint source/target vocabulary: specials, one tag per language, then surface tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub fn language_tag(lang: &str) -> String {
    format!("<{lang}>")
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            kinds: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string(), TokenKind::Special);
        }
        v
    }

    fn push(&mut self, token: String, kind: TokenKind) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.kinds.push(kind);
        id
    }

    /// Adds a language tag; returns its id.
    pub fn add_language(&mut self, lang: &str) -> usize {
        self.push(language_tag(lang), TokenKind::LanguageTag(lang.into()))
    }

    /// Adds surface tokens owned by `lang`.
    pub fn add_surface<I, S>(&mut self, lang: &str, tokens: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for t in tokens {
            self.push(t.into(), TokenKind::Surface(lang.into()));
        }
    }

    /// Rebuilds the lookup index (after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn from_entries(entries: Vec<(String, TokenKind)>) -> Result<Self> {
        let mut v = Self {
            tokens: Vec::new(),
            kinds: Vec::new(),
            index: BTreeMap::new(),
        };
        for (t, k) in entries {
            if v.index.contains_key(&t) {
                return Err(Error::VocabMismatch(format!("duplicate token `{t}`")));
            }
            v.push(t, k);
        }
        if v.tokens.len() < SPECIALS.len() || v.tokens[..3] != SPECIALS.map(String::from) {
            return Err(Error::VocabMismatch("missing special tokens".into()));
        }
        Ok(v)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &TokenKind)> {
        self.tokens.iter().map(String::as_str).zip(&self.kinds)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::OutOfVocab(token.into()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenIdOutOfRange(id))
    }

    pub fn kind(&self, id: usize) -> Option<&TokenKind> {
        self.kinds.get(id)
    }

    pub fn language_token(&self, lang: &str) -> Result<usize> {
        self.id(&language_tag(lang))
            .map_err(|_| Error::UnknownLanguage(lang.into()))
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(String::from)).collect()
    }

    /// Ids that can appear as decoder targets: surface tokens and `</s>`.
    pub fn target_support(&self) -> Vec<bool> {
        self.kinds
            .iter()
            .enumerate()
            .map(|(i, k)| i == EOS || matches!(k, TokenKind::Surface(_)))
            .collect()
    }

    /// Owning language of a surface token.
    pub fn owner(&self, id: usize) -> Option<&str> {
        match self.kinds.get(id)? {
            TokenKind::Surface(l) => Some(l),
            _ => None,
        }
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn layout_and_lookup() {
        let mut v = Vocab::new();
        let tag = v.add_language("a");
        v.add_surface("a", ["a:0", "a:1"]);
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(EOS).unwrap(), "</s>");
        assert_eq!(v.language_token("a").unwrap(), tag);
        assert_eq!(v.id("a:1").unwrap(), 5);
        assert!(matches!(v.id("zz"), Err(Error::OutOfVocab(_))));
        assert_eq!(v.owner(5), Some("a"));
        assert_eq!(v.target_support(), vec![false, false, true, false, true, true]);
    }
}
