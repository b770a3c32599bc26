use std::collections::{BTreeSet, HashMap};

use crate::data::TokenId;
use crate::error::{Error, Result};

pub const PAD: TokenId = 0;
pub const START: TokenId = 1;
pub const END: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Whitespace tokenization with lowercasing. No stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token/id mapping with the four specials at fixed ids and the remaining
/// tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for text in texts {
            for tok in tokenize(text) {
                if !SPECIALS.contains(&tok.as_str()) {
                    seen.insert(tok);
                }
            }
        }
        if seen.is_empty() {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(seen).collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::invalid("vocabulary must start with the special tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
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

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`] if unseen.
    pub fn id(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text`, unseen words mapped to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Token ids of `text`; any unseen word is an error.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<TokenId>> {
        tokenize(text)
            .iter()
            .map(|t| {
                self.get(t)
                    .ok_or_else(|| Error::invalid(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Encodes a sentence and appends [`END`].
    pub fn encode_sentence(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.push(END);
        ids
    }

    /// Joins tokens with spaces, dropping PAD/START/END.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | START | END))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
