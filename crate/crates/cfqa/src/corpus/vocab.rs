//! Closed word-level vocabulary and tokenizer.
//!
//! Ids are dense: token `i` of the list has id `i`, specials occupy the
//! first six slots. Text is lowercased and split on whitespace and
//! punctuation; out-of-vocabulary words map to `[UNK]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;
use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const MASK_ID: TokenId = 3;
/// Separator after the question.
pub const QSEP_ID: TokenId = 4;
/// Separator before each paragraph.
pub const PSEP_ID: TokenId = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "[QSEP]", "[PSEP]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

impl Vocabulary {
    /// Build from regular (non-special) words; specials are prepended.
    /// Duplicate words are rejected.
    pub fn build<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    /// Reconstruct from a full token list (specials included, in order).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Config(format!(
                    "vocabulary slot {i} must be the special token {special}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id for a token that the caller knows is in the vocabulary.
    pub fn id_of(&self, token: &str) -> TokenId {
        self.id(token)
            .unwrap_or_else(|| panic!("token {token:?} not in vocabulary"))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// Ids eligible as random replacements during focal perturbation.
    pub fn num_regular(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL
    }

    pub fn first_regular_id(&self) -> TokenId {
        NUM_SPECIAL as TokenId
    }

    /// Lowercase, split on whitespace and punctuation, map OOV to `[UNK]`.
    /// A whitespace-delimited piece that exactly matches a special token
    /// keeps its special id.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for piece in text.split_whitespace() {
            if let Some(pos) = SPECIAL_TOKENS.iter().position(|s| *s == piece) {
                ids.push(pos as TokenId);
                continue;
            }
            for word in split_words(piece) {
                ids.push(self.id(&word).unwrap_or(UNK_ID));
            }
        }
        ids
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable content hash, embedded in checkpoints.
    pub fn hash(&self) -> String {
        sha256_hex(self.tokens.join("\n").as_bytes())
    }
}

/// Maximal runs of alphanumeric characters, lowercased.
fn split_words(piece: &str) -> Vec<String> {
    piece
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vocabulary {
        Vocabulary::build(["from", "2005", "to", "2008", "serve"].map(String::from)).unwrap()
    }

    #[test]
    fn ids_are_dense_and_bijective() {
        let v = sample();
        for (i, tok) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(tok), Some(i as TokenId));
        }
        assert_eq!(v.len(), NUM_SPECIAL + 5);
    }

    #[test]
    fn duplicate_token_rejected() {
        assert!(Vocabulary::build(["a", "a"].map(String::from)).is_err());
    }

    #[test]
    fn empty_text_tokenizes_to_empty() {
        assert!(sample().tokenize("").is_empty());
    }

    #[test]
    fn splits_on_whitespace_and_punctuation() {
        let v = sample();
        let ids = v.tokenize("From 2005 to 2008");
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|&id| (id as usize) < v.len()));
        assert!(ids.iter().all(|&id| id != UNK_ID));

        let ids = v.tokenize("serve, from!");
        assert_eq!(ids, vec![v.id_of("serve"), v.id_of("from")]);
    }

    #[test]
    fn oov_maps_to_unk() {
        assert_eq!(sample().tokenize("senate"), vec![UNK_ID]);
    }

    // Exhaustive vocabulary round-trip oracle: every entry survives
    // detokenize(tokenize(w)).
    #[test]
    fn roundtrip_every_vocab_entry() {
        let v = sample();
        for tok in v.tokens() {
            let ids = v.tokenize(tok);
            assert_eq!(&v.detokenize(&ids), tok, "round-trip failed for {tok:?}");
        }
    }

    #[test]
    fn serde_is_a_plain_array() {
        let v = sample();
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with("[\"[PAD]\""));
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.id("2008"), v.id("2008"));
    }
}
