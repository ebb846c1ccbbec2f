use std::collections::HashMap;

use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
pub const RESERVED: usize = 4;

pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

/// Token table with the four reserved entries pinned at ids 0..4.
/// Surface tokens are whitespace-free; out-of-vocabulary words map to `<unk>`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let reserved = [SOS_TOKEN, EOS_TOKEN, UNK_TOKEN, PAD_TOKEN];
        let mut token_to_id = HashMap::new();
        let mut id_to_token = Vec::new();
        for (i, t) in reserved.iter().enumerate() {
            token_to_id.insert(t.to_string(), i);
            id_to_token.push(t.to_string());
        }
        Vocabulary { token_to_id, id_to_token }
    }

    /// Build from an ordered token iterator; duplicates are ignored.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.insert(t)?;
        }
        Ok(v)
    }

    pub fn insert(&mut self, token: &str) -> Result<usize> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Vocab(format!("token {token:?} is empty or contains whitespace")));
        }
        if let Some(&id) = self.token_to_id.get(token) {
            if id < RESERVED {
                return Err(Error::Vocab(format!("token {token:?} collides with a reserved entry")));
            }
            return Ok(id);
        }
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.to_string(), id);
        self.id_to_token.push(token.to_string());
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {} of {}", id, self.id_to_token.len())))
    }

    /// Non-reserved tokens in id order, for serialization.
    pub fn surface_tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED..]
    }

    /// Encode surface words; unknown words become `<unk>`.
    pub fn encode_words(&self, words: &[impl AsRef<str>]) -> Result<TokenSequence> {
        TokenSequence::new(words.iter().map(|w| self.id_or_unk(w.as_ref())).collect())
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<Vec<String>> {
        seq.ids().iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }
}

/// Word ids w_1..w_T of one utterance. The start and end markers are never
/// stored; they are added by the model when scoring. `<unk>` is allowed (it
/// stands in for an out-of-vocabulary surface word), the other reserved ids
/// are not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Domain("empty token sequence".into()));
        }
        for &id in &ids {
            if id == SOS || id == EOS || id == PAD {
                return Err(Error::Domain(format!(
                    "reserved id {id} inside a token sequence"
                )));
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Surface length T (no markers).
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty sequences
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_pinned() {
        let v = Vocabulary::new();
        assert_eq!(v.lookup(SOS_TOKEN), Some(0));
        assert_eq!(v.lookup(EOS_TOKEN), Some(1));
        assert_eq!(v.lookup(UNK_TOKEN), Some(2));
        assert_eq!(v.lookup(PAD_TOKEN), Some(3));
        assert_eq!(v.len(), RESERVED);
    }

    #[test]
    fn insert_assigns_dense_ids_and_is_idempotent() {
        let mut v = Vocabulary::new();
        let a = v.insert("play").unwrap();
        let b = v.insert("music").unwrap();
        assert_eq!((a, b), (4, 5));
        assert_eq!(v.insert("play").unwrap(), 4);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn whitespace_token_rejected() {
        let mut v = Vocabulary::new();
        assert!(matches!(v.insert("two words"), Err(Error::Vocab(_))));
        assert!(matches!(v.insert(""), Err(Error::Vocab(_))));
    }

    #[test]
    fn unknown_word_encodes_to_unk() {
        let mut v = Vocabulary::new();
        v.insert("play").unwrap();
        let seq = v.encode_words(&["play", "nonsense"]).unwrap();
        assert_eq!(seq.ids(), &[4, UNK]);
    }

    #[test]
    fn sequence_rejects_markers_but_allows_unk() {
        assert!(TokenSequence::new(vec![SOS, 5]).is_err());
        assert!(TokenSequence::new(vec![5, EOS]).is_err());
        assert!(TokenSequence::new(vec![PAD]).is_err());
        assert!(TokenSequence::new(vec![]).is_err());
        assert!(TokenSequence::new(vec![UNK, 7]).is_ok());
    }
}
