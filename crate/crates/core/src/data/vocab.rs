use std::collections::HashMap;

use crate::error::{input_err, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const BOS: TokenId = 3;
pub const EOS: TokenId = 4;

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<bos>", "<eos>"];

/// Token/id bijection with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in first-seen order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for w in RESERVED {
            v.push(w);
        }
        for w in words {
            v.push(w);
        }
        v
    }

    /// Adds `word` if absent and returns its id.
    pub fn push(&mut self, word: &str) -> TokenId {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(word.to_string());
        self.ids.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    /// Id of `word`, or [`UNK`].
    pub fn lookup(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        match self.tokens.get(id as usize) {
            Some(t) => Ok(t),
            None => input_err(format!("token id {id} outside vocabulary of {}", self.len())),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    /// Space-joined rendering; reserved markers are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if is_special(id) && id != UNK {
                continue;
            }
            words.push(self.token(id)?);
        }
        Ok(words.join(" "))
    }
}

/// PAD, UNK, CLS, BOS and EOS.
pub fn is_special(id: TokenId) -> bool {
    id <= EOS
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new(["red", "shirt"]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<cls>"), Some(CLS));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("red"), Some(5));
        assert_eq!(v.lookup("blue"), UNK);
    }

    #[test]
    fn decode_skips_markers() {
        let v = Vocabulary::new(["red", "shirt"]);
        assert_eq!(v.decode(&[BOS, 5, 6, EOS, PAD]).unwrap(), "red shirt");
        assert!(v.decode(&[99]).is_err());
    }
}
