//! Deterministic hash tokenizer.
//!
//! Open-vocabulary and training-free: the text is lowercased and split on
//! whitespace, and each word is mapped to `3 + (fnv1a64(word) mod (V - 3))`.
//! Ids 0..2 are reserved for CLS, PAD and UNK. The same text always produces
//! the same ids, in any language, with no vocabulary files.

use serde::{Deserialize, Serialize};

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const RESERVED_IDS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Vocabulary size including the 3 reserved ids.
    pub vocab_size: u32,
    /// Maximum tokens per node, counting the leading CLS.
    pub t_max: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_size: 32768,
            t_max: 64,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) {
        assert!(self.vocab_size > RESERVED_IDS, "vocab must exceed reserved ids");
        assert!(self.t_max >= 2, "t_max must leave room for CLS plus one token");
    }
}

/// Token ids for one node; `ids[0]` is always CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<u32>,
}

impl TokenIds {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn word_id(word: &str, vocab_size: u32) -> u32 {
    RESERVED_IDS + (fnv1a64(word.as_bytes()) % (vocab_size - RESERVED_IDS) as u64) as u32
}

/// Tokenize normalized node text: lowercase, split on whitespace, hash each
/// word, prepend CLS, truncate to `t_max`.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> TokenIds {
    cfg.validate();
    let lower = text.to_lowercase();
    let mut ids = Vec::with_capacity(cfg.t_max.min(lower.len() / 4 + 2));
    ids.push(CLS_ID);
    for word in lower.split_whitespace() {
        if ids.len() == cfg.t_max {
            break;
        }
        ids.push(word_id(word, cfg.vocab_size));
    }
    TokenIds { ids }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_cls_only() {
        let ids = tokenize("", &TokenizerConfig::default());
        assert_eq!(ids.ids, vec![CLS_ID]);
    }

    #[test]
    fn equal_words_get_equal_ids() {
        let ids = tokenize("a a", &TokenizerConfig::default());
        assert_eq!(ids.ids.len(), 3);
        assert_eq!(ids.ids[0], CLS_ID);
        assert_eq!(ids.ids[1], ids.ids[2]);
        assert!(ids.ids[1] >= RESERVED_IDS);
    }

    #[test]
    fn hash_ids_match_independent_fnv_oracle() {
        // Frozen from an independent FNV-1a-64 implementation:
        //   fnv1a64("hello") = 11831194018420276491 -> 3 + h % 32765 = 14189
        //   fnv1a64("world") =  5717881983045765875 -> 3 + h % 32765 =  7178
        assert_eq!(fnv1a64(b"hello"), 11831194018420276491);
        assert_eq!(fnv1a64(b"world"), 5717881983045765875);
        let ids = tokenize("hello world", &TokenizerConfig::default());
        assert_eq!(ids.ids, vec![CLS_ID, 14189, 7178]);
    }

    #[test]
    fn truncates_to_t_max() {
        let cfg = TokenizerConfig {
            vocab_size: 32768,
            t_max: 4,
        };
        let ids = tokenize("one two three four five six", &cfg);
        assert_eq!(ids.ids.len(), 4);
        assert_eq!(ids.ids[0], CLS_ID);
    }

    #[test]
    fn lowercases_before_hashing() {
        let a = tokenize("Hello", &TokenizerConfig::default());
        let b = tokenize("hello", &TokenizerConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_across_calls() {
        let cfg = TokenizerConfig::default();
        let a = tokenize("the quick brown fox", &cfg);
        let b = tokenize("the quick brown fox", &cfg);
        assert_eq!(a, b);
    }
}
