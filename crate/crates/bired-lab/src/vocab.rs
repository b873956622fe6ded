//! Word-level tokenizer over a closed vocabulary.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub type TokenId = usize;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const YES: &str = "yes";
pub const NO: &str = "no";

/// Ordered list of distinct words; ids are dense `0..len`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from words; reserved tokens are prepended, duplicates dropped.
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = vec![
            UNK.to_string(),
            BOS.to_string(),
            YES.to_string(),
            NO.to_string(),
        ];
        let mut seen: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            debug_assert!(!w.contains(char::is_whitespace), "word {w:?} contains whitespace");
            if !seen.contains_key(&w) {
                seen.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Vocab { index: seen, tokens }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn yes(&self) -> TokenId {
        2
    }

    pub fn no(&self) -> TokenId {
        3
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn words(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-split words mapped to ids; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.unk()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// True when every word of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        text.split_whitespace().all(|w| self.id(w).is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vocab {
        Vocab::new(
            ["paris", "is", "the", "capital", "of", "france"]
                .into_iter()
                .map(String::from),
        )
    }

    #[test]
    fn tokenize_round_trips_in_vocab_text() {
        let v = sample();
        let ids = v.tokenize("paris is the capital of");
        assert_eq!(ids.len(), 5);
        assert_eq!(v.detokenize(&ids), "paris is the capital of");
    }

    #[test]
    fn empty_text_gives_empty_sequence() {
        let v = sample();
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn unknown_words_map_to_unk_positionwise() {
        let v = sample();
        let words = ["paris", "zzz", "capital", "qqq"];
        let ids = v.tokenize(&words.join(" "));
        // oracle: recompute expected positions independently
        for (pos, w) in words.iter().enumerate() {
            let expect_unk = !["paris", "capital"].contains(w);
            assert_eq!(ids[pos] == v.unk(), expect_unk, "position {pos}");
        }
    }

    #[test]
    fn ids_are_dense_and_distinct() {
        let v = sample();
        let mut seen = std::collections::HashSet::new();
        for w in v.words() {
            assert!(seen.insert(v.id(w).unwrap()));
        }
        assert_eq!(seen.len(), v.len());
        assert!((0..v.len()).all(|i| seen.contains(&i)));
    }
}
