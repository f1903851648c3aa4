//! Word-level tokenizer with a corpus-built vocabulary.
//!
//! Text is lowercased and split on anything that is not alphanumeric, so
//! punctuation only separates words and never produces tokens. Sequences are
//! wrapped in BOS/EOS and capped at [`MAX_LEN`] ids.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Maximum sequence length including BOS and EOS.
pub const MAX_LEN: usize = 64;

/// Serialized as its plain word list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Vocab {
    /// Builds a vocabulary from the distinct words of `texts`, sorted so the
    /// result does not depend on corpus order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(words(t));
        }
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        Self::from_words(words)
    }

    /// Restores a vocabulary from its full word list (specials first).
    pub fn from_words(words: Vec<String>) -> Self {
        let lookup = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, lookup }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= SPECIALS.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.lookup.get(word).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(16);
        ids.push(BOS);
        ids.extend(words(text).take(MAX_LEN - 2).map(|w| self.id(&w)));
        ids.push(EOS);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["The soft ball.", "A hard, rough block!"])
    }

    #[test]
    fn empty_text_is_markers_only() {
        assert_eq!(vocab().tokenize(""), vec![BOS, EOS]);
    }

    #[test]
    fn case_and_punctuation_are_normalized() {
        let v = vocab();
        assert_eq!(v.tokenize("Soft ball."), v.tokenize("soft ball"));
        assert_eq!(v.tokenize("soft ball").len(), 4);
    }

    #[test]
    fn unknown_words_map_to_unk_in_place() {
        let v = vocab();
        let ids = v.tokenize("soft zebra ball");
        assert_eq!(ids[2], UNK);
        assert_ne!(ids[1], UNK);
        assert_ne!(ids[3], UNK);
    }

    #[test]
    fn truncates_to_max_len() {
        let long = "ball ".repeat(200);
        let ids = vocab().tokenize(&long);
        assert_eq!(ids.len(), MAX_LEN);
        assert_eq!(ids[MAX_LEN - 1], EOS);
    }

    #[test]
    fn build_is_order_independent() {
        assert_eq!(
            Vocab::build(["b a", "c"]).words(),
            Vocab::build(["c", "a b"]).words()
        );
    }

    #[test]
    fn serde_round_trip_restores_lookup() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with("[\"<bos>\""));
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tokenize("soft ball"), v.tokenize("soft ball"));
    }
}
