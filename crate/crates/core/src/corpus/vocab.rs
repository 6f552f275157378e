//! Whitespace tokenizer with a deterministic, lexicographically ordered
//! vocabulary.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Dataset;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

/// Token ids plus the number of surface tokens that fell back to `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub unknown: usize,
    pub unknown_tokens: Vec<String>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved ids first, then every distinct surface token in byte order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for tok in t.split_whitespace() {
                set.insert(tok.to_string());
            }
        }
        for r in RESERVED {
            set.remove(r);
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect::<Vec<_>>();
        Self::from(tokens)
    }

    pub fn from_datasets(datasets: &[&Dataset]) -> Self {
        Self::build(datasets.iter().flat_map(|d| {
            d.examples
                .iter()
                .flat_map(|e| [e.instruction.as_str(), e.input.as_str(), e.output.as_str()])
        }))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Encoding {
        let mut ids = Vec::new();
        let mut unknown_tokens = Vec::new();
        for tok in text.split_whitespace() {
            match self.id(tok) {
                Some(id) => ids.push(id),
                None => {
                    ids.push(UNK);
                    unknown_tokens.push(tok.to_string());
                }
            }
        }
        Encoding {
            ids,
            unknown: unknown_tokens.len(),
            unknown_tokens,
        }
    }

    /// Joins non-reserved tokens with single spaces.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_ids_after_reserved() {
        let v = Vocab::build(["b a", "a c"]);
        assert_eq!(v.tokens()[..4], RESERVED.map(String::from));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("c"), Some(6));
    }

    #[test]
    fn tokenize_and_unknowns() {
        let v = Vocab::build(["b a", "a c"]);
        let e = v.tokenize("a a b");
        assert_eq!(e.ids, vec![4, 4, 5]);
        assert_eq!(e.unknown, 0);
        let e = v.tokenize("a zz");
        assert_eq!(e.ids, vec![4, UNK]);
        assert_eq!(e.unknown, 1);
        assert_eq!(e.unknown_tokens, vec!["zz".to_string()]);
        assert_eq!(v.detokenize(&[BOS, 4, 6, EOS]), "a c");
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(["x y z"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
