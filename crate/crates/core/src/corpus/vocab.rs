use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Sentence;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<mask>"];
const ESCAPE: char = '\\';

/// Token/id map. Ids 0, 1 and 2 are the padding, unknown-word and masking
/// sentinels; ingested tokens never map to them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = crate::Error;

    fn try_from(tokens: Vec<String>) -> crate::Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

// Tokens spelled like a sentinel, possibly behind escape characters, get
// one more escape character so the surface form can never collide.
fn is_reserved_form(token: &str) -> bool {
    RESERVED.contains(&token.trim_start_matches(ESCAPE))
}

pub(crate) fn escape(token: &str) -> String {
    if is_reserved_form(token) {
        format!("{ESCAPE}{token}")
    } else {
        token.to_string()
    }
}

pub(crate) fn unescape(token: &str) -> String {
    match token.strip_prefix(ESCAPE) {
        Some(rest) if is_reserved_form(rest) => rest.to_string(),
        _ => token.to_string(),
    }
}

impl Vocab {
    /// Vocabulary over the tokens of `sentences`, in first-seen order.
    /// Build it from training data only.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut v = Vocab::empty();
        for s in sentences {
            for tok in &s.tokens {
                v.insert(tok);
            }
        }
        v
    }

    fn empty() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocab { tokens, index }
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> crate::Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(crate::Error::invalid("vocabulary must start with the reserved sentinels"));
        }
        let index: HashMap<String, usize> =
            tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != tokens.len() {
            return Err(crate::Error::invalid("duplicate token in vocabulary"));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().filter(|&i| i > MASK).unwrap_or(UNK)
    }

    /// Ids for already-ingested (escaped) tokens; unseen tokens become UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Ids for raw text tokens, applying the same escaping as ingestion.
    pub fn encode_raw(&self, tokens: &[&str]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(&escape(t))).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Raw surface forms for ids; sentinels decode to their reserved
    /// spelling.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| match self.tokens.get(i) {
                Some(t) if i > MASK => unescape(t),
                Some(t) => t.clone(),
                None => RESERVED[UNK].to_string(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentence(tokens: &[&str]) -> Sentence {
        Sentence {
            tokens: tokens.iter().map(|t| escape(t)).collect(),
            label: 0,
        }
    }

    #[test]
    fn counts_reserved_entries() {
        let v = Vocab::build(&[sentence(&["a", "b", "a"])]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode_raw(&["a", "b"]), vec![3, 4]);
    }

    #[test]
    fn unseen_tokens_are_unknown() {
        let v = Vocab::build(&[sentence(&["a"])]);
        assert_eq!(v.encode_raw(&["zzz"]), vec![UNK]);
    }

    #[test]
    fn sentinel_spellings_are_escaped() {
        let v = Vocab::build(&[sentence(&["<mask>", "<pad>", "\\<unk>"])]);
        let ids = v.encode_raw(&["<mask>", "<pad>", "\\<unk>", "<unk>"]);
        assert!(ids[..3].iter().all(|&i| i > MASK), "{ids:?}");
        assert_eq!(ids[3], UNK);
        assert_eq!(v.decode(&ids[..3]), vec!["<mask>", "<pad>", "\\<unk>"]);
        assert_eq!(v.decode(&[PAD, UNK, MASK]), vec!["<pad>", "<unk>", "<mask>"]);
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(words in proptest::collection::vec("[a-z<>\\\\]{1,7}", 1..20)) {
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let v = Vocab::build(&[sentence(&refs)]);
            let ids = v.encode_raw(&refs);
            prop_assert!(ids.iter().all(|&i| i > MASK));
            prop_assert_eq!(v.decode(&ids), words);
        }
    }
}
