use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Dense string <-> id map. Ids are assigned in insertion order from 0.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for w in words {
            v.intern(&w.into());
        }
        v
    }

    /// Id of `word`, inserting it when absent.
    pub fn intern(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl Eq for Vocab {}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.words.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        let mut v = Vocab::new();
        for w in &words {
            if v.contains(w) {
                return Err(serde::de::Error::custom(format!("duplicate vocabulary entry `{w}`")));
            }
            v.intern(w);
        }
        Ok(v)
    }
}

/// Splits surface text into in-vocabulary tokens: whitespace and `-` separate
/// words; a word missing from the vocabulary is split greedily into the
/// longest known prefix followed by `##`-prefixed continuation pieces, and
/// falls back to `[UNK]` when no split exists.
pub struct Tokenizer<'v> {
    vocab: &'v Vocab,
    unk: usize,
}

impl<'v> Tokenizer<'v> {
    pub fn new(vocab: &'v Vocab) -> Self {
        Self {
            vocab,
            unk: vocab.id(super::UNK).unwrap_or(super::UNK_ID),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split(|c: char| c.is_whitespace() || c == '-').filter(|w| !w.is_empty()) {
            match self.word_pieces(word) {
                Some(pieces) => out.extend(pieces),
                None => out.push(self.unk),
            }
        }
        out
    }

    fn word_pieces(&self, word: &str) -> Option<Vec<usize>> {
        if let Some(id) = self.vocab.id(word) {
            return Some(vec![id]);
        }
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let piece: String = chars[start..end].iter().collect();
                let piece = if start > 0 { format!("##{piece}") } else { piece };
                if let Some(id) = self.vocab.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            pieces.push(found?);
            start = end;
        }
        Some(pieces)
    }
}
