//! Product data model: items with a title, an object sequence standing in for
//! the image, and knowledge-graph triples; corpus vocabularies; knowledge-text
//! stitching; synthetic generation and corpus files.

mod generate;
mod io;
mod knowledge;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use generate::{generate_synthetic_corpus, GenConfig, CATEGORY_RELATION};
pub use io::{read_corpus, write_corpus, CORPUS_VERSION};
pub use knowledge::{build_knowledge_text, KnowledgeText, TripleSpan};
pub use vocab::{Tokenizer, Vocab};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const SEP: &str = "[SEP]";
pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, MASK, SEP, CLS, UNK];
pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const CLS_ID: usize = 3;
pub const UNK_ID: usize = 4;

/// Words of the question template used by the QA dataset builder.
pub const QUESTION_WORDS: [&str; 7] = ["what", "is", "the", "of", "this", "item", "?"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "item-{}", self.0)
    }
}

/// `<item, property, value>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: ItemId,
    pub relation: usize,
    pub tail: usize,
}

/// Detected objects of a product image: features, normalized boxes
/// `[x1, y1, x2, y2, area]` and object-class labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectSequence {
    pub features: Vec<Vec<f32>>,
    pub boxes: Vec<[f32; 5]>,
    pub labels: Vec<usize>,
}

impl ObjectSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncated(&self, max: usize) -> ObjectSequence {
        let n = self.len().min(max);
        ObjectSequence {
            features: self.features[..n].to_vec(),
            boxes: self.boxes[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// One product. An empty title or object sequence is a missing modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: ItemId,
    pub title: Vec<usize>,
    pub objects: ObjectSequence,
    pub triples: Vec<Triple>,
    pub latent_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<Item>,
    pub token_vocab: Vocab,
    pub relation_vocab: Vocab,
    pub entity_vocab: Vocab,
    pub object_class_vocab: Vocab,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub items: usize,
    pub triples: usize,
    pub relations: usize,
    pub entities: usize,
    pub classes: usize,
}

impl Corpus {
    /// A corpus with no items and only the special tokens.
    pub fn empty(n_classes: usize) -> Self {
        Self {
            items: Vec::new(),
            token_vocab: Vocab::from_words(SPECIAL_TOKENS),
            relation_vocab: Vocab::new(),
            entity_vocab: Vocab::new(),
            object_class_vocab: Vocab::new(),
            n_classes,
        }
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            items: self.items.len(),
            triples: self.items.iter().map(|i| i.triples.len()).sum(),
            relations: self.relation_vocab.len(),
            entities: self.entity_vocab.len(),
            classes: self.n_classes,
        }
    }

    /// Position of each item id in `items`.
    pub fn index(&self) -> HashMap<ItemId, usize> {
        self.items.iter().enumerate().map(|(i, it)| (it.id, i)).collect()
    }

    /// Item positions grouped by latent class, in corpus order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, it) in self.items.iter().enumerate() {
            if let Some(v) = out.get_mut(it.latent_class) {
                v.push(i);
            }
        }
        out
    }

    pub fn tokenizer(&self) -> Tokenizer<'_> {
        Tokenizer::new(&self.token_vocab)
    }

    /// Token ids of a word (or words) from the token vocabulary.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenizer().tokenize(text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if self.token_vocab.id(s) != Some(i) {
                return bad(format!("special token {s} must have id {i}"));
            }
        }
        let mut seen = HashSet::new();
        for it in &self.items {
            if !seen.insert(it.id) {
                return bad(format!("duplicate item id {}", it.id));
            }
            if it.latent_class >= self.n_classes {
                return bad(format!("{}: class {} out of range", it.id, it.latent_class));
            }
            if let Some(t) = it.title.iter().find(|&&t| t >= self.token_vocab.len()) {
                return bad(format!("{}: token id {t} out of range", it.id));
            }
            let o = &it.objects;
            if o.features.len() != o.len() || o.boxes.len() != o.len() {
                return bad(format!("{}: object lists differ in length", it.id));
            }
            if let Some(l) = o.labels.iter().find(|&&l| l >= self.object_class_vocab.len()) {
                return bad(format!("{}: object class {l} out of range", it.id));
            }
            let d = o.features.first().map(Vec::len);
            if o.features.iter().any(|f| Some(f.len()) != d) {
                return bad(format!("{}: ragged object features", it.id));
            }
            for b in &o.boxes {
                let in_unit = b.iter().all(|v| (0.0..=1.0).contains(v));
                if !in_unit || b[0] > b[2] || b[1] > b[3] {
                    return bad(format!("{}: invalid box {b:?}", it.id));
                }
            }
            for t in &it.triples {
                if t.head != it.id {
                    return bad(format!("{}: triple head {} differs from item", it.id, t.head));
                }
                if t.relation >= self.relation_vocab.len() || t.tail >= self.entity_vocab.len() {
                    return bad(format!("{}: triple ids out of range", it.id));
                }
            }
        }
        Ok(())
    }

    /// Object feature width, if any item has objects.
    pub fn object_dim(&self) -> Option<usize> {
        self.items
            .iter()
            .find_map(|it| it.objects.features.first().map(Vec::len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_corpus_validates() {
        Corpus::empty(2).validate().unwrap();
    }

    #[test]
    fn foreign_triple_head_rejected() {
        let mut c = Corpus::empty(2);
        c.relation_vocab.intern("material");
        c.entity_vocab.intern("cotton");
        c.items.push(Item {
            id: ItemId(0),
            title: vec![],
            objects: ObjectSequence::default(),
            triples: vec![Triple {
                head: ItemId(9),
                relation: 0,
                tail: 0,
            }],
            latent_class: 0,
        });
        assert!(c.validate().is_err());
    }
}
