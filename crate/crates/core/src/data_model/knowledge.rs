use std::ops::Range;

use super::{Corpus, Item};

/// Token ranges of one triple's relation and tail inside a [`KnowledgeText`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleSpan {
    pub relation: Range<usize>,
    pub tail: Range<usize>,
}

/// "property_1 value_1 property_2 value_2 ..." as token ids, with the span of
/// every included triple in item order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeText {
    pub tokens: Vec<usize>,
    pub spans: Vec<TripleSpan>,
}

impl KnowledgeText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Stitches relation and tail surface forms of the item's triples, in order.
/// Stops before the first triple that would overflow `max_len`, so a triple is
/// never split; `spans.len()` is the number of triples that fit.
pub fn build_knowledge_text(item: &Item, corpus: &Corpus, max_len: usize) -> KnowledgeText {
    let tok = corpus.tokenizer();
    let mut out = KnowledgeText::default();
    for t in &item.triples {
        let rel = tok.tokenize(corpus.relation_vocab.word(t.relation).unwrap_or_default());
        let tail = tok.tokenize(corpus.entity_vocab.word(t.tail).unwrap_or_default());
        if out.tokens.len() + rel.len() + tail.len() > max_len {
            break;
        }
        let r0 = out.tokens.len();
        out.tokens.extend(&rel);
        let t0 = out.tokens.len();
        out.tokens.extend(&tail);
        out.spans.push(TripleSpan {
            relation: r0..t0,
            tail: t0..out.tokens.len(),
        });
    }
    out
}
