//! JSON-lines corpus files: one header line with the vocabularies, then one
//! line per item.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Item, ItemId, ObjectSequence, Triple, Vocab};
use crate::error::{Error, Result};

pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    n_items: usize,
    n_classes: usize,
    token_vocab: Vocab,
    relation_vocab: Vocab,
    entity_vocab: Vocab,
    object_class_vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemLine {
    id: ItemId,
    title: Vec<usize>,
    objects: ObjectSequence,
    triples: Vec<[usize; 2]>,
    class: usize,
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        version: CORPUS_VERSION,
        n_items: corpus.items.len(),
        n_classes: corpus.n_classes,
        token_vocab: corpus.token_vocab.clone(),
        relation_vocab: corpus.relation_vocab.clone(),
        entity_vocab: corpus.entity_vocab.clone(),
        object_class_vocab: corpus.object_class_vocab.clone(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for it in &corpus.items {
        let line = ItemLine {
            id: it.id,
            title: it.title.clone(),
            objects: it.objects.clone(),
            triples: it.triples.iter().map(|t| [t.relation, t.tail]).collect(),
            class: it.latent_class,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads and validates a corpus file. Any malformed line fails the whole read.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| parse(1, "empty file, expected a header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| parse(1, e.to_string()))?;
    if header.version != CORPUS_VERSION {
        return Err(parse(1, format!("unsupported corpus version {}", header.version)));
    }
    let mut items = Vec::with_capacity(header.n_items);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let it: ItemLine = serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
        items.push(Item {
            id: it.id,
            title: it.title,
            objects: it.objects,
            triples: it
                .triples
                .into_iter()
                .map(|[relation, tail]| Triple {
                    head: it.id,
                    relation,
                    tail,
                })
                .collect(),
            latent_class: it.class,
        });
    }
    if items.len() != header.n_items {
        return Err(parse(
            items.len() + 2,
            format!("header declares {} items, file has {}", header.n_items, items.len()),
        ));
    }
    let corpus = Corpus {
        items,
        token_vocab: header.token_vocab,
        relation_vocab: header.relation_vocab,
        entity_vocab: header.entity_vocab,
        object_class_vocab: header.object_class_vocab,
        n_classes: header.n_classes,
    };
    corpus.validate()?;
    Ok(corpus)
}
