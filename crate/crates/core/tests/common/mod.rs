#![allow(dead_code)]

use k3m::data_model::{Corpus, Item, ItemId, ObjectSequence, Triple, Vocab, SPECIAL_TOKENS};
use k3m::interaction::FusionAlgorithm;
use k3m::model::{K3m, ModelConfig, ModelDims};
use k3m::nn::EncoderConfig;

pub const MICRO_WORDS: [&str; 15] = [
    "shirt", "shoe", "hat", "soft", "warm", "light", "dark", "long", "short", "color", "size", "red", "blue", "big",
    "small",
];

/// Three items over a 20-token vocabulary, two object classes and two
/// relations.
pub fn micro_corpus() -> Corpus {
    let token_vocab = Vocab::from_words(SPECIAL_TOKENS.iter().copied().chain(MICRO_WORDS));
    let relation_vocab = Vocab::from_words(["color", "size"]);
    let entity_vocab = Vocab::from_words(["red", "blue", "big", "small"]);
    let object_class_vocab = Vocab::from_words(["collar", "sole"]);
    let tok = |w: &str| token_vocab.id(w).unwrap();
    let obj = |f: [f32; 4], b: [f32; 5], l: usize| (f.to_vec(), b, l);
    let layout: [(&[&str], Vec<(Vec<f32>, [f32; 5], usize)>, [(usize, usize); 2], usize); 3] = [
        (
            &["soft", "red", "shirt", "long"],
            vec![
                obj([0.5, -0.2, 0.1, 0.9], [0.1, 0.1, 0.5, 0.6, 0.2], 0),
                obj([-0.3, 0.8, 0.4, -0.1], [0.4, 0.2, 0.9, 0.8, 0.3], 1),
            ],
            [(0, 0), (1, 2)],
            0,
        ),
        (
            &["dark", "shoe", "small", "warm", "light"],
            vec![
                obj([0.2, 0.3, -0.7, 0.4], [0.0, 0.0, 0.4, 0.3, 0.12], 1),
                obj([0.9, -0.5, 0.2, 0.0], [0.2, 0.3, 0.7, 0.9, 0.3], 1),
                obj([-0.6, 0.1, 0.3, 0.5], [0.5, 0.5, 1.0, 1.0, 0.25], 0),
            ],
            [(0, 1), (1, 3)],
            1,
        ),
        (
            &["big", "hat", "short"],
            vec![obj([0.1, 0.6, -0.4, -0.8], [0.2, 0.1, 0.8, 0.7, 0.36], 0)],
            [(1, 2), (0, 1)],
            0,
        ),
    ];
    let items = layout
        .into_iter()
        .enumerate()
        .map(|(i, (title, objs, triples, class))| {
            let id = ItemId(i as u32);
            Item {
                id,
                title: title.iter().map(|w| tok(w)).collect(),
                objects: ObjectSequence {
                    features: objs.iter().map(|o| o.0.clone()).collect(),
                    boxes: objs.iter().map(|o| o.1).collect(),
                    labels: objs.iter().map(|o| o.2).collect(),
                },
                triples: triples
                    .iter()
                    .map(|&(relation, tail)| Triple { head: id, relation, tail })
                    .collect(),
                latent_class: class,
            }
        })
        .collect();
    let c = Corpus {
        items,
        token_vocab,
        relation_vocab,
        entity_vocab,
        object_class_vocab,
        n_classes: 2,
    };
    c.validate().unwrap();
    c
}

pub fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        hidden_text: 8,
        hidden_image: 8,
        n_heads_text: 2,
        n_heads_image: 2,
        ffn_multiplier: 2,
        agg_heads: 2,
        m_text: 8,
        m_obj: 4,
        m_know: 12,
        init_std: 0.3,
    }
}

pub fn micro_model(corpus: &Corpus, with_knowledge: bool, iffm: FusionAlgorithm) -> K3m {
    let cfg = ModelConfig {
        encoder: micro_encoder(),
        with_knowledge,
        iffm,
    };
    K3m::new(cfg, ModelDims::of(corpus).unwrap()).unwrap()
}
