//! Synthetic product corpora with planted class structure.
//!
//! Every item carries a `category` triple whose tail names its class, so the
//! class is always recoverable from knowledge alone. Titles draw a
//! `class_signal` fraction of their tokens from a class-specific pool. Images
//! draw objects from a pool shared by a *group* of `image_group_size` classes,
//! so an image alone narrows the class down to its group.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, Item, ItemId, ObjectSequence, Triple, Vocab, QUESTION_WORDS, SPECIAL_TOKENS};
use crate::error::{Error, Result};

/// Relation id of the class-encoding triple.
pub const CATEGORY_RELATION: usize = 0;

const RELATION_NAMES: [&str; 8] = [
    "category",
    "material",
    "season",
    "way-to-dress",
    "color",
    "pattern",
    "style",
    "origin",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_items: usize,
    pub n_classes: usize,
    /// Relations including `category`.
    pub n_relations: usize,
    pub n_tail_entities_per_relation: usize,
    pub d_obj: usize,
    pub objects_per_item_range: [usize; 2],
    /// Includes the category triple, so the minimum must be at least 1.
    pub triples_per_item_range: [usize; 2],
    pub title_len_range: [usize; 2],
    /// Fraction of title tokens, objects and attribute triples that carry class
    /// information.
    pub class_signal: f64,
    pub tokens_per_class: usize,
    pub noise_tokens: usize,
    /// Classes that share one visual pool.
    pub image_group_size: usize,
    pub object_classes_per_group: usize,
    pub noise_object_classes: usize,
    /// Standard deviation of object features around their class prototype.
    pub feature_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_items: 200,
            n_classes: 10,
            n_relations: 6,
            n_tail_entities_per_relation: 6,
            d_obj: 16,
            objects_per_item_range: [2, 6],
            triples_per_item_range: [2, 4],
            title_len_range: [4, 10],
            class_signal: 0.6,
            tokens_per_class: 4,
            noise_tokens: 30,
            image_group_size: 2,
            object_classes_per_group: 3,
            noise_object_classes: 4,
            feature_noise: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.n_items < self.n_classes {
            return bad(format!(
                "n_items ({}) must be at least n_classes ({})",
                self.n_items, self.n_classes
            ));
        }
        for (name, [lo, hi]) in [
            ("objects_per_item_range", self.objects_per_item_range),
            ("triples_per_item_range", self.triples_per_item_range),
            ("title_len_range", self.title_len_range),
        ] {
            if lo > hi {
                return bad(format!("{name}: min {lo} exceeds max {hi}"));
            }
        }
        if self.n_relations == 0 {
            return bad("n_relations must be at least 1".into());
        }
        if self.triples_per_item_range[0] == 0 {
            return bad("every item needs its category triple: triples_per_item_range min must be >= 1".into());
        }
        if self.triples_per_item_range[1] > self.n_relations {
            return bad(format!(
                "triples_per_item_range max {} exceeds n_relations {}",
                self.triples_per_item_range[1], self.n_relations
            ));
        }
        if self.n_relations > 1 && self.n_tail_entities_per_relation == 0 {
            return bad("n_tail_entities_per_relation must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.class_signal) {
            return bad(format!("class_signal {} outside [0, 1]", self.class_signal));
        }
        if self.title_len_range[1] > 0 && self.tokens_per_class == 0 && self.noise_tokens == 0 {
            return bad("titles need tokens_per_class or noise_tokens".into());
        }
        if self.class_signal < 1.0 && self.title_len_range[1] > 0 && self.noise_tokens == 0 {
            return bad("class_signal < 1 needs noise_tokens".into());
        }
        if self.class_signal > 0.0 && self.title_len_range[1] > 0 && self.tokens_per_class == 0 {
            return bad("class_signal > 0 needs tokens_per_class".into());
        }
        if self.image_group_size == 0 {
            return bad("image_group_size must be positive".into());
        }
        if self.objects_per_item_range[1] > 0 {
            if self.d_obj == 0 {
                return bad("d_obj must be positive".into());
            }
            if self.object_classes_per_group == 0 && self.noise_object_classes == 0 {
                return bad("objects need object_classes_per_group or noise_object_classes".into());
            }
            if self.class_signal > 0.0 && self.object_classes_per_group == 0 {
                return bad("class_signal > 0 needs object_classes_per_group".into());
            }
            if self.class_signal < 1.0 && self.noise_object_classes == 0 && self.object_classes_per_group == 0 {
                return bad("class_signal < 1 needs noise_object_classes".into());
            }
        }
        if !(self.feature_noise >= 0.0) {
            return bad("feature_noise must be non-negative".into());
        }
        Ok(())
    }

    fn n_groups(&self) -> usize {
        self.n_classes.div_ceil(self.image_group_size)
    }
}

fn relation_name(r: usize) -> String {
    RELATION_NAMES
        .get(r)
        .map_or_else(|| format!("attr{r}"), |s| s.to_string())
}

fn tail_name(r: usize, j: usize) -> String {
    let stem = relation_name(r).replace('-', "");
    format!("{stem}{j}")
}

/// Generates a corpus. Classes are assigned round-robin, so every class gets
/// `n_items / n_classes` items (the first `n_items % n_classes` classes one more).
pub fn generate_synthetic_corpus(cfg: &GenConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tokens = Vocab::from_words(SPECIAL_TOKENS);
    for w in QUESTION_WORDS {
        tokens.intern(w);
    }
    let class_tokens: Vec<Vec<usize>> = (0..cfg.n_classes)
        .map(|k| (0..cfg.tokens_per_class).map(|j| tokens.intern(&format!("c{k}w{j}"))).collect())
        .collect();
    let noise_tokens: Vec<usize> = (0..cfg.noise_tokens).map(|j| tokens.intern(&format!("n{j}"))).collect();

    let mut relations = Vocab::new();
    let mut entities = Vocab::new();
    // tails[r] lists the entity ids valid for relation r.
    let mut tails: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_relations);
    for r in 0..cfg.n_relations {
        let name = relation_name(r);
        relations.intern(&name);
        for w in name.split('-') {
            tokens.intern(w);
        }
        let names: Vec<String> = if r == CATEGORY_RELATION {
            (0..cfg.n_classes).map(|k| format!("kind{k}")).collect()
        } else {
            (0..cfg.n_tail_entities_per_relation).map(|j| tail_name(r, j)).collect()
        };
        tails.push(
            names
                .iter()
                .map(|n| {
                    tokens.intern(n);
                    entities.intern(n)
                })
                .collect(),
        );
    }

    let n_groups = cfg.n_groups();
    let mut objects = Vocab::new();
    let group_objects: Vec<Vec<usize>> = (0..n_groups)
        .map(|gi| {
            (0..cfg.object_classes_per_group)
                .map(|j| objects.intern(&format!("g{gi}obj{j}")))
                .collect()
        })
        .collect();
    let noise_objects: Vec<usize> = (0..cfg.noise_object_classes)
        .map(|j| objects.intern(&format!("obj{j}")))
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = (0..objects.len())
        .map(|_| (0..cfg.d_obj).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let jitter = Normal::new(0.0, cfg.feature_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let id = ItemId(i as u32);
        let class = i % cfg.n_classes;
        let signal = |rng: &mut ChaCha8Rng| rng.random::<f64>() < cfg.class_signal;

        let len = rng.random_range(cfg.title_len_range[0]..=cfg.title_len_range[1]);
        let title = (0..len)
            .map(|_| {
                if signal(&mut rng) || noise_tokens.is_empty() {
                    *class_tokens[class].choose(&mut rng).expect("class pool")
                } else {
                    *noise_tokens.choose(&mut rng).expect("noise pool")
                }
            })
            .collect();

        let n_obj = rng.random_range(cfg.objects_per_item_range[0]..=cfg.objects_per_item_range[1]);
        let group = class / cfg.image_group_size;
        let mut obj = ObjectSequence::default();
        for _ in 0..n_obj {
            let label = if (signal(&mut rng) && !group_objects[group].is_empty()) || noise_objects.is_empty() {
                *group_objects[group].choose(&mut rng).expect("group pool")
            } else {
                *noise_objects.choose(&mut rng).expect("noise pool")
            };
            let feat = prototypes[label]
                .iter()
                .map(|&p| (p + jitter.sample(&mut rng)) as f32)
                .collect();
            let (x1, x2) = ordered(&mut rng);
            let (y1, y2) = ordered(&mut rng);
            obj.features.push(feat);
            obj.boxes.push([x1, y1, x2, y2, (x2 - x1) * (y2 - y1)]);
            obj.labels.push(label);
        }

        let n_triples = rng.random_range(cfg.triples_per_item_range[0]..=cfg.triples_per_item_range[1]);
        let mut triples = vec![Triple {
            head: id,
            relation: CATEGORY_RELATION,
            tail: tails[CATEGORY_RELATION][class],
        }];
        let mut attrs: Vec<usize> = (1..cfg.n_relations).collect();
        attrs.shuffle(&mut rng);
        for &r in attrs.iter().take(n_triples - 1) {
            let pool = &tails[r];
            let tail = if signal(&mut rng) {
                pool[(class + r) % pool.len()]
            } else {
                *pool.choose(&mut rng).expect("tail pool")
            };
            triples.push(Triple { head: id, relation: r, tail });
        }
        triples.shuffle(&mut rng);

        items.push(Item {
            id,
            title,
            objects: obj,
            triples,
            latent_class: class,
        });
    }

    Ok(Corpus {
        items,
        token_vocab: tokens,
        relation_vocab: relations,
        entity_vocab: entities,
        object_class_vocab: objects,
        n_classes: cfg.n_classes,
    })
}

fn ordered(rng: &mut impl Rng) -> (f32, f32) {
    let a: f32 = rng.random();
    let b: f32 = rng.random();
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}
