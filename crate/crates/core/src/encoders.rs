//! Modal encoders: title and object masking, the text and image transformer
//! stacks, and mean-pooled relation/tail features of the knowledge text.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_model::{KnowledgeText, ObjectSequence, MASK_ID, PAD_ID, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Graph, LayerNorm, Linear, ParamStore, Tensor, TransformerLayer, Var};

pub const DEFAULT_MASK_RATIO: f64 = 0.15;
pub const BOX_DIM: usize = 5;

/// Number of positions masked in a sequence of `len`: `ratio * len` rounded
/// half up, and at least one when anything is to be masked.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    if len == 0 || ratio <= 0.0 {
        return 0;
    }
    let n = (ratio * len as f64 + 0.5).floor() as usize;
    n.clamp(1, len)
}

/// What a selected token position was replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input_ids: Vec<usize>,
    /// Ascending.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub labels: Vec<usize>,
    pub actions: Vec<TokenAction>,
}

/// Selects `mask_count(len, ratio)` positions uniformly without replacement;
/// each becomes `[MASK]` (80%), a random non-special token (10%) or stays as
/// is (10%). Every selected position is predicted.
pub fn mask_tokens(seq: &[usize], ratio: f64, vocab_size: usize, rng: &mut impl Rng) -> MaskedSequence {
    let mut positions = index::sample(rng, seq.len(), mask_count(seq.len(), ratio)).into_vec();
    positions.sort_unstable();
    let mut input_ids = seq.to_vec();
    let mut actions = Vec::with_capacity(positions.len());
    let first_regular = SPECIAL_TOKENS.len();
    for &p in &positions {
        let u: f64 = rng.random();
        let action = if u < 0.8 {
            input_ids[p] = MASK_ID;
            TokenAction::Mask
        } else if u < 0.9 && vocab_size > first_regular {
            input_ids[p] = rng.random_range(first_regular..vocab_size);
            TokenAction::Random
        } else {
            TokenAction::Keep
        };
        actions.push(action);
    }
    MaskedSequence {
        labels: positions.iter().map(|&p| seq[p]).collect(),
        input_ids,
        mask_positions: positions,
        actions,
    }
}

pub fn mask_tokens_seeded(seq: &[usize], ratio: f64, vocab_size: usize, seed: u64) -> MaskedSequence {
    mask_tokens(seq, ratio, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskedObjects {
    pub objects: ObjectSequence,
    pub mask_positions: Vec<usize>,
    /// Object-class ids at `mask_positions`.
    pub labels: Vec<usize>,
}

/// Selected objects have their features zeroed with probability 0.9 and are
/// otherwise left intact. Boxes are never touched.
pub fn mask_objects(objects: &ObjectSequence, ratio: f64, rng: &mut impl Rng) -> MaskedObjects {
    let mut positions = index::sample(rng, objects.len(), mask_count(objects.len(), ratio)).into_vec();
    positions.sort_unstable();
    let mut out = objects.clone();
    for &p in &positions {
        if rng.random_bool(0.9) {
            out.features[p].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    MaskedObjects {
        labels: positions.iter().map(|&p| objects.labels[p]).collect(),
        objects: out,
        mask_positions: positions,
    }
}

pub fn mask_objects_seeded(objects: &ObjectSequence, ratio: f64, seed: u64) -> MaskedObjects {
    mask_objects(objects, ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A padded encoder output and its validity mask.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub states: Var,
    pub mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn key_mask(mask: &[bool]) -> Option<&[bool]> {
    Some(mask)
}

/// Token plus learned position embedding, layer norm, transformer stack.
/// Encodes titles, QA inputs and knowledge text with the same parameters.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_embedding: String,
    position_embedding: String,
    ln_embed: LayerNorm,
    layers: Vec<TransformerLayer>,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub hidden: usize,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig, vocab_size: usize) -> Self {
        Self {
            token_embedding: "text_encoder.token_embedding".into(),
            position_embedding: "text_encoder.position_embedding".into(),
            ln_embed: LayerNorm::new("text_encoder.ln_embed", cfg.hidden_text),
            layers: (0..cfg.n_layers)
                .map(|l| {
                    TransformerLayer::new(
                        &format!("text_encoder.layer{l}"),
                        cfg.hidden_text,
                        cfg.n_heads_text,
                        cfg.ffn_multiplier,
                    )
                })
                .collect(),
            vocab_size,
            max_positions: cfg.max_text_positions(),
            hidden: cfg.hidden_text,
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        store.add_normal(&self.token_embedding, &[self.vocab_size, self.hidden], std, rng)?;
        store.add_normal(&self.position_embedding, &[self.max_positions, self.hidden], std, rng)?;
        self.ln_embed.init(store)?;
        for l in &self.layers {
            l.init(store, std, rng)?;
        }
        Ok(())
    }

    /// Encodes `ids` padded with `[PAD]` to `pad_to` rows.
    pub fn forward(&self, g: &mut Graph, ids: &[usize], pad_to: usize) -> Result<EncodedSequence> {
        if ids.len() > pad_to || pad_to > self.max_positions {
            return Err(Error::shape(
                "encode_text",
                format!("{} tokens into {pad_to} slots (table {})", ids.len(), self.max_positions),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let mut padded = ids.to_vec();
        padded.resize(pad_to, PAD_ID);
        let mask: Vec<bool> = (0..pad_to).map(|i| i < ids.len()).collect();
        let table = g.param(&self.token_embedding)?;
        let tok = g.gather(table, &padded)?;
        let pos_table = g.param(&self.position_embedding)?;
        let positions: Vec<usize> = (0..pad_to).collect();
        let pos = g.gather(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        let mut x = self.ln_embed.forward(g, x)?;
        for l in &self.layers {
            x = l.forward(g, x, key_mask(&mask))?;
        }
        Ok(EncodedSequence { states: x, mask })
    }
}

/// Object features and boxes each linearly projected and summed, layer norm,
/// transformer stack.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    feature_proj: Linear,
    box_proj: Linear,
    ln_embed: LayerNorm,
    layers: Vec<TransformerLayer>,
    pub d_obj: usize,
    pub hidden: usize,
}

impl ImageEncoder {
    pub fn new(cfg: &EncoderConfig, d_obj: usize) -> Self {
        Self {
            feature_proj: Linear::new("image_encoder.feature_proj", d_obj, cfg.hidden_image),
            box_proj: Linear::new("image_encoder.box_proj", BOX_DIM, cfg.hidden_image),
            ln_embed: LayerNorm::new("image_encoder.ln_embed", cfg.hidden_image),
            layers: (0..cfg.n_layers)
                .map(|l| {
                    TransformerLayer::new(
                        &format!("image_encoder.layer{l}"),
                        cfg.hidden_image,
                        cfg.n_heads_image,
                        cfg.ffn_multiplier,
                    )
                })
                .collect(),
            d_obj,
            hidden: cfg.hidden_image,
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        self.feature_proj.init(store, std, rng)?;
        self.box_proj.init(store, std, rng)?;
        self.ln_embed.init(store)?;
        for l in &self.layers {
            l.init(store, std, rng)?;
        }
        Ok(())
    }

    /// Encodes the objects padded with all-zero rows to `pad_to` rows.
    pub fn forward(&self, g: &mut Graph, objects: &ObjectSequence, pad_to: usize) -> Result<EncodedSequence> {
        let n = objects.len();
        if n > pad_to {
            return Err(Error::shape("encode_image", format!("{n} objects into {pad_to} slots")));
        }
        if let Some(f) = objects.features.iter().find(|f| f.len() != self.d_obj) {
            return Err(Error::shape(
                "encode_image",
                format!("feature dim {} vs expected {}", f.len(), self.d_obj),
            ));
        }
        if objects.boxes.len() != n {
            return Err(Error::shape("encode_image", "box count differs from object count"));
        }
        let mut feats = vec![0.0; pad_to * self.d_obj];
        let mut boxes = vec![0.0; pad_to * BOX_DIM];
        for (i, (f, b)) in objects.features.iter().zip(&objects.boxes).enumerate() {
            for (o, &v) in feats[i * self.d_obj..(i + 1) * self.d_obj].iter_mut().zip(f) {
                *o = f64::from(v);
            }
            for (o, &v) in boxes[i * BOX_DIM..(i + 1) * BOX_DIM].iter_mut().zip(b) {
                *o = f64::from(v);
            }
        }
        let mask: Vec<bool> = (0..pad_to).map(|i| i < n).collect();
        let f = g.input(Tensor::matrix(pad_to, self.d_obj, feats)?);
        let b = g.input(Tensor::matrix(pad_to, BOX_DIM, boxes)?);
        let f = self.feature_proj.forward(g, f)?;
        let b = self.box_proj.forward(g, b)?;
        let x = g.add(f, b)?;
        let mut x = self.ln_embed.forward(g, x)?;
        for l in &self.layers {
            x = l.forward(g, x, key_mask(&mask))?;
        }
        Ok(EncodedSequence { states: x, mask })
    }
}

/// Relation feature `p` and tail feature `v` of each included triple, both
/// `1 x hidden_text` rows, in triple order.
#[derive(Debug, Clone, Default)]
pub struct SurfaceFeatures {
    pub relations: Vec<Var>,
    pub tails: Vec<Var>,
}

impl SurfaceFeatures {
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }
}

/// Encodes the knowledge text with the title encoder and mean-pools the last
/// hidden states over every relation and tail span.
pub fn knowledge_surface_features(
    g: &mut Graph,
    encoder: &TextEncoder,
    knowledge: &KnowledgeText,
    pad_to: usize,
) -> Result<SurfaceFeatures> {
    if knowledge.spans.is_empty() {
        return Ok(SurfaceFeatures::default());
    }
    let enc = encoder.forward(g, &knowledge.tokens, pad_to)?;
    let mut out = SurfaceFeatures::default();
    for span in &knowledge.spans {
        let rows: Vec<usize> = span.relation.clone().collect();
        out.relations.push(g.mean_rows(enc.states, &rows)?);
        let rows: Vec<usize> = span.tail.clone().collect();
        out.tails.push(g.mean_rows(enc.states, &rows)?);
    }
    Ok(out)
}

/// Mean-pooled encoding of a standalone entity surface form; the
/// representation of a replacement tail.
pub fn encode_entity(g: &mut Graph, encoder: &TextEncoder, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("entity with an empty surface form".into()));
    }
    let enc = encoder.forward(g, tokens, tokens.len())?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    g.mean_rows(enc.states, &rows)
}
