//! Browser bindings. Each export takes plain numbers and strings and returns
//! a JSON document; the `*_json` functions underneath are ordinary Rust.

use std::collections::BTreeMap;

use k3m::corruption::{apply_corruption, balanced_split, CorruptionKind, CorruptionSetting, Split};
use k3m::data_model::{generate_synthetic_corpus, GenConfig};
use k3m::interaction::{iffm_fuse, FusionAlgorithm, FusionGate, Mode};
use k3m::model::{K3m, ModelConfig, ModelDims};
use k3m::nn::{EncoderConfig, Graph, ParamStore, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js(r: k3m::Result<Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

fn corpus(n_items: usize, n_classes: usize, seed: u64) -> k3m::Result<k3m::data_model::Corpus> {
    let cfg = GenConfig {
        n_items,
        n_classes,
        ..GenConfig::default()
    };
    generate_synthetic_corpus(&cfg, seed)
}

fn action_name(a: &k3m::corruption::Action) -> String {
    serde_json::to_value(a.kind())
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Counts of each corruption action, overall and per split.
pub fn corruption_preview_json(
    n_items: usize,
    n_classes: usize,
    kind: &str,
    ratio: u32,
    seed: u64,
) -> k3m::Result<Value> {
    let kind: CorruptionKind = kind.parse()?;
    let clean = corpus(n_items, n_classes, seed)?;
    let (dirty, manifest) = apply_corruption(&clean, CorruptionSetting::new(kind, ratio)?, seed)?;
    let split = balanced_split(&dirty, &manifest, seed)?;
    let mut total: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_split: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    for s in [Split::Train, Split::Dev, Split::Test] {
        per_split.insert(s.as_str(), BTreeMap::new());
    }
    for e in &manifest.entries {
        let name = action_name(&e.action);
        *total.entry(name.clone()).or_default() += 1;
        if let Some(s) = split.get(e.item_id) {
            *per_split.get_mut(s.as_str()).unwrap().entry(name).or_default() += 1;
        }
    }
    Ok(json!({ "items": dirty.items.len(), "actions": total, "splits": per_split }))
}

fn explorer_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        hidden_text: 16,
        hidden_image: 16,
        n_heads_text: 2,
        n_heads_image: 2,
        ffn_multiplier: 2,
        agg_heads: 2,
        m_text: 16,
        m_obj: 6,
        m_know: 24,
        init_std: 0.3,
    }
}

/// Triple attention of one item under freshly initialized weights.
pub fn triple_attention_json(n_items: usize, item: usize, seed: u64) -> k3m::Result<Value> {
    let c = corpus(n_items, 4, seed)?;
    let it = c
        .items
        .get(item)
        .ok_or_else(|| k3m::Error::InvalidInput(format!("item {item} of {}", c.items.len())))?;
    let cfg = ModelConfig {
        encoder: explorer_encoder(),
        ..ModelConfig::default()
    };
    let model = K3m::new(cfg, ModelDims::of(&c)?)?;
    let params = model.init_params(seed)?;
    let mut g = Graph::new(&params);
    let out = model.forward(&mut g, &model.input(it, &c), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let att = out.attention.read(&g);
    let title: Vec<&str> = it.title.iter().map(|&t| c.token_vocab.word(t).unwrap_or("?")).collect();
    let triples: Vec<[&str; 2]> = it
        .triples
        .iter()
        .map(|t| {
            [
                c.relation_vocab.word(t.relation).unwrap_or("?"),
                c.entity_vocab.word(t.tail).unwrap_or("?"),
            ]
        })
        .collect();
    Ok(json!({
        "item": it.id.0,
        "class": it.latent_class,
        "title": title,
        "triples": triples,
        "attention": att.attention,
        "importance": att.importance,
    }))
}

/// Every fusion algorithm applied to one pair of feature rows, with the
/// gate `sigmoid(w*h0 + u*hx + b)` shared across channels.
pub fn fusion_json(h0: &[f64], hx: &[f64], w: f64, u: f64, b: f64, seed: u64) -> k3m::Result<Value> {
    let n = h0.len();
    if n == 0 || hx.len() != n {
        return Err(k3m::Error::InvalidInput("h0 and hx need the same nonzero length".into()));
    }
    let gate = FusionGate::new("demo", n);
    let mut params = ParamStore::new();
    gate.init(&mut params)?;
    params.set("demo.w", Tensor::full(&[n], w))?;
    params.set("demo.u", Tensor::full(&[n], u))?;
    params.set("demo.b", Tensor::full(&[n], b))?;
    let mut g = Graph::new(&params);
    let a = g.input(Tensor::row(h0.to_vec()));
    let x = g.input(Tensor::row(hx.to_vec()));
    let p = gate.forward(&mut g, a, x)?;
    let mut out = serde_json::Map::new();
    out.insert("gate".into(), json!(g.value(p).data()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (key, algo, mode) in [
        ("off", FusionAlgorithm::Off, Mode::Eval),
        ("mean", FusionAlgorithm::Mean, Mode::Eval),
        ("soft", FusionAlgorithm::SoftSampling, Mode::Eval),
        ("hard_train", FusionAlgorithm::HardSampling, Mode::Train),
    ] {
        let f = iffm_fuse(&mut g, a, x, algo, &gate, mode, &mut rng)?;
        out.insert(key.into(), json!(g.value(f).data()));
    }
    Ok(Value::Object(out))
}

#[wasm_bindgen]
pub fn corruption_preview(n_items: u32, n_classes: u32, kind: &str, ratio: u32, seed: u32) -> Result<String, JsError> {
    js(corruption_preview_json(n_items as usize, n_classes as usize, kind, ratio, seed as u64))
}

#[wasm_bindgen]
pub fn triple_attention(n_items: u32, item: u32, seed: u32) -> Result<String, JsError> {
    js(triple_attention_json(n_items as usize, item as usize, seed as u64))
}

#[wasm_bindgen]
pub fn fusion(h0: &[f64], hx: &[f64], w: f64, u: f64, b: f64, seed: u32) -> Result<String, JsError> {
    js(fusion_json(h0, hx, w, u, b, seed as u64))
}
