//! Pretraining objectives (masked tokens, masked objects, triple plausibility)
//! and the finetuning heads, metrics and datasets for item classification,
//! item alignment and question answering.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corruption::{split_counts, Split, SplitAssignment};
use crate::data_model::{Corpus, Item, ItemId, QUESTION_WORDS, SEP_ID};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_NEGATIVES: usize = 3;

/// Losses of one pretraining batch, in nats.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainBatchLoss {
    pub l_mlm: f64,
    pub l_mom: f64,
    pub l_lpm: f64,
    pub l_total: f64,
}

impl PretrainBatchLoss {
    pub fn new(l_mlm: f64, l_mom: f64, l_lpm: f64) -> Self {
        Self {
            l_mlm,
            l_mom,
            l_lpm,
            l_total: l_mlm + l_mom + l_lpm,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_mlm, self.l_mom, self.l_lpm, self.l_total].iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite term.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [("l_mlm", self.l_mlm), ("l_mom", self.l_mom), ("l_lpm", self.l_lpm)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// A linear head whose weights start at zero unless initialized otherwise.
#[derive(Debug, Clone)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            linear: Linear::new(&format!("tasks.{name}"), d_in, d_out),
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        self.linear.init(store, std, rng)
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.add_zeros(self.linear.weight_name(), &[self.linear.d_in, self.linear.d_out])?;
        store.add_zeros(self.linear.bias_name(), &[self.linear.d_out])?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.linear.forward(g, x)
    }
}

/// Mean cross-entropy of the head's predictions at `positions` of `states`.
/// No positions contribute a constant zero.
pub fn masked_prediction_loss(
    g: &mut Graph,
    head: &Head,
    states: Var,
    positions: &[usize],
    labels: &[usize],
) -> Result<Var> {
    if positions.len() != labels.len() {
        return Err(Error::shape("masked_prediction_loss", "positions and labels differ in length"));
    }
    if positions.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let rows = g.select_rows(states, positions)?;
    let logits = head.forward(g, rows)?;
    g.cross_entropy(logits, labels)
}

/// `|c* + p - v|_1`.
pub fn transe_score(g: &mut Graph, c_star: Var, p: Var, v: Var) -> Result<Var> {
    let s = g.add(c_star, p)?;
    let d = g.sub(s, v)?;
    let a = g.abs(d);
    Ok(g.sum(a))
}

pub fn transe_score_values(c_star: &[f64], p: &[f64], v: &[f64]) -> f64 {
    c_star.iter().zip(p).zip(v).map(|((c, p), v)| (c + p - v).abs()).sum()
}

/// Margin loss of one item: average over its triples of the hinge averaged
/// over each triple's negatives. An item without triples yields zero.
pub fn lpm_loss(g: &mut Graph, positive: &[Var], negative: &[Vec<Var>], margin: f64) -> Result<Var> {
    if positive.len() != negative.len() {
        return Err(Error::shape("lpm_loss", "one negative list per positive required"));
    }
    let mut terms = Vec::new();
    for (&s, negs) in positive.iter().zip(negative) {
        if negs.is_empty() {
            return Err(Error::InvalidInput("positive triple without negatives".into()));
        }
        let k = negs.len() as f64;
        for &n in negs {
            let d = g.sub(s, n)?;
            let h = g.input(Tensor::scalar(margin));
            let d = g.add(d, h)?;
            let r = g.relu(d);
            terms.push(g.scale(r, 1.0 / k));
        }
    }
    if terms.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let all = g.concat_cols(&terms)?;
    let total = g.sum(all);
    Ok(g.scale(total, 1.0 / positive.len() as f64))
}

pub fn lpm_loss_values(positive: &[f64], negative: &[Vec<f64>], margin: f64) -> f64 {
    if positive.is_empty() {
        return 0.0;
    }
    let sum: f64 = positive
        .iter()
        .zip(negative)
        .map(|(s, negs)| negs.iter().map(|n| (s - n + margin).max(0.0)).sum::<f64>() / negs.len() as f64)
        .sum();
    sum / positive.len() as f64
}

/// One corrupted version of a positive triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negative {
    /// Another tail entity, scored with the item's own `c*`.
    Tail(usize),
    /// Another batch item's `c*` (batch position), scored with the same `p`, `v`.
    Head(usize),
}

/// `k` negatives, each a fair coin between replacing the tail and replacing
/// the head; falls back to the only non-empty pool.
pub fn sample_negatives(
    tail: usize,
    n_entities: usize,
    batch_pos: usize,
    batch_len: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Negative>> {
    let tails = n_entities >= 2;
    let heads = batch_len >= 2;
    if !tails && !heads {
        return Err(Error::InvalidInput(
            "no replacement available: need two entities or two batch items".into(),
        ));
    }
    let other = |rng: &mut dyn rand::RngCore, n: usize, skip: usize| {
        let r = rng.random_range(0..n - 1);
        if r >= skip {
            r + 1
        } else {
            r
        }
    };
    Ok((0..k)
        .map(|_| {
            let use_head = match (tails, heads) {
                (true, true) => rng.random_bool(0.5),
                (false, true) => true,
                _ => false,
            };
            if use_head {
                Negative::Head(other(rng, batch_len, batch_pos))
            } else {
                Negative::Tail(other(rng, n_entities, tail))
            }
        })
        .collect())
}

/// 1-based rank of `truth` in descending score order, ties going to the
/// lower candidate index.
pub fn rank_of(scores: &[f64], truth: usize) -> Result<usize> {
    let t = *scores
        .get(truth)
        .ok_or_else(|| Error::InvalidInput(format!("truth {truth} not among {} candidates", scores.len())))?;
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < truth))
        .count())
}

/// Candidate indices sorted by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Percentage of queries whose truth ranks in the top `k`.
pub fn rank_at_k(scores: &[Vec<f64>], truth: &[usize], k: usize) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::shape("rank_at_k", "one truth per query required"));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("rank_at_k over zero queries".into()));
    }
    let mut hits = 0usize;
    for (s, &t) in scores.iter().zip(truth) {
        if s.len() < k {
            return Err(Error::InvalidInput(format!("{} candidates for top-{k}", s.len())));
        }
        if rank_of(s, t)? <= k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// Percentage of rows whose first maximal score is at the label.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("accuracy over zero examples".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| ranking(s).first() == Some(&l))
        .count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// F1 score (percent) of the positive class `1` under argmax predictions.
pub fn f1_positive(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("f1 over zero examples".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (s, &l) in scores.iter().zip(labels) {
        let pred = ranking(s).first().copied() == Some(1);
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ItemCls,
    Alignment,
    Qa,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ItemCls => "item_cls",
            Task::Alignment => "alignment",
            Task::Qa => "qa",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Task::Qa => 6,
            _ => 4,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item_cls" => Ok(Task::ItemCls),
            "alignment" => Ok(Task::Alignment),
            "qa" => Ok(Task::Qa),
            _ => Err(Error::InvalidInput(format!("unknown task `{s}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (item, item) pair; `label` 1 means aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignPair {
    pub left: ItemId,
    pub right: ItemId,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentData {
    /// The input corpus plus one twin listing per item.
    pub corpus: Corpus,
    pub pairs: Vec<AlignPair>,
}

pub const TRAIN_ALIGN_NEGATIVES: usize = 3;
pub const EVAL_ALIGN_NEGATIVES: usize = 1;

/// Pairs every item of `corpus` with a twin listing of its clean version in
/// `clean` (same triples and class, shuffled title, jittered object features)
/// and adds negatives that replace one side with another item of the split.
pub fn build_alignment_data(
    corpus: &Corpus,
    clean: &Corpus,
    split: &SplitAssignment,
    seed: u64,
) -> Result<AlignmentData> {
    if corpus.items.len() != clean.items.len() {
        return Err(Error::InvalidInput("clean and corrupted corpora differ in size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.1).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = corpus.clone();
    let next_id = corpus.items.iter().map(|it| it.id.0).max().map_or(0, |m| m + 1);
    let mut twin = Vec::with_capacity(corpus.items.len());
    for (k, it) in clean.items.iter().enumerate() {
        let id = ItemId(next_id + k as u32);
        let mut title = it.title.clone();
        title.shuffle(&mut rng);
        let mut objects = it.objects.clone();
        for f in &mut objects.features {
            for v in f.iter_mut() {
                *v += jitter.sample(&mut rng) as f32;
            }
        }
        out.items.push(Item {
            id,
            title,
            objects,
            triples: it.triples.iter().map(|t| crate::data_model::Triple { head: id, ..*t }).collect(),
            latent_class: it.latent_class,
        });
        twin.push(id);
    }
    let mut pairs = Vec::new();
    for s in [Split::Train, Split::Dev, Split::Test] {
        let anchors: Vec<usize> = corpus
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| split.get(it.id) == Some(s))
            .map(|(k, _)| k)
            .collect();
        let n_neg = if s == Split::Train { TRAIN_ALIGN_NEGATIVES } else { EVAL_ALIGN_NEGATIVES };
        for (a_pos, &a) in anchors.iter().enumerate() {
            let left = corpus.items[a].id;
            pairs.push(AlignPair {
                left,
                right: twin[a],
                label: 1,
                split: s,
            });
            if anchors.len() < 2 {
                continue;
            }
            for _ in 0..n_neg {
                let r = rng.random_range(0..anchors.len() - 1);
                let o = anchors[if r >= a_pos { r + 1 } else { r }];
                let pair = if rng.random_bool(0.5) {
                    (left, twin[o])
                } else {
                    (corpus.items[o].id, twin[a])
                };
                pairs.push(AlignPair {
                    left: pair.0,
                    right: pair.1,
                    label: 0,
                    split: s,
                });
            }
        }
    }
    Ok(AlignmentData { corpus: out, pairs })
}

/// Positive pairs split 7:1:2 for corpora used without a corruption split.
pub fn split_positions(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, dev, _) = split_counts(n);
    let mut out = vec![Split::Train; n];
    for (rank, k) in idx.into_iter().enumerate() {
        out[k] = if rank < train {
            Split::Train
        } else if rank < train + dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    /// The item with the asked triple removed.
    pub item: Item,
    pub question: Vec<usize>,
    pub relation: usize,
    /// Entity id of the removed triple's tail; candidates are all entities.
    pub answer: usize,
    pub split: Split,
}

pub fn question_tokens(corpus: &Corpus, relation: usize) -> Result<Vec<usize>> {
    let rel = corpus
        .relation_vocab
        .word(relation)
        .ok_or_else(|| Error::InvalidInput(format!("unknown relation {relation}")))?;
    let [what, is, the, of, this, item, q] = QUESTION_WORDS;
    Ok(corpus.tokenize(&format!("{what} {is} {the} {rel} {of} {this} {item} {q}")))
}

/// Removes one random triple per item and asks for its tail.
pub fn build_qa_data(corpus: &Corpus, split: &SplitAssignment, seed: u64) -> Result<Vec<QaExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for it in &corpus.items {
        if it.triples.is_empty() {
            continue;
        }
        let k = rng.random_range(0..it.triples.len());
        let mut item = it.clone();
        let removed = item.triples.remove(k);
        out.push(QaExample {
            question: question_tokens(corpus, removed.relation)?,
            relation: removed.relation,
            answer: removed.tail,
            split: split
                .get(it.id)
                .ok_or_else(|| Error::InvalidInput(format!("{} missing from the split", it.id)))?,
            item,
        });
    }
    Ok(out)
}

/// `title [SEP] question`, cutting the title so the whole fits in `max_len`.
pub fn qa_text(title: &[usize], question: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if question.len() + 1 > max_len {
        return Err(Error::Config(format!(
            "question of {} tokens does not fit m_text = {max_len}",
            question.len()
        )));
    }
    let keep = (max_len - 1 - question.len()).min(title.len());
    let mut out = title[..keep].to_vec();
    out.push(SEP_ID);
    out.extend_from_slice(question);
    Ok(out)
}

/// Distinct relations in a corpus, for summaries.
pub fn relations_used(corpus: &Corpus) -> BTreeSet<usize> {
    corpus.items.iter().flat_map(|it| it.triples.iter().map(|t| t.relation)).collect()
}
