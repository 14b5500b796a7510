use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, par_map, write_jsonl, TrainConfig};
use super::optim::{adam_step, clip_grad_norm, AdamConfig, OptimizerState, Schedule};
use crate::data_model::Corpus;
use crate::encoders::{encode_entity, mask_objects, mask_tokens};
use crate::error::{Error, Result};
use crate::interaction::Mode;
use crate::model::{ItemInput, K3m};
use crate::nn::{Grads, Graph, ParamStore, Tensor, Var};
use crate::tasks::{lpm_loss, masked_prediction_loss, sample_negatives, transe_score, Head, Negative, PretrainBatchLoss};

/// Masked-token and masked-object prediction heads.
#[derive(Debug, Clone)]
pub struct PretrainHeads {
    pub mlm: Head,
    pub mom: Head,
}

impl PretrainHeads {
    pub fn new(model: &K3m) -> Self {
        let e = &model.cfg.encoder;
        Self {
            mlm: Head::new("mlm", e.hidden_text, model.dims.vocab_size),
            mom: Head::new("mom", e.hidden_image, model.dims.n_object_classes),
        }
    }

    pub fn present(&self, store: &ParamStore) -> bool {
        store.contains(self.mlm.linear.weight_name()) && store.contains(self.mom.linear.weight_name())
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl rand::Rng) -> Result<()> {
        self.mlm.init(store, std, rng)?;
        self.mom.init(store, std, rng)
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        self.mlm.init_zero(store)?;
        self.mom.init_zero(store)
    }
}

/// Everything a pretraining forward needs besides the parameters.
pub struct PretrainContext<'a> {
    pub model: &'a K3m,
    pub heads: PretrainHeads,
    pub corpus: &'a Corpus,
    pub cfg: &'a TrainConfig,
    entity_tokens: Vec<Vec<usize>>,
}

impl<'a> PretrainContext<'a> {
    pub fn new(model: &'a K3m, corpus: &'a Corpus, cfg: &'a TrainConfig) -> Self {
        let entity_tokens = corpus.entity_vocab.words().iter().map(|w| corpus.tokenize(w)).collect();
        Self {
            model,
            heads: PretrainHeads::new(model),
            corpus,
            cfg,
            entity_tokens,
        }
    }
}

/// Inputs of one item with its masks and negatives fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedItem {
    pub input: ItemInput,
    pub mlm_positions: Vec<usize>,
    pub mlm_labels: Vec<usize>,
    pub mom_positions: Vec<usize>,
    pub mom_labels: Vec<usize>,
    /// Tail entity of each triple that made it into the knowledge text.
    pub tails: Vec<usize>,
    pub negatives: Vec<Vec<Negative>>,
    pub fusion_seed: u64,
}

pub fn prepare_item(
    ctx: &PretrainContext,
    item_index: usize,
    batch_pos: usize,
    batch_len: usize,
    seed: u64,
) -> Result<PreparedItem> {
    let item = &ctx.corpus.items[item_index];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = ctx.model.input(item, ctx.corpus);
    let mt = mask_tokens(&input.title, ctx.cfg.mask_ratio, ctx.model.dims.vocab_size, &mut rng);
    let mo = mask_objects(&input.objects, ctx.cfg.mask_ratio, &mut rng);
    input.title = mt.input_ids;
    input.objects = mo.objects;
    if !ctx.model.cfg.with_knowledge {
        input.knowledge = Default::default();
    }
    let tails: Vec<usize> = item.triples[..input.knowledge.spans.len()].iter().map(|t| t.tail).collect();
    let n_entities = ctx.corpus.entity_vocab.len();
    let negatives = tails
        .iter()
        .map(|&t| sample_negatives(t, n_entities, batch_pos, batch_len, ctx.cfg.negatives, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedItem {
        input,
        mlm_positions: mt.mask_positions,
        mlm_labels: mt.labels,
        mom_positions: mo.mask_positions,
        mom_labels: mo.labels,
        tails,
        negatives,
        fusion_seed: derive_seed(&[seed, 1]),
    })
}

/// Graph nodes of one item's pretraining forward.
struct ItemVars {
    mlm: Var,
    mom: Var,
    c_star: Var,
    p: Vec<Var>,
    v: Vec<Var>,
    /// Encoded replacement tail per negative; `None` for head replacements.
    tails: Vec<Vec<Option<Var>>>,
}

fn item_vars(g: &mut Graph, ctx: &PretrainContext, prep: &PreparedItem, mode: Mode) -> Result<ItemVars> {
    let mut rng = ChaCha8Rng::seed_from_u64(prep.fusion_seed);
    let f = ctx.model.forward(g, &prep.input, mode, &mut rng)?;
    let mlm = masked_prediction_loss(g, &ctx.heads.mlm, f.text.states, &prep.mlm_positions, &prep.mlm_labels)?;
    let mom = masked_prediction_loss(g, &ctx.heads.mom, f.image.states, &prep.mom_positions, &prep.mom_labels)?;
    let mut cache: HashMap<usize, Var> = HashMap::new();
    let mut tails = Vec::with_capacity(prep.negatives.len());
    for negs in &prep.negatives {
        let mut row = Vec::with_capacity(negs.len());
        for n in negs {
            row.push(match *n {
                Negative::Tail(e) => Some(match cache.get(&e) {
                    Some(&v) => v,
                    None => {
                        let v = encode_entity(g, &ctx.model.text, &ctx.entity_tokens[e])?;
                        cache.insert(e, v);
                        v
                    }
                }),
                Negative::Head(_) => None,
            });
        }
        tails.push(row);
    }
    Ok(ItemVars {
        mlm,
        mom,
        c_star: f.c_star,
        p: f.surface.relations,
        v: f.surface.tails,
        tails,
    })
}

struct LpmView<'a> {
    c_star: Var,
    p: &'a [Var],
    v: &'a [Var],
    negatives: &'a [Vec<Negative>],
    tails: &'a [Vec<Option<Var>>],
}

/// Mean over batch items of each item's margin loss.
fn batch_lpm(g: &mut Graph, views: &[LpmView], margin: f64) -> Result<Var> {
    let mut per_item = Vec::with_capacity(views.len());
    for view in views {
        let mut pos = Vec::with_capacity(view.p.len());
        let mut neg = Vec::with_capacity(view.p.len());
        for x in 0..view.p.len() {
            pos.push(transe_score(g, view.c_star, view.p[x], view.v[x])?);
            let mut row = Vec::new();
            for (k, n) in view.negatives[x].iter().enumerate() {
                row.push(match *n {
                    Negative::Tail(_) => {
                        let vt = view.tails[x][k].ok_or_else(|| Error::InvalidInput("missing tail encoding".into()))?;
                        transe_score(g, view.c_star, view.p[x], vt)?
                    }
                    Negative::Head(j) => {
                        let other = views
                            .get(j)
                            .ok_or_else(|| Error::InvalidInput(format!("head negative {j} outside batch")))?;
                        transe_score(g, other.c_star, view.p[x], view.v[x])?
                    }
                });
            }
            neg.push(row);
        }
        per_item.push(lpm_loss(g, &pos, &neg, margin)?);
    }
    let all = g.concat_cols(&per_item)?;
    let s = g.sum(all);
    Ok(g.scale(s, 1.0 / views.len() as f64))
}

/// MLM, MOM and LPM of a batch built in one graph. Returns the total and the
/// three terms.
pub fn batch_loss_graph(
    g: &mut Graph,
    ctx: &PretrainContext,
    batch: &[PreparedItem],
    mode: Mode,
) -> Result<(Var, [Var; 3])> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let vars = batch
        .iter()
        .map(|p| item_vars(g, ctx, p, mode))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<LpmView> = vars
        .iter()
        .zip(batch)
        .map(|(v, p)| LpmView {
            c_star: v.c_star,
            p: &v.p,
            v: &v.v,
            negatives: &p.negatives,
            tails: &v.tails,
        })
        .collect();
    let lpm = batch_lpm(g, &views, ctx.cfg.margin)?;
    let b = 1.0 / batch.len() as f64;
    let mlm_parts: Vec<Var> = vars.iter().map(|v| v.mlm).collect();
    let mom_parts: Vec<Var> = vars.iter().map(|v| v.mom).collect();
    let mlm = g.concat_cols(&mlm_parts)?;
    let mlm = g.sum(mlm);
    let mlm = g.scale(mlm, b);
    let mom = g.concat_cols(&mom_parts)?;
    let mom = g.sum(mom);
    let mom = g.scale(mom, b);
    let t = g.add(mlm, mom)?;
    let total = g.add(t, lpm)?;
    Ok((total, [mlm, mom, lpm]))
}

fn mean_in_order(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.fold(0.0, |a, v| a + v) / n as f64
}

/// Forward and backward of one batch with per-item graphs. Items are coupled
/// only through the margin loss, which is evaluated on detached copies of
/// their outputs; its gradients are then pushed back into each item's graph.
fn batch_step(ctx: &PretrainContext, store: &ParamStore, batch: Vec<PreparedItem>, threads: usize) -> Result<(PretrainBatchLoss, Grads)> {
    let n = batch.len();
    let phase1: Vec<Result<(Graph, ItemVars, PreparedItem)>> = par_map(batch, threads, |prep| {
        let mut g = Graph::new(store);
        let vars = item_vars(&mut g, ctx, &prep, Mode::Train)?;
        Ok((g, vars, prep))
    });
    let phase1 = phase1.into_iter().collect::<Result<Vec<_>>>()?;

    // Detached copies: (original var, leaf var) per item.
    let mut cg = Graph::new(store);
    let mut links: Vec<Vec<(Var, Var)>> = Vec::with_capacity(n);
    let mut leaf_vars: Vec<ItemVars> = Vec::with_capacity(n);
    for (g, v, _) in &phase1 {
        let mut link = Vec::new();
        let mut copy = |orig: Var, cg: &mut Graph| {
            let leaf = cg.input(g.value(orig).clone());
            link.push((orig, leaf));
            leaf
        };
        let c_star = copy(v.c_star, &mut cg);
        let p = v.p.iter().map(|&x| copy(x, &mut cg)).collect();
        let vv = v.v.iter().map(|&x| copy(x, &mut cg)).collect();
        let tails = v
            .tails
            .iter()
            .map(|row| row.iter().map(|t| t.map(|x| copy(x, &mut cg))).collect())
            .collect();
        leaf_vars.push(ItemVars {
            mlm: v.mlm,
            mom: v.mom,
            c_star,
            p,
            v: vv,
            tails,
        });
        links.push(link);
    }
    let views: Vec<LpmView> = leaf_vars
        .iter()
        .zip(&phase1)
        .map(|(v, (_, _, prep))| LpmView {
            c_star: v.c_star,
            p: &v.p,
            v: &v.v,
            negatives: &prep.negatives,
            tails: &v.tails,
        })
        .collect();
    let lpm = batch_lpm(&mut cg, &views, ctx.cfg.margin)?;
    let l_lpm = cg.value(lpm).item();
    let coupling = cg.backward(lpm)?;

    let l_mlm = mean_in_order(phase1.iter().map(|(g, v, _)| g.value(v.mlm).item()), n);
    let l_mom = mean_in_order(phase1.iter().map(|(g, v, _)| g.value(v.mom).item()), n);
    let loss = PretrainBatchLoss::new(l_mlm, l_mom, l_lpm);

    let w = 1.0 / n as f64;
    let jobs: Vec<_> = phase1
        .into_iter()
        .zip(links)
        .map(|((g, v, _), link)| {
            let mut seeds = vec![(v.mlm, Tensor::scalar(w)), (v.mom, Tensor::scalar(w))];
            for (orig, leaf) in link {
                if let Some(gr) = coupling.grad(leaf) {
                    seeds.push((orig, gr.clone()));
                }
            }
            (g, seeds)
        })
        .collect();
    let grads: Vec<Result<Grads>> = par_map(jobs, threads, |(g, seeds)| Ok(g.backward_seeded(&seeds)?.params));
    let mut total = Grads::new(store.len());
    for gr in grads {
        total.merge(&gr?);
    }
    Ok((loss, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_mlm: f64,
    pub l_mom: f64,
    pub l_lpm: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub params: ParamStore,
    pub history: Vec<LossRecord>,
}

impl PretrainOutcome {
    pub fn write_history(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.history)
    }
}

/// Initializes a fresh model and pretrains it.
pub fn pretrain(model: &K3m, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<PretrainOutcome> {
    let params = model.init_params(seed)?;
    pretrain_from(model, params, corpus, cfg, seed)
}

/// Pretrains starting from `params`, adding the prediction heads if absent.
pub fn pretrain_from(
    model: &K3m,
    mut params: ParamStore,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    corpus.validate()?;
    if corpus.items.is_empty() {
        return Err(Error::InvalidInput("cannot pretrain on an empty corpus".into()));
    }
    let ctx = PretrainContext::new(model, corpus, cfg);
    if !ctx.heads.present(&params) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x4ead]));
        ctx.heads.init(&mut params, model.cfg.encoder.init_std, &mut rng)?;
    }
    let total_steps = cfg.steps(corpus.items.len());
    let schedule = Schedule::with_warmup_fraction(cfg.lr, cfg.warmup_fraction, total_steps)?;
    let mut state = OptimizerState::new(&params, AdamConfig::default());
    let threads = cfg.worker_count();
    let mut history = Vec::with_capacity(total_steps as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64])));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(pos, &idx)| prepare_item(&ctx, idx, pos, chunk.len(), derive_seed(&[seed, step, pos as u64])))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_step(&ctx, &params, batch, threads)?;
            if let Some(term) = loss.first_non_finite() {
                return Err(Error::NonFinite {
                    term: term.into(),
                    step: step as usize,
                });
            }
            params.zero_grad();
            params.accumulate(&grads)?;
            clip_grad_norm(&mut params, cfg.grad_clip);
            let lr = schedule.lr(step);
            adam_step(&mut params, &mut state, lr)?;
            history.push(LossRecord {
                step,
                l_mlm: loss.l_mlm,
                l_mom: loss.l_mom,
                l_lpm: loss.l_lpm,
                l_total: loss.l_total,
                lr,
            });
        }
    }
    Ok(PretrainOutcome { params, history })
}

/// Loss over `items` under a fixed plan of masks and negatives (determined by
/// `seed`, not by training progress), in evaluation mode. Items are grouped
/// in order into batches of the configured size; terms are item-weighted.
pub fn evaluate_pretrain_loss(
    ctx: &PretrainContext,
    params: &ParamStore,
    items: &[usize],
    seed: u64,
) -> Result<PretrainBatchLoss> {
    if items.is_empty() {
        return Err(Error::InvalidInput("no items to evaluate".into()));
    }
    let chunks: Vec<(usize, &[usize])> = items.chunks(ctx.cfg.batch_size).enumerate().collect();
    let parts = par_map(chunks, ctx.cfg.worker_count(), |(c, chunk)| -> Result<(usize, [f64; 3])> {
        let batch = chunk
            .iter()
            .enumerate()
            .map(|(pos, &idx)| prepare_item(ctx, idx, pos, chunk.len(), derive_seed(&[seed, c as u64, pos as u64])))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(params);
        let (_, terms) = batch_loss_graph(&mut g, ctx, &batch, Mode::Eval)?;
        Ok((chunk.len(), terms.map(|t| g.value(t).item())))
    });
    let mut sums = [0.0; 3];
    for part in parts {
        let (n, t) = part?;
        for k in 0..3 {
            sums[k] += t[k] * n as f64;
        }
    }
    let n = items.len() as f64;
    Ok(PretrainBatchLoss::new(sums[0] / n, sums[1] / n, sums[2] / n))
}
