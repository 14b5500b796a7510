//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use k3m::corruption::{
    apply_corruption, balanced_split, Action, ActionKind, CorruptionKind, CorruptionManifest, CorruptionSetting, Split,
};
use k3m::data_model::{generate_synthetic_corpus, Corpus, GenConfig, ItemId, MASK_ID, SPECIAL_TOKENS};
use k3m::encoders::{mask_tokens, SurfaceFeatures, TokenAction};
use k3m::interaction::{iffm_fuse, FusionAlgorithm, FusionGate, Mode, StructureAggregator};
use k3m::model::{K3m, ModelConfig, ModelDims};
use k3m::nn::{
    grad_check, multi_head_attention, CoAttentionLayer, EncoderConfig, GradCheckConfig, Graph, LayerNorm, ParamStore,
    Precision, Tensor, TransformerLayer, Var,
};
use k3m::tasks::{build_qa_data, lpm_loss, lpm_loss_values, rank_at_k, transe_score, Negative};
use k3m::trainer::{
    batch_loss_graph, evaluate, example_logits, finetune, prepare_item, pretrain, PreparedItem, PretrainContext,
    TaskData, TaskHeads, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `±[0.1, 1]`, keeping clear of kinks at zero.
fn away_from_zero(r: &mut impl Rng) -> f64 {
    let m = r.random_range(0.1..1.0);
    if r.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| away_from_zero(r)).collect()).unwrap()
}

fn random_row(r: &mut impl Rng, n: usize) -> Tensor {
    Tensor::row((0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Scalar `sum(x * w)` with a fixed pseudo-random `w` of `x`'s shape.
fn weigh(g: &mut Graph, x: Var) -> k3m::Result<Var> {
    let (m, n) = g.value(x).dims2();
    let w = g.input(random_tensor(&mut rng(99), m, n));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

// ---------------------------------------------------------------- criterion 1

const GRAD_TOL: f64 = 1e-3;

fn gc_config() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-4,
        samples: 128,
        precision: Precision::F64,
        seed: 5,
    }
}

struct OpCase {
    name: &'static str,
    shapes: Vec<[usize; 2]>,
    forward: Box<dyn Fn(&mut Graph, &[Var]) -> k3m::Result<Var>>,
}

fn op(
    name: &'static str,
    shapes: &[[usize; 2]],
    forward: impl Fn(&mut Graph, &[Var]) -> k3m::Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.to_vec(),
        forward: Box::new(forward),
    }
}

fn op_cases() -> Vec<OpCase> {
    let m34 = [3, 4];
    vec![
        op("matmul", &[m34, [4, 2]], |g, v| g.matmul(v[0], v[1])),
        op("matmul_bt", &[m34, [2, 4]], |g, v| g.matmul_bt(v[0], v[1])),
        op("add_row", &[m34, [1, 4]], |g, v| g.add_row(v[0], v[1])),
        op("mul_row", &[m34, [1, 4]], |g, v| g.mul_row(v[0], v[1])),
        op("linear", &[m34, [4, 3], [1, 3]], |g, v| g.linear(v[0], v[1], v[2])),
        op("add", &[m34, m34], |g, v| g.add(v[0], v[1])),
        op("sub", &[m34, m34], |g, v| g.sub(v[0], v[1])),
        op("mul", &[m34, m34], |g, v| g.mul(v[0], v[1])),
        op("scale", &[m34], |g, v| Ok(g.scale(v[0], -1.7))),
        op("gelu", &[m34], |g, v| Ok(g.gelu(v[0]))),
        op("leaky_relu", &[m34], |g, v| Ok(g.leaky_relu(v[0], 0.2))),
        op("elu", &[m34], |g, v| Ok(g.elu(v[0]))),
        op("sigmoid", &[m34], |g, v| Ok(g.sigmoid(v[0]))),
        op("abs", &[m34], |g, v| Ok(g.abs(v[0]))),
        op("relu", &[m34], |g, v| Ok(g.relu(v[0]))),
        op("layer_norm", &[[3, 5], [1, 5], [1, 5]], |g, v| g.layer_norm(v[0], v[1], v[2])),
        op("softmax", &[[3, 5]], |g, v| g.softmax(v[0], None)),
        op("softmax_masked", &[[3, 5]], |g, v| {
            g.softmax(v[0], Some(&[true, false, true, true, false]))
        }),
        op("gather", &[[6, 3]], |g, v| g.gather(v[0], &[0, 2, 2, 5])),
        op("select_rows", &[[4, 3]], |g, v| g.select_rows(v[0], &[3, 0, 3])),
        op("mean_rows", &[[4, 3]], |g, v| g.mean_rows(v[0], &[1, 3])),
        op("concat_cols", &[[3, 2], m34], |g, v| g.concat_cols(&[v[0], v[1]])),
        op("concat_rows", &[[2, 3], [1, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        op("slice_cols", &[[3, 5]], |g, v| g.slice_cols(v[0], 1, 4)),
        op("sum", &[m34], |g, v| {
            let s = g.sum(v[0]);
            let s2 = g.mul(s, s)?;
            Ok(s2)
        }),
        op("mean", &[m34], |g, v| {
            let s = g.mean(v[0]);
            Ok(g.sigmoid(s))
        }),
        op("cross_entropy", &[m34], |g, v| g.cross_entropy(v[0], &[0, 3, 1])),
        op("hard_select", &[m34, m34], |g, v| {
            let gate = g.input(Tensor::full(&[3, 4], 0.5));
            let take: Vec<bool> = (0..12).map(|k| k % 3 != 1).collect();
            g.hard_select(gate, v[0], v[1], &take)
        }),
        op("multi_head_attention", &[[3, 4], [5, 4], [5, 4]], |g, v| {
            Ok(multi_head_attention(g, v[0], v[1], v[2], 2, Some(&[true, true, false, true, false]))?.context)
        }),
        op("transe_score", &[[1, 4], [1, 4], [1, 4]], |g, v| transe_score(g, v[0], v[1], v[2])),
        op("lpm_loss", &[[1, 4], [1, 4], [1, 4], [1, 4], [1, 4]], |g, v| {
            let pos = [transe_score(g, v[0], v[1], v[2])?, transe_score(g, v[0], v[3], v[2])?];
            let n1 = transe_score(g, v[4], v[1], v[2])?;
            let n2 = transe_score(g, v[0], v[1], v[4])?;
            let n3 = transe_score(g, v[0], v[3], v[4])?;
            lpm_loss(g, &pos, &[vec![n1, n2], vec![n3]], 3.0)
        }),
    ]
}

fn check_op(case: &OpCase, seed: u64) -> k3m::Result<f64> {
    let mut store = ParamStore::with_precision(Precision::F64);
    let mut r = rng(seed);
    let names: Vec<String> = (0..case.shapes.len()).map(|i| format!("x{i}")).collect();
    for (name, s) in names.iter().zip(&case.shapes) {
        store.add(name, random_tensor(&mut r, s[0], s[1]))?;
    }
    let report = grad_check(
        &store,
        |g: &mut Graph| {
            let vars = names.iter().map(|n| g.param(n)).collect::<k3m::Result<Vec<_>>>()?;
            let out = (case.forward)(g, &vars)?;
            weigh(g, out)
        },
        &gc_config(),
    )?;
    Ok(report.max_relative_error)
}

/// Grad check of a module whose parameters come from `init`; `input_shapes`
/// become extra parameters `in{i}`.
fn check_module(
    init: impl Fn(&mut ParamStore, &mut ChaCha8Rng) -> k3m::Result<()>,
    input_shapes: &[[usize; 2]],
    forward: impl Fn(&mut Graph, &[Var]) -> k3m::Result<Var>,
) -> k3m::Result<f64> {
    let mut store = ParamStore::with_precision(Precision::F64);
    let mut r = rng(17);
    init(&mut store, &mut r)?;
    let names: Vec<String> = (0..input_shapes.len()).map(|i| format!("in{i}")).collect();
    for (name, s) in names.iter().zip(input_shapes) {
        store.add(name, random_tensor(&mut r, s[0], s[1]))?;
    }
    let report = grad_check(
        &store,
        |g: &mut Graph| {
            let vars = names.iter().map(|n| g.param(n)).collect::<k3m::Result<Vec<_>>>()?;
            let out = forward(g, &vars)?;
            weigh(g, out)
        },
        &gc_config(),
    )?;
    Ok(report.max_relative_error)
}

fn composite_checks() -> k3m::Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let layer = TransformerLayer::new("tl", 4, 2, 2);
    out.push((
        "transformer_layer",
        check_module(
            |s, r| layer.init(s, 0.5, r),
            &[[3, 4]],
            |g, v| layer.forward(g, v[0], Some(&[true, true, false])),
        )?,
    ));
    let co = CoAttentionLayer::new("co", 4, 6, 4, 2, 2);
    out.push((
        "co_attention",
        check_module(
            |s, r| co.init(s, 0.5, r),
            &[[3, 4], [2, 6]],
            |g, v| {
                let o = co.forward(g, v[0], &[true, true, false], v[1], &[true, true])?;
                let a = weigh(g, o.text)?;
                let b = weigh(g, o.image)?;
                g.add(a, b)
            },
        )?,
    ));
    let ln = LayerNorm::new("ln", 5);
    out.push((
        "layer_norm_module",
        check_module(|s, _| ln.init(s), &[[2, 5]], |g, v| ln.forward(g, v[0]))?,
    ));
    let gate = FusionGate::new("gate", 4);
    out.push((
        "iffm_soft",
        check_module(
            |s, r| {
                for p in ["gate.w", "gate.u", "gate.b"] {
                    let t = Tensor::new(vec![4], (0..4).map(|_| away_from_zero(r)).collect())?;
                    s.add(p, t)?;
                }
                Ok(())
            },
            &[[3, 4], [3, 4]],
            |g, v| iffm_fuse(g, v[0], v[1], FusionAlgorithm::SoftSampling, &gate, Mode::Eval, &mut rng(0)),
        )?,
    ));
    let mut enc = common::micro_encoder();
    enc.hidden_text = 4;
    enc.hidden_image = 6;
    enc.agg_heads = 3;
    let agg = StructureAggregator::new(&enc);
    out.push((
        "structure_aggregation",
        check_module(
            |s, r| agg.init(s, 0.5, r),
            &[[1, 4], [1, 4], [1, 4], [1, 4], [1, 4], [1, 4], [1, 4]],
            |g, v| {
                let surface = SurfaceFeatures {
                    relations: vec![v[1], v[2], v[3]],
                    tails: vec![v[4], v[5], v[6]],
                };
                Ok(agg.aggregate(g, v[0], &surface)?.c_star)
            },
        )?,
    ));
    Ok(out)
}

/// Fixed prepared batch of the micro corpus with both kinds of negatives.
fn micro_batch(ctx: &PretrainContext) -> Vec<PreparedItem> {
    for seed in 0.. {
        let batch: Vec<PreparedItem> = (0..ctx.corpus.items.len())
            .map(|i| prepare_item(ctx, i, i, ctx.corpus.items.len(), seed).unwrap())
            .collect();
        let negs = batch.iter().flat_map(|p| p.negatives.iter().flatten());
        let (heads, tails): (Vec<&Negative>, Vec<&Negative>) = negs.partition(|n| matches!(n, Negative::Head(_)));
        let masked = batch.iter().all(|p| !p.mlm_positions.is_empty() && !p.mom_positions.is_empty());
        if !heads.is_empty() && !tails.is_empty() && masked {
            return batch;
        }
    }
    unreachable!()
}

fn criterion_1() -> Outcome {
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut n = 0;
    let mut record = |name: &str, e: f64| {
        n += 1;
        if e > worst.1 || worst.0.is_empty() {
            worst = (name.to_string(), e);
        }
    };
    for (k, case) in op_cases().iter().enumerate() {
        record(case.name, check_op(case, 100 + k as u64).map_err(|e| format!("{}: {e}", case.name))?);
    }
    for (name, e) in composite_checks().map_err(|e| e.to_string())? {
        record(name, e);
    }

    let corpus = common::micro_corpus();
    let model = common::micro_model(&corpus, true, FusionAlgorithm::Mean);
    let cfg = TrainConfig::default();
    let ctx = PretrainContext::new(&model, &corpus, &cfg);
    let mut store = model.init_params(3).map_err(|e| e.to_string())?;
    ctx.heads.init(&mut store, 0.3, &mut rng(4)).map_err(|e| e.to_string())?;
    let batch = micro_batch(&ctx);
    let terms = {
        let mut g = Graph::new(&store);
        let (_, t) = batch_loss_graph(&mut g, &ctx, &batch, Mode::Eval).map_err(|e| e.to_string())?;
        t.map(|v| g.value(v).item())
    };
    ensure(terms[2] > 0.0, || format!("margin term inactive in the micro batch: {terms:?}"))?;
    let cfg_gc = GradCheckConfig {
        samples: 256,
        ..gc_config()
    };
    let report = grad_check(
        &store,
        |g: &mut Graph| Ok(batch_loss_graph(g, &ctx, &batch, Mode::Eval)?.0),
        &cfg_gc,
    )
    .map_err(|e| e.to_string())?;
    record("composed_pretraining_loss", report.max_relative_error);
    ensure(report.probes.len() >= 100, || format!("only {} probes", report.probes.len()))?;

    ensure(worst.1 < GRAD_TOL, || format!("{} max relative error {:.3e}", worst.0, worst.1))?;
    let probe = report.worst().map(|p| p.param.clone()).unwrap_or_default();
    Ok(format!(
        "{n} checks, worst {} at {:.2e}; composed loss {:.2e} over {} probes (worst at {probe})",
        worst.0,
        worst.1,
        report.max_relative_error,
        report.probes.len()
    ))
}

// ---------------------------------------------------------- criteria 2 and 3

fn random_aggregation(
    r: &mut ChaCha8Rng,
    x: usize,
) -> (ParamStore, StructureAggregator, Tensor, Vec<Tensor>, Vec<Tensor>) {
    let h = r.random_range(2..=12);
    let enc = EncoderConfig {
        hidden_text: h,
        hidden_image: h,
        agg_heads: r.random_range(1..=4),
        ..common::micro_encoder()
    };
    let agg = StructureAggregator::new(&enc);
    let mut store = ParamStore::with_precision(Precision::F64);
    let std = r.random_range(0.05..2.0);
    agg.init(&mut store, std, r).unwrap();
    let c = random_row(r, h);
    let p = (0..x).map(|_| random_row(r, h)).collect();
    let v = (0..x).map(|_| random_row(r, h)).collect();
    (store, agg, c, p, v)
}

fn run_aggregation(
    store: &ParamStore,
    agg: &StructureAggregator,
    c: &Tensor,
    p: &[Tensor],
    v: &[Tensor],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::new(store);
    let cv = g.input(c.clone());
    let surface = SurfaceFeatures {
        relations: p.iter().map(|t| g.input(t.clone())).collect(),
        tails: v.iter().map(|t| g.input(t.clone())).collect(),
    };
    let out = agg.aggregate(&mut g, cv, &surface).unwrap();
    let att = out.attention.read(&g).attention;
    (g.value(out.c_star).data().to_vec(), att)
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let x = r.random_range(1..=16);
        let (store, agg, c, p, v) = random_aggregation(&mut r, x);
        let (_, att) = run_aggregation(&store, &agg, &c, &p, &v);
        ensure(att.len() == agg.n_heads(), || format!("case {case}: {} heads reported", att.len()))?;
        for head in &att {
            ensure(head.len() == x, || format!("case {case}: {} weights for {x} triples", head.len()))?;
            ensure(head.iter().all(|&a| a >= 0.0), || format!("case {case}: negative weight"))?;
            let dev = (head.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(dev);
            ensure(dev <= 1e-6, || format!("case {case}: weights sum off by {dev:.3e}"))?;
        }
    }
    Ok(format!("1000 cases, max |sum - 1| = {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let x = r.random_range(2..=16);
        let (store, agg, c, p, v) = random_aggregation(&mut r, x);
        let (base, _) = run_aggregation(&store, &agg, &c, &p, &v);
        let mut perm: Vec<usize> = (0..x).collect();
        perm.shuffle(&mut r);
        let pp: Vec<Tensor> = perm.iter().map(|&i| p[i].clone()).collect();
        let vp: Vec<Tensor> = perm.iter().map(|&i| v[i].clone()).collect();
        let (permuted, _) = run_aggregation(&store, &agg, &c, &pp, &vp);
        let d = base.iter().zip(&permuted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d < 1e-5, || format!("case {case}: c* moved by {d:.3e}"))?;
    }
    Ok(format!("200 cases, max |c*_perm - c*| = {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 4

fn expected_counts(kind: CorruptionKind, ratio: usize, n: usize) -> BTreeMap<ActionKind, usize> {
    use ActionKind as A;
    let share = |d: usize| n * ratio / (100 * d);
    let mut m = BTreeMap::new();
    match kind {
        CorruptionKind::Tmr => drop(m.insert(A::DropTitle, share(1))),
        CorruptionKind::Imr => drop(m.insert(A::DropImage, share(1))),
        CorruptionKind::Tnr => drop(m.insert(A::ReplaceTitle, share(1))),
        CorruptionKind::Inr => drop(m.insert(A::ReplaceImage, share(1))),
        CorruptionKind::Tinr => drop(m.insert(A::ReplaceBoth, share(1))),
        CorruptionKind::Mmr => {
            m.insert(A::DropTitle, share(2));
            m.insert(A::DropImage, share(2));
        }
        CorruptionKind::Mnr => {
            m.insert(A::ReplaceTitle, share(3));
            m.insert(A::ReplaceImage, share(3));
            m.insert(A::ReplaceBoth, share(3));
        }
    }
    let used: usize = m.values().sum();
    m.insert(A::None, n - used);
    m.retain(|_, v| *v > 0);
    m
}

fn audit_content(clean: &Corpus, dirty: &Corpus, manifest: &CorruptionManifest) -> Result<(), String> {
    let index = clean.index();
    for (orig, item) in clean.items.iter().zip(&dirty.items) {
        let id = orig.id;
        ensure(item.id == id && item.triples == orig.triples && item.latent_class == orig.latent_class, || {
            format!("{id}: identity, triples or class changed")
        })?;
        let action = manifest.action(id).ok_or_else(|| format!("{id} missing from manifest"))?;
        let src = |s: ItemId| -> Result<&k3m::data_model::Item, String> {
            ensure(s != id, || format!("{id} replaced from itself"))?;
            Ok(&clean.items[*index.get(&s).ok_or_else(|| format!("unknown source {s}"))?])
        };
        let (title, objects) = match action {
            Action::None => (orig.title.clone(), orig.objects.clone()),
            Action::DropTitle => (Vec::new(), orig.objects.clone()),
            Action::DropImage => (orig.title.clone(), Default::default()),
            Action::ReplaceTitle { source } => (src(source)?.title.clone(), orig.objects.clone()),
            Action::ReplaceImage { source } => (orig.title.clone(), src(source)?.objects.clone()),
            Action::ReplaceBoth {
                title_source,
                image_source,
            } => (src(title_source)?.title.clone(), src(image_source)?.objects.clone()),
        };
        ensure(item.title == title && item.objects == objects, || {
            format!("{id}: content does not match {action:?}")
        })?;
    }
    Ok(())
}

fn criterion_4() -> Outcome {
    let gen = GenConfig {
        n_items: 1000,
        n_classes: 10,
        ..GenConfig::default()
    };
    let clean = generate_synthetic_corpus(&gen, 11).map_err(|e| e.to_string())?;
    let by_class = clean.by_class();
    ensure(by_class.iter().all(|c| c.len() == 100), || "classes are not 100 items each".into())?;
    let mut audited = 0;
    for (k, kind) in CorruptionKind::ALL.into_iter().enumerate() {
        for ratio in [0u32, 20, 50, 80, 100] {
            let setting = CorruptionSetting::new(kind, ratio).unwrap();
            let tag = setting.to_string();
            let seed = 1000 + k as u64 * 7 + ratio as u64;
            let (dirty, manifest) = apply_corruption(&clean, setting, seed).map_err(|e| format!("{tag}: {e}"))?;
            ensure(manifest.entries.len() == clean.items.len(), || format!("{tag}: manifest size"))?;
            let mut ids: Vec<ItemId> = manifest.entries.iter().map(|e| e.item_id).collect();
            ids.sort();
            ids.dedup();
            ensure(ids.len() == clean.items.len(), || format!("{tag}: actions overlap"))?;
            let want = expected_counts(kind, ratio as usize, 100);
            for (class, members) in by_class.iter().enumerate() {
                let mut got: BTreeMap<ActionKind, usize> = BTreeMap::new();
                for &i in members {
                    *got.entry(manifest.action(clean.items[i].id).unwrap().kind()).or_default() += 1;
                }
                ensure(got == want, || format!("{tag} class {class}: {got:?} != {want:?}"))?;
            }
            audit_content(&clean, &dirty, &manifest).map_err(|e| format!("{tag}: {e}"))?;

            let split = balanced_split(&dirty, &manifest, seed + 1).map_err(|e| format!("{tag}: {e}"))?;
            ensure(split.entries.len() == clean.items.len(), || format!("{tag}: split size"))?;
            let mut cells: BTreeMap<(usize, ActionKind), [usize; 3]> = BTreeMap::new();
            for it in &dirty.items {
                let s = split.get(it.id).ok_or_else(|| format!("{tag}: {} unsplit", it.id))?;
                let cell = cells.entry((it.latent_class, manifest.action(it.id).unwrap().kind())).or_default();
                cell[match s {
                    Split::Train => 0,
                    Split::Dev => 1,
                    Split::Test => 2,
                }] += 1;
            }
            for ((class, kind), [train, dev, test]) in cells {
                let n = train + dev + test;
                let (d, t) = (n / 10, 2 * n / 10);
                ensure(dev == d && test == t && train == n - d - t, || {
                    format!("{tag} stratum ({class}, {kind:?}): {train}/{dev}/{test} for {n}")
                })?;
            }
            audited += 1;
        }
    }
    Ok(format!("{audited} settings audited on 10 x 100 items"))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let vocab = 40;
    for len in 1..=200usize {
        // round half up in integers; a non-empty sequence always gets one
        let want = ((15 * len + 50) / 100).max(1);
        for _ in 0..5 {
            let seq: Vec<usize> = (0..len).map(|_| r.random_range(SPECIAL_TOKENS.len()..vocab)).collect();
            let m = mask_tokens(&seq, 0.15, vocab, &mut r);
            ensure(m.mask_positions.len() == want, || {
                format!("len {len}: {} positions, expected {want}", m.mask_positions.len())
            })?;
        }
    }
    let mut counts = [0usize; 3];
    let mut total = 0;
    while total < 10_000 {
        let seq: Vec<usize> = (0..20).map(|_| r.random_range(SPECIAL_TOKENS.len()..vocab)).collect();
        let m = mask_tokens(&seq, 0.15, vocab, &mut r);
        for (k, (&p, a)) in m.mask_positions.iter().zip(&m.actions).enumerate() {
            ensure(m.labels[k] == seq[p], || "label differs from original token".into())?;
            let ok = match a {
                TokenAction::Mask => m.input_ids[p] == MASK_ID,
                TokenAction::Random => m.input_ids[p] >= SPECIAL_TOKENS.len() && m.input_ids[p] < vocab,
                TokenAction::Keep => m.input_ids[p] == seq[p],
            };
            ensure(ok, || format!("{a:?} at {p} produced {}", m.input_ids[p]))?;
            counts[*a as usize] += 1;
            total += 1;
        }
        for p in (0..20).filter(|p| !m.mask_positions.contains(p)) {
            ensure(m.input_ids[p] == seq[p], || "unselected position changed".into())?;
        }
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    for (fi, want) in f.iter().zip([0.8, 0.1, 0.1]) {
        ensure((fi - want).abs() <= 0.015, || format!("action split {f:?} over {total}"))?;
    }
    Ok(format!(
        "exact counts for len 1..=200; split {:.3}/{:.3}/{:.3} over {total} selections",
        f[0], f[1], f[2]
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let corpus = common::micro_corpus();
    let model = common::micro_model(&corpus, true, FusionAlgorithm::Mean);
    let cfg = TrainConfig::default();
    let ctx = PretrainContext::new(&model, &corpus, &cfg);
    let mut store = model.init_params(6).map_err(|e| e.to_string())?;
    ctx.heads.init_zero(&mut store).map_err(|e| e.to_string())?;
    let batch = micro_batch(&ctx);
    let mut g = Graph::new(&store);
    let (total, terms) = batch_loss_graph(&mut g, &ctx, &batch, Mode::Eval).map_err(|e| e.to_string())?;
    let [mlm, mom, lpm] = terms.map(|v| g.value(v).item());
    let ln_v = (corpus.token_vocab.len() as f64).ln();
    let ln_c = (corpus.object_class_vocab.len() as f64).ln();
    ensure((mlm - ln_v).abs() <= 1e-6, || format!("MLM {mlm} vs ln|V| {ln_v}"))?;
    ensure((mom - ln_c).abs() <= 1e-6, || format!("MOM {mom} vs ln|C| {ln_c}"))?;
    let l_total = g.value(total).item();
    ensure(l_total.to_bits() == (mlm + mom + lpm).to_bits(), || {
        format!("total {l_total} != {mlm} + {mom} + {lpm}")
    })?;

    // QA head over all entities
    let gen = GenConfig {
        n_items: 60,
        n_classes: 3,
        ..GenConfig::default()
    };
    let qc = generate_synthetic_corpus(&gen, 6).map_err(|e| e.to_string())?;
    let split = balanced_split(&qc, &CorruptionManifest::identity(&qc), 1).map_err(|e| e.to_string())?;
    let examples = build_qa_data(&qc, &split, 2).map_err(|e| e.to_string())?;
    let data = TaskData::Qa { corpus: qc, examples };
    let enc = EncoderConfig {
        m_text: 24,
        ..common::micro_encoder()
    };
    let qa_model = K3m::new(
        ModelConfig {
            encoder: enc,
            with_knowledge: true,
            iffm: FusionAlgorithm::Mean,
        },
        ModelDims::of(data.corpus()).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let head = TaskHeads::for_task(&qa_model, &data);
    let mut qs = qa_model.init_params(8).map_err(|e| e.to_string())?;
    head.init_zero(&mut qs).map_err(|e| e.to_string())?;
    let ln_a = (data.n_outputs() as f64).ln();
    let mut worst_qa: f64 = 0.0;
    for ex in data.examples(Split::Train).map_err(|e| e.to_string())?.iter().take(10) {
        let mut g = Graph::new(&qs);
        let logits = example_logits(&mut g, &qa_model, &head, &data, ex, Mode::Eval, 0).map_err(|e| e.to_string())?;
        let loss = g.cross_entropy(logits, &[ex.label()]).map_err(|e| e.to_string())?;
        worst_qa = worst_qa.max((g.value(loss).item() - ln_a).abs());
    }
    ensure(worst_qa <= 1e-6, || format!("QA loss off ln|A| by {worst_qa:.3e}"))?;

    // hinge examples
    let satisfied = lpm_loss_values(&[0.2], &[vec![1.5]], 1.0);
    let violated = lpm_loss_values(&[1.0], &[vec![0.5]], 1.0);
    ensure(satisfied == 0.0 && violated == 1.5, || format!("hinge examples gave {satisfied}, {violated}"))?;
    let store0 = ParamStore::with_precision(Precision::F64);
    for (s, n, want) in [(0.2, 1.5, 0.0), (1.0, 0.5, 1.5)] {
        let mut g = Graph::new(&store0);
        let sv = g.input(Tensor::scalar(s));
        let nv = g.input(Tensor::scalar(n));
        let l = lpm_loss(&mut g, &[sv], &[vec![nv]], 1.0).map_err(|e| e.to_string())?;
        ensure(g.value(l).item() == want, || format!("graph hinge ({s}, {n}) = {}", g.value(l).item()))?;
    }
    let mut r = rng(66);
    let pos: Vec<f64> = (0..2).map(|_| r.random_range(0.0..3.0)).collect();
    let neg: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| r.random_range(0.0..3.0)).collect()).collect();
    let mut oracle = 0.0;
    for x in 0..2 {
        let mut s = 0.0;
        for k in 0..3 {
            s += (pos[x] - neg[x][k] + 1.0).max(0.0);
        }
        oracle += s / 3.0;
    }
    oracle /= 2.0;
    let got = lpm_loss_values(&pos, &neg, 1.0);
    ensure((got - oracle).abs() <= 1e-12, || format!("double mean {got} vs {oracle}"))?;

    // every logged step adds up exactly
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        threads: Some(1),
        ..TrainConfig::default()
    };
    let out = pretrain(&model, &corpus, &tcfg, 1).map_err(|e| e.to_string())?;
    for rec in &out.history {
        ensure(rec.l_total.to_bits() == (rec.l_mlm + rec.l_mom + rec.l_lpm).to_bits(), || {
            format!("step {} total not the exact sum", rec.step)
        })?;
    }
    Ok(format!(
        "MLM {mlm:.9} (ln|V| {ln_v:.9}), MOM {mom:.9} (ln|C| {ln_c:.9}), QA within {worst_qa:.1e}; {} steps sum exactly",
        out.history.len()
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let n_candidates = 12;
    let scores: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..n_candidates).map(|_| r.random_range(0..5) as f64).collect())
        .collect();
    let truth: Vec<usize> = (0..100).map(|_| r.random_range(0..n_candidates)).collect();
    // candidate j outranks i when it scores higher, or ties from a lower index
    let beats = |s: &[f64], j: usize, i: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
    for k in [1, 3, 5, 10, 12] {
        let hits = scores
            .iter()
            .zip(&truth)
            .filter(|(s, &t)| (0..n_candidates).filter(|&j| beats(s, j, t)).count() < k)
            .count();
        let want = 100.0 * hits as f64 / 100.0;
        let got = rank_at_k(&scores, &truth, k).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("rank@{k}: {got} vs oracle {want}"))?;
    }
    Ok("rank@{1,3,5,10,12} match the pairwise oracle on 100 tied queries".into())
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut corpus = common::micro_corpus();
    corpus.items[2].objects = Default::default();
    corpus.items[1].title.clear();
    let model = common::micro_model(&corpus, true, FusionAlgorithm::Off);
    let store = model.init_params(8).map_err(|e| e.to_string())?;
    let w0 = store.get("structagg.w0").map_err(|e| e.to_string())?.clone();
    let (hi, ht) = w0.dims2();
    let mut worst: f64 = 0.0;
    for item in &corpus.items {
        let input = model.input(item, &corpus);
        let mut g = Graph::new(&store);
        let f = model
            .forward(&mut g, &input, Mode::Eval, &mut rng(0))
            .map_err(|e| e.to_string())?;
        let text = g.value(f.interactive.text);
        let image = g.value(f.interactive.image);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, &ok) in f.text_initial.mask.iter().enumerate() {
            if ok {
                rows.push(text.row_slice(i).to_vec());
            }
        }
        for (i, &ok) in f.image_initial.mask.iter().enumerate() {
            if ok {
                let v = image.row_slice(i);
                rows.push((0..ht).map(|j| (0..hi).map(|k| v[k] * w0.data()[k * ht + j]).sum()).collect());
            }
        }
        let mean: Vec<f64> = (0..ht).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
        let c = g.value(f.c).data();
        let d = c.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("{}: initialization differs by {d:.3e}", item.id))?;
    }

    let mut r = rng(88);
    let gate = FusionGate::new("g", 6);
    let mut gs = ParamStore::with_precision(Precision::F64);
    gate.init(&mut gs).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        let rows = r.random_range(1..6);
        let h = random_tensor(&mut r, rows, 6);
        let mut g = Graph::new(&gs);
        let a = g.input(h.clone());
        let b = g.input(h.clone());
        let out = iffm_fuse(&mut g, a, b, FusionAlgorithm::Mean, &gate, Mode::Train, &mut r).map_err(|e| e.to_string())?;
        ensure(g.value(out).data() == h.data(), || "mean fusion of equal inputs moved".into())?;
    }
    Ok(format!("off-fusion init within {worst:.2e}; mean fusion exact on 100 cases"))
}

// ---------------------------------------------------------------- criterion 9

fn robustness_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        hidden_text: 32,
        hidden_image: 32,
        n_heads_text: 2,
        n_heads_image: 2,
        ffn_multiplier: 2,
        agg_heads: 2,
        m_text: 12,
        m_obj: 6,
        m_know: 16,
        init_std: 0.02,
    }
}

/// Test accuracy at TMR 0% and 100% for one knowledge setting.
fn robustness_run(corpus: &Corpus, with_knowledge: bool, seed: u64) -> Result<[f64; 2], String> {
    let cfg = ModelConfig {
        encoder: robustness_encoder(),
        with_knowledge,
        iffm: FusionAlgorithm::Mean,
    };
    let model = K3m::new(cfg, ModelDims::of(corpus).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let pcfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let pre = pretrain(&model, corpus, &pcfg, seed).map_err(|e| e.to_string())?;
    let mut acc = [0.0; 2];
    for (slot, ratio) in [0u32, 100].into_iter().enumerate() {
        let s = CorruptionSetting::new(CorruptionKind::Tmr, ratio).unwrap();
        let (dirty, manifest) = apply_corruption(corpus, s, seed + 1).map_err(|e| e.to_string())?;
        let split = balanced_split(&dirty, &manifest, seed + 2).map_err(|e| e.to_string())?;
        let data = TaskData::ItemCls { corpus: dirty, split };
        let fcfg = TrainConfig {
            epochs: 4,
            ..pcfg.clone()
        };
        let out = finetune(&model, pre.params.clone(), &data, &fcfg, seed + 3, Some(s)).map_err(|e| e.to_string())?;
        acc[slot] = out.metric(Split::Test, "accuracy").ok_or("no test accuracy")?;
    }
    Ok(acc)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_9() -> Outcome {
    let mut on = Vec::new();
    let mut off = Vec::new();
    for seed in [1u64, 2, 3] {
        let gen = GenConfig {
            n_items: 2000,
            n_classes: 10,
            class_signal: 1.0,
            ..GenConfig::default()
        };
        let corpus = generate_synthetic_corpus(&gen, seed).map_err(|e| e.to_string())?;
        on.push(robustness_run(&corpus, true, 10 * seed)?);
        off.push(robustness_run(&corpus, false, 10 * seed)?);
    }
    let med = |v: &[[f64; 2]], i: usize| median(v.iter().map(|a| a[i]).collect());
    let (on0, on100, off0, off100) = (med(&on, 0), med(&on, 1), med(&off, 0), med(&off, 1));
    let summary = format!(
        "TMR=100%: knowledge {on100:.1} vs none {off100:.1}; drop from 0%: knowledge {:.1}, none {:.1}",
        on0 - on100,
        off0 - off100
    );
    ensure(on100 - off100 >= 10.0, || format!("gap below 10 points. {summary}"))?;
    ensure(off0 - off100 > on0 - on100, || format!("degradation not larger without knowledge. {summary}"))?;
    Ok(summary)
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = GenConfig {
        n_items: 80,
        n_classes: 4,
        ..GenConfig::default()
    };
    let corpus = generate_synthetic_corpus(&gen, 10).map_err(|e| e.to_string())?;
    let enc = EncoderConfig {
        n_layers: 1,
        ..common::micro_encoder()
    };
    let model = K3m::new(
        ModelConfig {
            encoder: enc,
            with_knowledge: true,
            iffm: FusionAlgorithm::HardSampling,
        },
        ModelDims::of(&corpus).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let setting = CorruptionSetting::new(CorruptionKind::Mnr, 50).unwrap();
    let (dirty, manifest) = apply_corruption(&corpus, setting, 3).map_err(|e| e.to_string())?;
    let split = balanced_split(&dirty, &manifest, 4).map_err(|e| e.to_string())?;
    let data = TaskData::ItemCls { corpus: dirty, split };

    let run = |threads: usize, tag: &str| -> Result<(Vec<u8>, k3m::trainer::FinetuneOutcome), String> {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            threads: Some(threads),
            ..TrainConfig::default()
        };
        let pre = pretrain(&model, &corpus, &cfg, 21).map_err(|e| e.to_string())?;
        let out = finetune(&model, pre.params, &data, &cfg, 22, Some(setting)).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{tag}.jsonl"));
        out.write_metrics(&path).map_err(|e| e.to_string())?;
        Ok((std::fs::read(&path).map_err(|e| e.to_string())?, out))
    };
    let (a, out) = run(1, "a")?;
    let (b, _) = run(1, "b")?;
    let (c, _) = run(3, "c")?;
    ensure(!a.is_empty(), || "empty metrics file".into())?;
    ensure(a == b, || "repeated runs wrote different metrics".into())?;
    ensure(a == c, || "thread count changed the metrics".into())?;

    let ckpt = dir.path().join("model.ckpt");
    out.params.save(&ckpt).map_err(|e| e.to_string())?;
    let loaded = ParamStore::load(&ckpt).map_err(|e| e.to_string())?;
    for split in [Split::Dev, Split::Test] {
        let before = evaluate(&model, &out.params, &data, split, 1).map_err(|e| e.to_string())?;
        let after = evaluate(&model, &loaded, &data, split, 1).map_err(|e| e.to_string())?;
        let same = before.len() == after.len()
            && before
                .iter()
                .zip(&after)
                .all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits());
        ensure(same, || format!("{} metrics changed after reload", split.as_str()))?;
    }
    let mut probe = Graph::new(&out.params);
    let head = TaskHeads::for_task(&model, &data);
    let ex = data.examples(Split::Test).map_err(|e| e.to_string())?[0];
    let l1 = example_logits(&mut probe, &model, &head, &data, &ex, Mode::Eval, 0).map_err(|e| e.to_string())?;
    let mut probe2 = Graph::new(&loaded);
    let l2 = example_logits(&mut probe2, &model, &head, &data, &ex, Mode::Eval, 0).map_err(|e| e.to_string())?;
    let bits = |g: &Graph, v: Var| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&probe, l1) == bits(&probe2, l2), || "logits changed after reload".into())?;
    Ok(format!("{} metric bytes identical across runs and thread counts; reload bitwise", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient fidelity", criterion_1),
        ("attention normalization", criterion_2),
        ("permutation invariance", criterion_3),
        ("corruption exactness", criterion_4),
        ("masking statistics", criterion_5),
        ("loss calibration", criterion_6),
        ("metric oracle", criterion_7),
        ("ablation equivalence", criterion_8),
        ("directional robustness", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let only: Option<usize> = std::env::var("K3M_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}) [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}) [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
