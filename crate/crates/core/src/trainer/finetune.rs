use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, clip_grad_norm, AdamConfig, OptimizerState, Schedule};
use super::{derive_seed, par_map, write_jsonl, TrainConfig};
use crate::corruption::{CorruptionSetting, Split, SplitAssignment};
use crate::data_model::{build_knowledge_text, Corpus};
use crate::error::{Error, Result};
use crate::interaction::Mode;
use crate::model::{ItemInput, K3m};
use crate::nn::{Grads, Graph, ParamStore, Tensor, Var};
use crate::tasks::{accuracy, f1_positive, qa_text, rank_at_k, AlignmentData, Head, QaExample, Task};

/// Finetuning data of one task. Item ids refer to `corpus`.
#[derive(Debug, Clone)]
pub enum TaskData {
    ItemCls { corpus: Corpus, split: SplitAssignment },
    Alignment(AlignmentData),
    Qa { corpus: Corpus, examples: Vec<QaExample> },
}

/// One labelled example; indices point into the task's corpus or QA list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example {
    Item { index: usize, label: usize },
    Pair { left: usize, right: usize, label: usize },
    Qa { index: usize, label: usize },
}

impl Example {
    pub fn label(&self) -> usize {
        match *self {
            Example::Item { label, .. } | Example::Pair { label, .. } | Example::Qa { label, .. } => label,
        }
    }
}

impl TaskData {
    pub fn task(&self) -> Task {
        match self {
            TaskData::ItemCls { .. } => Task::ItemCls,
            TaskData::Alignment(_) => Task::Alignment,
            TaskData::Qa { .. } => Task::Qa,
        }
    }

    pub fn corpus(&self) -> &Corpus {
        match self {
            TaskData::ItemCls { corpus, .. } | TaskData::Qa { corpus, .. } => corpus,
            TaskData::Alignment(a) => &a.corpus,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            TaskData::ItemCls { corpus, .. } => corpus.n_classes,
            TaskData::Alignment(_) => 2,
            TaskData::Qa { corpus, .. } => corpus.entity_vocab.len(),
        }
    }

    pub fn examples(&self, split: Split) -> Result<Vec<Example>> {
        match self {
            TaskData::ItemCls { corpus, split: s } => {
                let index = corpus.index();
                s.ids(split)
                    .into_iter()
                    .map(|id| {
                        let k = *index
                            .get(&id)
                            .ok_or_else(|| Error::InvalidInput(format!("split names unknown {id}")))?;
                        Ok(Example::Item {
                            index: k,
                            label: corpus.items[k].latent_class,
                        })
                    })
                    .collect()
            }
            TaskData::Alignment(a) => {
                let index = a.corpus.index();
                let pos = |id| {
                    index
                        .get(&id)
                        .copied()
                        .ok_or_else(|| Error::InvalidInput(format!("pair names unknown {id}")))
                };
                a.pairs
                    .iter()
                    .filter(|p| p.split == split)
                    .map(|p| {
                        Ok(Example::Pair {
                            left: pos(p.left)?,
                            right: pos(p.right)?,
                            label: p.label,
                        })
                    })
                    .collect()
            }
            TaskData::Qa { examples, .. } => Ok(examples
                .iter()
                .enumerate()
                .filter(|(_, q)| q.split == split)
                .map(|(k, q)| Example::Qa {
                    index: k,
                    label: q.answer,
                })
                .collect()),
        }
    }
}

/// The head of each finetuning task.
#[derive(Debug, Clone)]
pub struct TaskHeads;

impl TaskHeads {
    pub fn for_task(model: &K3m, data: &TaskData) -> Head {
        let h = model.hidden();
        match data.task() {
            Task::ItemCls => Head::new("cls", h, data.n_outputs()),
            Task::Alignment => Head::new("align", 2 * h, 2),
            Task::Qa => Head::new("qa", h, data.n_outputs()),
        }
    }
}

fn c_star_of(g: &mut Graph, model: &K3m, input: &ItemInput, mode: Mode, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(model.forward(g, input, mode, &mut rng)?.c_star)
}

/// `1 x n_outputs` logits of one example.
pub fn example_logits(
    g: &mut Graph,
    model: &K3m,
    head: &Head,
    data: &TaskData,
    ex: &Example,
    mode: Mode,
    seed: u64,
) -> Result<Var> {
    let corpus = data.corpus();
    let rep = match (*ex, data) {
        (Example::Item { index, .. }, _) => {
            let input = model.input(&corpus.items[index], corpus);
            c_star_of(g, model, &input, mode, seed)?
        }
        (Example::Pair { left, right, .. }, _) => {
            let a = model.input(&corpus.items[left], corpus);
            let b = model.input(&corpus.items[right], corpus);
            let ca = c_star_of(g, model, &a, mode, seed)?;
            let cb = c_star_of(g, model, &b, mode, derive_seed(&[seed, 1]))?;
            g.concat_cols(&[ca, cb])?
        }
        (Example::Qa { index, .. }, TaskData::Qa { examples, .. }) => {
            let q = &examples[index];
            let e = &model.cfg.encoder;
            let input = ItemInput {
                title: qa_text(&q.item.title, &q.question, e.m_text)?,
                objects: q.item.objects.truncated(e.m_obj),
                knowledge: build_knowledge_text(&q.item, corpus, e.m_know),
            };
            c_star_of(g, model, &input, mode, seed)?
        }
        (Example::Qa { .. }, _) => return Err(Error::InvalidInput("QA example outside QA data".into())),
    };
    head.forward(g, rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: Task,
    pub setting: Option<CorruptionSetting>,
    pub split: Split,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
    pub step: u64,
    pub variant: String,
}

/// Metrics of `data` on one split, in a fixed order.
pub fn evaluate(
    model: &K3m,
    params: &ParamStore,
    data: &TaskData,
    split: Split,
    threads: usize,
) -> Result<Vec<(String, f64)>> {
    let head = TaskHeads::for_task(model, data);
    let examples = data.examples(split)?;
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("no {} examples to evaluate", split.as_str())));
    }
    let scores: Vec<Result<Vec<f64>>> = par_map(examples.clone(), threads, |ex| {
        let mut g = Graph::new(params);
        let l = example_logits(&mut g, model, &head, data, &ex, Mode::Eval, 0)?;
        Ok(g.value(l).data().to_vec())
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = examples.iter().map(Example::label).collect();
    Ok(match data.task() {
        Task::ItemCls => vec![("accuracy".into(), accuracy(&scores, &labels)?)],
        Task::Alignment => vec![
            ("f1".into(), f1_positive(&scores, &labels)?),
            ("accuracy".into(), accuracy(&scores, &labels)?),
        ],
        Task::Qa => {
            let n = data.n_outputs();
            let mut out = Vec::new();
            for k in [1, 3, 10].into_iter().filter(|&k| k <= n) {
                out.push((format!("rank@{k}"), rank_at_k(&scores, &labels, k)?));
            }
            out
        }
    })
}

pub struct FinetuneOutcome {
    pub params: ParamStore,
    pub metrics: Vec<MetricRecord>,
}

impl FinetuneOutcome {
    pub fn write_metrics(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.metrics)
    }

    pub fn metric(&self, split: Split, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .rev()
            .find(|m| m.split == split && m.metric_name == name)
            .map(|m| m.value)
    }
}

/// Attaches the task head (if absent) and trains the whole model on the
/// train split, evaluating dev after every epoch and test at the end.
pub fn finetune(
    model: &K3m,
    mut params: ParamStore,
    data: &TaskData,
    cfg: &TrainConfig,
    seed: u64,
    setting: Option<CorruptionSetting>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let head = TaskHeads::for_task(model, data);
    if !params.contains(head.linear.weight_name()) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x4ead]));
        head.init(&mut params, model.cfg.encoder.init_std, &mut rng)?;
    }
    let train = data.examples(Split::Train)?;
    if train.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let threads = cfg.worker_count();
    let total_steps = cfg.steps(train.len());
    let schedule = Schedule::with_warmup_fraction(cfg.lr, cfg.warmup_fraction, total_steps)?;
    let mut state = OptimizerState::new(&params, AdamConfig::default());
    let mut metrics = Vec::new();
    let variant = model.cfg.variant();
    let mut record = |split: Split, step: u64, params: &ParamStore| -> Result<()> {
        if data.examples(split)?.is_empty() {
            return Ok(());
        }
        for (name, value) in evaluate(model, params, data, split, threads)? {
            metrics.push(MetricRecord {
                task: data.task(),
                setting,
                split,
                metric_name: name,
                value,
                seed,
                step,
                variant: variant.clone(),
            });
        }
        Ok(())
    };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, 0xf1])));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let w = 1.0 / chunk.len() as f64;
            let jobs: Vec<(usize, Example)> = chunk.iter().copied().enumerate().collect();
            let results: Vec<Result<(f64, Grads)>> = par_map(jobs, threads, |(pos, ex)| {
                let mut g = Graph::new(&params);
                let logits = example_logits(
                    &mut g,
                    model,
                    &head,
                    data,
                    &ex,
                    Mode::Train,
                    derive_seed(&[seed, step, pos as u64]),
                )?;
                let loss = g.cross_entropy(logits, &[ex.label()])?;
                let value = g.value(loss).item();
                Ok((value, g.backward_seeded(&[(loss, Tensor::scalar(w))])?.params))
            });
            let mut grads = Grads::new(params.len());
            let mut loss = 0.0;
            for r in results {
                let (l, gr) = r?;
                loss += l * w;
                grads.merge(&gr);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("{}_loss", data.task()),
                    step: step as usize,
                });
            }
            params.zero_grad();
            params.accumulate(&grads)?;
            clip_grad_norm(&mut params, cfg.grad_clip);
            adam_step(&mut params, &mut state, schedule.lr(step))?;
        }
        record(Split::Dev, step, &params)?;
    }
    record(Split::Test, step, &params)?;
    Ok(FinetuneOutcome { params, metrics })
}
