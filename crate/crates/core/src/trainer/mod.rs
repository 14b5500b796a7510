//! Training loops: seeded batching, data-parallel forward/backward with a
//! fixed-order gradient reduction, Adam updates and the pretrain/finetune
//! pipeline.

mod finetune;
mod optim;
mod pretrain;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use finetune::{
    evaluate, example_logits, finetune, Example, FinetuneOutcome, MetricRecord, TaskData, TaskHeads,
};
pub use optim::{adam_step, clip_grad_norm, global_grad_norm, AdamConfig, OptimizerState, Schedule};
pub use pretrain::{
    batch_loss_graph, evaluate_pretrain_loss, pretrain, pretrain_from, prepare_item, LossRecord, PreparedItem,
    PretrainContext, PretrainHeads, PretrainOutcome,
};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "K3M_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of total steps spent warming up.
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub mask_ratio: f64,
    pub negatives: usize,
    pub margin: f64,
    /// Worker threads; `None` reads the environment, then the machine.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 8,
            lr: 1e-3,
            warmup_fraction: 0.1,
            grad_clip: 1.0,
            mask_ratio: crate::encoders::DEFAULT_MASK_RATIO,
            negatives: crate::tasks::DEFAULT_NEGATIVES,
            margin: crate::tasks::DEFAULT_MARGIN,
            threads: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale optimizer settings (batch 256, lr 1e-4 pretraining).
    pub fn full_scale_pretrain() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1]");
        }
        if self.negatives == 0 {
            return bad("negatives must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.threads.unwrap_or_else(worker_count_from_env)
    }

    pub fn steps(&self, n_examples: usize) -> u64 {
        (self.epochs * n_examples.div_ceil(self.batch_size)) as u64
    }
}

pub fn worker_count_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over at most `threads` scoped workers.
pub fn par_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut chunks: Vec<Vec<T>> = Vec::new();
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        chunks.push(it.by_ref().take(chunk).collect());
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|c| s.spawn(move || c.into_iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Mixes seed components into one well-spread seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
