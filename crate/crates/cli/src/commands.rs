use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use k3m::corruption::{
    apply_corruption, balanced_split, CorruptionManifest, CorruptionSetting, Split, SplitAssignment,
};
use k3m::data_model::{write_corpus, Corpus};
use k3m::model::{K3m, ModelDims};
use k3m::nn::ParamStore;
use k3m::tasks::{build_alignment_data, build_qa_data, Task};
use k3m::trainer::{derive_seed, finetune, pretrain, MetricRecord, TaskData};

use crate::config::ExperimentConfig;
use crate::{plot, CliError, Command};

const PRETRAINED: &str = "pretrained.ckpt";
const FINETUNED: &str = "finetuned.ckpt";
const LOSS_HISTORY: &str = "loss_history.jsonl";
const METRICS: &str = "metrics.jsonl";

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, seed, out } => gen_data(&config, seed, &out),
        Command::Corrupt {
            corpus,
            kind,
            ratio,
            seed,
            out,
        } => corrupt(&corpus, CorruptionSetting::new(kind, ratio)?, seed, &out),
        Command::Pretrain { config, seed, out } => run_pretrain(&config, seed, out),
        Command::Finetune {
            config,
            seed,
            out,
            checkpoint,
            task,
            kind,
            ratio,
        } => {
            let setting = match (kind, ratio) {
                (Some(k), Some(r)) => Some(CorruptionSetting::new(k, r)?),
                _ => None,
            };
            run_finetune(&config, seed, out, checkpoint, task, setting)
        }
        Command::Eval {
            config,
            seed,
            out,
            checkpoint,
            task,
        } => run_eval(&config, seed, out, checkpoint, task),
        Command::Plot { metrics, out } => {
            for path in plot::plot(&metrics, &out)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Prints the effective configuration and keeps a copy next to the outputs.
fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let text = cfg.echo();
    println!("# effective config\n{text}");
    write_text(&dir.join("config.toml"), &text)
}

fn print_split_counts(corpus: &Corpus, split: &SplitAssignment) {
    println!("{:<8}{:>8}{:>10}", "split", "items", "triples");
    let index = corpus.index();
    for s in [Split::Train, Split::Dev, Split::Test] {
        let ids = split.ids(s);
        let triples: usize = ids.iter().map(|id| corpus.items[index[id]].triples.len()).sum();
        println!("{:<8}{:>8}{:>10}", s.as_str(), ids.len(), triples);
    }
    let stats = corpus.stats();
    println!("{:<8}{:>8}{:>10}", "total", stats.items, stats.triples);
}

fn gen_data(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?.with_seed(seed);
    let corpus = cfg.corpus(cfg.seed())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_corpus(&corpus, out)?;
    let split = balanced_split(&corpus, &CorruptionManifest::identity(&corpus), cfg.seed())?;
    print_split_counts(&corpus, &split);
    Ok(())
}

fn corrupt(corpus: &Path, setting: CorruptionSetting, seed: u64, out: &Path) -> Result<(), CliError> {
    let clean = k3m::data_model::read_corpus(corpus)?;
    let (dirty, manifest, split) = corrupt_and_split(&clean, Some(setting), seed)?;
    create_dir(out)?;
    write_corpus(&dirty, out.join("corpus.jsonl"))?;
    manifest.write(out.join("manifest.jsonl"))?;
    split.write(out.join("split.jsonl"))?;
    println!("{setting} seed {seed}");
    for (kind, n) in manifest.counts() {
        let name = serde_json::to_value(kind).map_err(k3m::Error::from)?;
        println!("{:<14}{n:>8}", name.as_str().unwrap_or_default());
    }
    print_split_counts(&dirty, &split);
    Ok(())
}

fn build_model(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<K3m, CliError> {
    Ok(K3m::new(cfg.model.clone(), ModelDims::of(corpus)?)?)
}

fn run_pretrain(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?.with_seed(seed);
    let dir = cfg.out_dir(out)?;
    create_dir(&dir)?;
    echo_config(&cfg, &dir)?;
    let corpus = cfg.corpus(cfg.seed())?;
    let model = build_model(&cfg, &corpus)?;
    let result = pretrain(&model, &corpus, &cfg.pretrain, cfg.seed())?;
    result.params.save(dir.join(PRETRAINED))?;
    result.write_history(dir.join(LOSS_HISTORY))?;
    if let Some(last) = result.history.last() {
        println!(
            "step {}: mlm {:.4} mom {:.4} lpm {:.4} total {:.4}",
            last.step, last.l_mlm, last.l_mom, last.l_lpm, last.l_total
        );
    }
    println!("wrote {}", dir.join(PRETRAINED).display());
    Ok(())
}

/// The seed derivation shared by `corrupt` and the training commands.
fn corrupt_and_split(
    clean: &Corpus,
    setting: Option<CorruptionSetting>,
    seed: u64,
) -> Result<(Corpus, CorruptionManifest, SplitAssignment), CliError> {
    let (dirty, manifest) = match setting {
        Some(s) => apply_corruption(clean, s, derive_seed(&[seed, 1]))?,
        None => (clean.clone(), CorruptionManifest::identity(clean)),
    };
    let split = balanced_split(&dirty, &manifest, derive_seed(&[seed, 2]))?;
    Ok((dirty, manifest, split))
}

/// The task dataset on `clean` corrupted by `setting` (clean when `None`).
fn task_data(task: Task, clean: &Corpus, setting: Option<CorruptionSetting>, seed: u64) -> Result<TaskData, CliError> {
    let (dirty, _, split) = corrupt_and_split(clean, setting, seed)?;
    Ok(match task {
        Task::ItemCls => TaskData::ItemCls { corpus: dirty, split },
        Task::Alignment => TaskData::Alignment(build_alignment_data(&dirty, clean, &split, derive_seed(&[seed, 3]))?),
        Task::Qa => TaskData::Qa {
            examples: build_qa_data(&dirty, &split, derive_seed(&[seed, 3]))?,
            corpus: dirty,
        },
    })
}

fn load_checkpoint(path: &Path) -> Result<ParamStore, CliError> {
    if !path.exists() {
        return Err(CliError::Io(
            path.to_path_buf(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    Ok(ParamStore::load(path)?)
}

fn run_finetune(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    task: Option<Task>,
    setting: Option<CorruptionSetting>,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?.with_seed(seed);
    if let Some(t) = task {
        cfg.task = t;
    }
    let dir = cfg.out_dir(out)?;
    let params = checkpoint.as_deref().map(load_checkpoint).transpose()?;
    create_dir(&dir)?;
    echo_config(&cfg, &dir)?;
    let seed = cfg.seed();
    let corpus = cfg.corpus(seed)?;
    let model = build_model(&cfg, &corpus)?;
    let params = match params {
        Some(p) => p,
        None => model.init_params(seed)?,
    };
    let data = task_data(cfg.task, &corpus, setting, seed)?;
    let result = finetune(&model, params, &data, &cfg.finetune_config(), seed, setting)?;
    result.params.save(dir.join(FINETUNED))?;
    result.write_metrics(dir.join(METRICS))?;
    for m in &result.metrics {
        println!("{:<6} step {:>5} {:<10} {:.2}", m.split.as_str(), m.step, m.metric_name, m.value);
    }
    Ok(())
}

fn run_eval(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    task: Option<Task>,
) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?.with_seed(seed);
    if let Some(t) = task {
        cfg.task = t;
    }
    let dir = cfg.out_dir(out)?;
    let pretrained = checkpoint.as_deref().map(load_checkpoint).transpose()?;
    create_dir(&dir)?;
    echo_config(&cfg, &dir)?;
    let ft = cfg.finetune_config();
    let mut rows: Vec<MetricRecord> = Vec::new();
    for &seed in &cfg.seeds {
        let corpus = cfg.corpus(seed)?;
        let model = build_model(&cfg, &corpus)?;
        let start = match &pretrained {
            Some(p) => p.clone(),
            None => pretrain(&model, &corpus, &cfg.pretrain, seed)?.params,
        };
        for &kind in &cfg.sweep.kinds {
            for &ratio in &cfg.sweep.ratios {
                let setting = CorruptionSetting::new(kind, ratio)?;
                let data = task_data(cfg.task, &corpus, Some(setting), seed)?;
                let result = finetune(&model, start.clone(), &data, &ft, seed, Some(setting))?;
                for m in result.metrics.into_iter().filter(|m| m.split == Split::Test) {
                    println!("seed {seed} {setting:<9} {:<10} {:.2}", m.metric_name, m.value);
                    rows.push(m);
                }
            }
        }
    }
    let path = dir.join(METRICS);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::Io(path.clone(), e))?;
    let mut buf = Vec::new();
    for r in &rows {
        serde_json::to_writer(&mut buf, r).map_err(k3m::Error::from)?;
        buf.push(b'\n');
    }
    file.write_all(&buf).map_err(|e| CliError::Io(path.clone(), e))?;
    println!("appended {} rows to {}", rows.len(), path.display());
    Ok(())
}
