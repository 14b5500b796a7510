//! Modality-missing and modality-noise dataset transformations, and the
//! balanced 7:1:2 split stratified by class and corruption action.
//!
//! All counts use floor semantics per class of size `N`:
//!
//! | kind | affected items per class |
//! |------|--------------------------|
//! | TMR, IMR, TNR, INR, TINR | `⌊N·ρ/100⌋` with the single matching action |
//! | MMR | `⌊N·ρ/200⌋` image-dropped, then `⌊N·ρ/200⌋` title-dropped from the rest |
//! | MNR | `⌊N·ρ/300⌋` each of title-, image- and both-replaced, disjoint |

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Corpus, ItemId, ObjectSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorruptionKind {
    /// Title-only missing.
    #[serde(rename = "TMR")]
    Tmr,
    /// Image-only missing.
    #[serde(rename = "IMR")]
    Imr,
    /// Mixed missing.
    #[serde(rename = "MMR")]
    Mmr,
    /// Title-only noise.
    #[serde(rename = "TNR")]
    Tnr,
    /// Image-only noise.
    #[serde(rename = "INR")]
    Inr,
    /// Title and image noise.
    #[serde(rename = "TINR")]
    Tinr,
    /// Mixed noise.
    #[serde(rename = "MNR")]
    Mnr,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::Tmr,
        CorruptionKind::Imr,
        CorruptionKind::Mmr,
        CorruptionKind::Tnr,
        CorruptionKind::Inr,
        CorruptionKind::Tinr,
        CorruptionKind::Mnr,
    ];

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::Tnr | CorruptionKind::Inr | CorruptionKind::Tinr | CorruptionKind::Mnr
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Tmr => "TMR",
            CorruptionKind::Imr => "IMR",
            CorruptionKind::Mmr => "MMR",
            CorruptionKind::Tnr => "TNR",
            CorruptionKind::Inr => "INR",
            CorruptionKind::Tinr => "TINR",
            CorruptionKind::Mnr => "MNR",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSetting {
    pub kind: CorruptionKind,
    /// Percentage in `0..=100`.
    pub ratio: u32,
}

impl CorruptionSetting {
    pub fn new(kind: CorruptionKind, ratio: u32) -> Result<Self> {
        if ratio > 100 {
            return Err(Error::InvalidInput(format!("ratio {ratio} outside 0..=100")));
        }
        Ok(Self { kind, ratio })
    }

    /// Per-class action groups, in sampling order.
    pub fn plan(&self, class_size: usize) -> Vec<(ActionKind, usize)> {
        let n = class_size * self.ratio as usize;
        use ActionKind as A;
        match self.kind {
            CorruptionKind::Tmr => vec![(A::DropTitle, n / 100)],
            CorruptionKind::Imr => vec![(A::DropImage, n / 100)],
            CorruptionKind::Tnr => vec![(A::ReplaceTitle, n / 100)],
            CorruptionKind::Inr => vec![(A::ReplaceImage, n / 100)],
            CorruptionKind::Tinr => vec![(A::ReplaceBoth, n / 100)],
            CorruptionKind::Mmr => vec![(A::DropImage, n / 200), (A::DropTitle, n / 200)],
            CorruptionKind::Mnr => vec![
                (A::ReplaceTitle, n / 300),
                (A::ReplaceImage, n / 300),
                (A::ReplaceBoth, n / 300),
            ],
        }
    }
}

impl fmt::Display for CorruptionSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}%", self.kind, self.ratio)
    }
}

/// What happened to one item. Sources are the items whose original title or
/// image was copied in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    None,
    DropTitle,
    DropImage,
    ReplaceTitle { source: ItemId },
    ReplaceImage { source: ItemId },
    ReplaceBoth { title_source: ItemId, image_source: ItemId },
}

/// [`Action`] without its sources; the stratum key of the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    None,
    DropTitle,
    DropImage,
    ReplaceTitle,
    ReplaceImage,
    ReplaceBoth,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::None => ActionKind::None,
            Action::DropTitle => ActionKind::DropTitle,
            Action::DropImage => ActionKind::DropImage,
            Action::ReplaceTitle { .. } => ActionKind::ReplaceTitle,
            Action::ReplaceImage { .. } => ActionKind::ReplaceImage,
            Action::ReplaceBoth { .. } => ActionKind::ReplaceBoth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub item_id: ItemId,
    #[serde(flatten)]
    pub action: Action,
}

/// Per-item record of the applied action, in corpus order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorruptionManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorruptionManifest {
    pub fn identity(corpus: &Corpus) -> Self {
        Self {
            entries: corpus
                .items
                .iter()
                .map(|it| ManifestEntry {
                    item_id: it.id,
                    action: Action::None,
                })
                .collect(),
        }
    }

    pub fn action(&self, id: ItemId) -> Option<Action> {
        self.entries.iter().find(|e| e.item_id == id).map(|e| e.action)
    }

    /// Number of items per action kind.
    pub fn counts(&self) -> BTreeMap<ActionKind, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.action.kind()).or_default() += 1;
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.entries)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            entries: read_jsonl(path.as_ref())?,
        })
    }
}

fn other_item(rng: &mut impl Rng, n: usize, target: usize) -> usize {
    let r = rng.random_range(0..n - 1);
    if r >= target {
        r + 1
    } else {
        r
    }
}

/// Applies a corruption setting. The input corpus is left untouched; every
/// replacement copies the *original* title or image of a uniformly chosen
/// different item.
pub fn apply_corruption(
    corpus: &Corpus,
    setting: CorruptionSetting,
    seed: u64,
) -> Result<(Corpus, CorruptionManifest)> {
    if setting.ratio > 100 {
        return Err(Error::InvalidInput(format!("ratio {} outside 0..=100", setting.ratio)));
    }
    let n = corpus.items.len();
    if setting.kind.is_noise() && n < 2 {
        return Err(Error::InvalidInput(format!(
            "{} needs at least 2 items to draw replacements, corpus has {n}",
            setting.kind
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = vec![Action::None; n];
    for mut members in corpus.by_class() {
        members.shuffle(&mut rng);
        let mut next = members.into_iter();
        for (kind, count) in setting.plan(next.len()) {
            for pos in next.by_ref().take(count) {
                actions[pos] = match kind {
                    ActionKind::None => Action::None,
                    ActionKind::DropTitle => Action::DropTitle,
                    ActionKind::DropImage => Action::DropImage,
                    ActionKind::ReplaceTitle => Action::ReplaceTitle {
                        source: corpus.items[other_item(&mut rng, n, pos)].id,
                    },
                    ActionKind::ReplaceImage => Action::ReplaceImage {
                        source: corpus.items[other_item(&mut rng, n, pos)].id,
                    },
                    ActionKind::ReplaceBoth => {
                        let t = other_item(&mut rng, n, pos);
                        let i = other_item(&mut rng, n, pos);
                        Action::ReplaceBoth {
                            title_source: corpus.items[t].id,
                            image_source: corpus.items[i].id,
                        }
                    }
                };
            }
        }
    }

    let index = corpus.index();
    let title_of = |id: ItemId| corpus.items[index[&id]].title.clone();
    let image_of = |id: ItemId| corpus.items[index[&id]].objects.clone();
    let mut out = corpus.clone();
    for (item, action) in out.items.iter_mut().zip(&actions) {
        match *action {
            Action::None => {}
            Action::DropTitle => item.title.clear(),
            Action::DropImage => item.objects = ObjectSequence::default(),
            Action::ReplaceTitle { source } => item.title = title_of(source),
            Action::ReplaceImage { source } => item.objects = image_of(source),
            Action::ReplaceBoth {
                title_source,
                image_source,
            } => {
                item.title = title_of(title_source);
                item.objects = image_of(image_source);
            }
        }
    }
    let manifest = CorruptionManifest {
        entries: corpus
            .items
            .iter()
            .zip(actions)
            .map(|(it, action)| ManifestEntry {
                item_id: it.id,
                action,
            })
            .collect(),
    };
    Ok((out, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub item_id: ItemId,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub entries: Vec<SplitEntry>,
}

impl SplitAssignment {
    pub fn get(&self, id: ItemId) -> Option<Split> {
        self.entries.iter().find(|e| e.item_id == id).map(|e| e.split)
    }

    /// Item ids of one split, in corpus order.
    pub fn ids(&self, split: Split) -> Vec<ItemId> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.item_id)
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.entries)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            entries: read_jsonl(path.as_ref())?,
        })
    }
}

/// `(train, dev, test)` sizes of one stratum: dev `⌊n/10⌋`, test `⌊2n/10⌋`,
/// train takes the remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let dev = n / 10;
    let test = n * 2 / 10;
    (n - dev - test, dev, test)
}

/// Splits every (class, action kind) stratum 7:1:2.
pub fn balanced_split(corpus: &Corpus, manifest: &CorruptionManifest, seed: u64) -> Result<SplitAssignment> {
    let index = corpus.index();
    let mut cells: BTreeMap<(usize, ActionKind), Vec<usize>> = BTreeMap::new();
    let mut covered = vec![false; corpus.items.len()];
    for e in &manifest.entries {
        let pos = *index
            .get(&e.item_id)
            .ok_or_else(|| Error::InvalidInput(format!("manifest names unknown {}", e.item_id)))?;
        covered[pos] = true;
        cells
            .entry((corpus.items[pos].latent_class, e.action.kind()))
            .or_default()
            .push(pos);
    }
    if let Some(pos) = covered.iter().position(|c| !c) {
        return Err(Error::InvalidInput(format!(
            "manifest does not cover {}",
            corpus.items[pos].id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; corpus.items.len()];
    for (_, mut members) in cells {
        members.sort_unstable();
        members.shuffle(&mut rng);
        let (train, dev, _) = split_counts(members.len());
        for (rank, pos) in members.into_iter().enumerate() {
            splits[pos] = if rank < train {
                Split::Train
            } else if rank < train + dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
    }
    Ok(SplitAssignment {
        entries: corpus
            .items
            .iter()
            .zip(splits)
            .map(|(it, split)| SplitEntry { item_id: it.id, split })
            .collect(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
