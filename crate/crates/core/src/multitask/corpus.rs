//! Synthetic multilingual corpus.
//!
//! Every language owns a block of word ids and a substitution cipher from a
//! shared pivot vocabulary into that block. An MT pair is a pivot sentence
//! and its ciphered reversal; a monolingual sentence for DAE is the ciphered
//! form of a pivot sentence. Sentence `i` of language `l` is a pure function
//! of `(seed, l, i)`. Training draws indices below `sizes[l]`; held-out
//! indices start at [`HELDOUT_BASE`], so the two never overlap.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
pub const BLANK: usize = 3;
pub const TASK_MT: usize = 4;
pub const TASK_DAE: usize = 5;
const FIRST_LANG_TAG: usize = 6;

pub const HELDOUT_BASE: u64 = 1 << 40;
pub const VALIDATION_BASE: u64 = 1 << 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mt,
    Dae,
}

impl Task {
    pub fn tag(self) -> usize {
        match self {
            Task::Mt => TASK_MT,
            Task::Dae => TASK_DAE,
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Task::Mt => 0,
            Task::Dae => 1,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Mt => "mt",
            Task::Dae => "dae",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Training sentences per language.
    pub sizes: Vec<u64>,
    /// Size of the pivot vocabulary and of every language's word block.
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sizes: vec![9000, 1000],
            words: 16,
            min_len: 3,
            max_len: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    /// `ciphers[l][w]` is the language-`l` id of pivot word `w`.
    ciphers: Vec<Vec<usize>>,
}

/// One training or evaluation batch for a task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task: Task,
    pub languages: Vec<usize>,
    pub src: Vec<Vec<usize>>,
    /// Decoder input: `BOS` followed by the target.
    pub tgt_in: Vec<Vec<usize>>,
    /// Flattened labels: each target followed by `EOS`.
    pub labels: Vec<usize>,
}

impl TaskBatch {
    pub fn tokens(&self) -> usize {
        self.src.iter().map(Vec::len).sum::<usize>() + self.labels.len()
    }

    pub fn targets(&self) -> Vec<Vec<usize>> {
        self.tgt_in.iter().map(|t| t[1..].to_vec()).collect()
    }
}

impl SyntheticCorpus {
    pub fn new(config: CorpusConfig) -> Result<Self> {
        if config.sizes.is_empty() || config.sizes.contains(&0) {
            return Err(Error::InvalidArgument("every language needs a positive corpus size".into()));
        }
        if config.words == 0 || config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::InvalidArgument("need words > 0 and 1 <= min_len <= max_len".into()));
        }
        let langs = config.sizes.len();
        let first_word = FIRST_LANG_TAG + langs + config.words;
        let ciphers = (0..langs)
            .map(|l| {
                let mut perm: Vec<usize> = (0..config.words).collect();
                perm.shuffle(&mut seed::rng(seed::derive_path(config.seed, &[0, l as u64])));
                perm.into_iter().map(|p| first_word + l * config.words + p).collect()
            })
            .collect();
        Ok(Self { config, ciphers })
    }

    pub fn languages(&self) -> usize {
        self.config.sizes.len()
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_LANG_TAG + self.languages() * (1 + self.config.words) + self.config.words
    }

    pub fn lang_tag(&self, l: usize) -> usize {
        FIRST_LANG_TAG + l
    }

    fn pivot_word(&self, w: usize) -> usize {
        FIRST_LANG_TAG + self.languages() + w
    }

    /// Whether `id` is a content word of some language or of the pivot vocabulary.
    pub fn is_word(&self, id: usize) -> bool {
        id >= FIRST_LANG_TAG + self.languages() && id < self.vocab_size()
    }

    fn length_classes(&self) -> u64 {
        (self.config.max_len - self.config.min_len + 1) as u64
    }

    /// Pivot-word sentence `i` of language `l`; its length is `min_len + i mod classes`.
    fn pivot_sentence(&self, l: usize, i: u64) -> Vec<usize> {
        let len = self.config.min_len + (i % self.length_classes()) as usize;
        let mut rng = seed::rng(seed::derive_path(self.config.seed, &[1, l as u64, i]));
        (0..len).map(|_| rng.random_range(0..self.config.words)).collect()
    }

    /// `(source, target)` of MT pair `i` of language `l`, without task tags.
    pub fn mt_pair(&self, l: usize, i: u64) -> (Vec<usize>, Vec<usize>) {
        let p = self.pivot_sentence(l, i);
        let src = p.iter().map(|&w| self.pivot_word(w)).collect();
        let tgt = p.iter().rev().map(|&w| self.ciphers[l][w]).collect();
        (src, tgt)
    }

    /// Clean monolingual sentence `i` of language `l`.
    pub fn mono_sentence(&self, l: usize, i: u64) -> Vec<usize> {
        self.pivot_sentence(l, i).iter().map(|&w| self.ciphers[l][w]).collect()
    }

    /// Inverts the generating rule of an MT pair.
    pub fn mt_reference(&self, l: usize, src: &[usize]) -> Vec<usize> {
        src.iter().rev().map(|&id| self.ciphers[l][id - self.pivot_word(0)]).collect()
    }

    fn source_prefix(&self, task: Task, l: usize) -> [usize; 2] {
        [task.tag(), self.lang_tag(l)]
    }

    /// Assembles a batch from `(language, sentence index)` pairs in the given order.
    pub fn batch(&self, task: Task, items: &[(usize, u64)], noise: Option<(&super::DaeNoiseConfig, u64)>) -> Result<TaskBatch> {
        let mut b = TaskBatch {
            task,
            languages: Vec::with_capacity(items.len()),
            src: Vec::with_capacity(items.len()),
            tgt_in: Vec::with_capacity(items.len()),
            labels: Vec::new(),
        };
        for (k, &(l, i)) in items.iter().enumerate() {
            let (body, tgt) = match task {
                Task::Mt => self.mt_pair(l, i),
                Task::Dae => {
                    let clean = self.mono_sentence(l, i);
                    let noised = match noise {
                        Some((cfg, s)) => super::noise_dae(&clean, cfg, seed::derive(s, k as u64))?,
                        None => clean.clone(),
                    };
                    (noised, clean)
                }
            };
            let mut src = self.source_prefix(task, l).to_vec();
            src.extend(body);
            let mut tgt_in = vec![BOS];
            tgt_in.extend_from_slice(&tgt);
            b.labels.extend_from_slice(&tgt);
            b.labels.push(EOS);
            b.languages.push(l);
            b.src.push(src);
            b.tgt_in.push(tgt_in);
        }
        Ok(b)
    }

    /// Training batch of `sentences` items of one length class. Languages
    /// are drawn from `lang_probs`; the batch is ordered by language id.
    pub fn sample_batch(
        &self,
        task: Task,
        sentences: usize,
        lang_probs: &[f64],
        noise: &super::DaeNoiseConfig,
        batch_seed: u64,
    ) -> Result<TaskBatch> {
        let mut rng = seed::rng(batch_seed);
        let classes = self.length_classes();
        let class = rng.random_range(0..classes);
        let dist = WeightedIndex::new(lang_probs).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut items: Vec<(usize, u64)> = (0..sentences)
            .map(|_| {
                let l = dist.sample(&mut rng);
                let per_class = self.config.sizes[l].div_ceil(classes).max(1);
                let mut i = rng.random_range(0..per_class) * classes + class;
                if i >= self.config.sizes[l] {
                    i = class.min(self.config.sizes[l] - 1);
                }
                (l, i)
            })
            .collect();
        items.sort_by_key(|&(l, _)| l);
        self.batch(task, &items, Some((noise, seed::derive(batch_seed, 1))))
    }

    /// Held-out MT batches: `per_language` sentences of each language, split
    /// into batches of at most `batch` sentences of equal length.
    pub fn heldout_mt(&self, per_language: usize, batch: usize) -> Result<Vec<TaskBatch>> {
        self.mt_split(HELDOUT_BASE, per_language, batch)
    }

    /// Validation batches, disjoint from both training and held-out sentences.
    pub fn validation_mt(&self, per_language: usize, batch: usize) -> Result<Vec<TaskBatch>> {
        self.mt_split(VALIDATION_BASE, per_language, batch)
    }

    fn mt_split(&self, base: u64, per_language: usize, batch: usize) -> Result<Vec<TaskBatch>> {
        let classes = self.length_classes();
        let mut by_class: Vec<Vec<(usize, u64)>> = vec![Vec::new(); classes as usize];
        for l in 0..self.languages() {
            for k in 0..per_language as u64 {
                let i = base + k;
                by_class[(i % classes) as usize].push((l, i));
            }
        }
        let mut out = Vec::new();
        for items in by_class {
            for chunk in items.chunks(batch.max(1)) {
                out.push(self.batch(Task::Mt, chunk, None)?);
            }
        }
        Ok(out)
    }
}

/// `p_l ∝ (D_l / Σ D)^(1/T)`.
pub fn temperature_probs(sizes: &[u64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("corpus sizes must be positive".into()));
    }
    let total: f64 = sizes.iter().map(|&d| d as f64).sum();
    let w: Vec<f64> = sizes.iter().map(|&d| (d as f64 / total).powf(1.0 / temperature)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

pub fn sample_language<R: Rng + ?Sized>(sizes: &[u64], temperature: f64, rng: &mut R) -> Result<usize> {
    let p = temperature_probs(sizes, temperature)?;
    let dist = WeightedIndex::new(&p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.sample(rng))
}
