//! Synthetic seq2seq tasks and the multi-task batch mixer.
//!
//! Every task is rendered as text-to-text: classification labels are target
//! strings. Datasets are a pure function of their [`TaskSpec`]; inputs are
//! unique across the whole dataset, so train/dev/test never share an example.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Example;
use crate::rng::derive_seed;
use crate::vocab;

const LETTERS: &[u8] = b"abcdefgh";
const DIGITS: &[u8] = b"0123456789";
pub const KV_DELIMITER: char = '|';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SortDigits,
    ParityClassify,
    KeyValueLookup,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::SortDigits,
        TaskKind::ParityClassify,
        TaskKind::KeyValueLookup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::SortDigits => "sort-digits",
            TaskKind::ParityClassify => "parity-classify",
            TaskKind::KeyValueLookup => "key-value-lookup",
        }
    }

    /// Default `(min, max)` length range. For key-value lookup this counts
    /// key/value pairs rather than characters.
    pub fn default_lengths(&self) -> (usize, usize) {
        match self {
            TaskKind::Copy | TaskKind::Reverse => (2, 5),
            TaskKind::SortDigits => (2, 5),
            TaskKind::ParityClassify => (4, 12),
            TaskKind::KeyValueLookup => (2, 4),
        }
    }

    /// Closed label set for classification-as-generation tasks.
    pub fn labels(&self) -> Option<Vec<String>> {
        match self {
            TaskKind::ParityClassify => Some(vec!["even".into(), "odd".into()]),
            _ => None,
        }
    }

    /// Reserved token that names this task when pretraining the frozen model.
    pub fn marker_token(&self) -> usize {
        let idx = TaskKind::ALL.iter().position(|k| k == self).expect("listed");
        vocab::TASK_MARKER_BASE + idx
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    ExactMatch,
    TokenAccuracy,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::ExactMatch => "exact-match",
            Metric::TokenAccuracy => "token-accuracy",
        }
    }

    /// Score of one prediction in `[0, 1]`. Token accuracy compares
    /// positions up to the longer of the two sequences, so missing or extra
    /// tokens count as errors.
    pub fn score(&self, predicted: &[usize], target: &[usize]) -> f64 {
        match self {
            Metric::ExactMatch => f64::from(u8::from(predicted == target)),
            Metric::TokenAccuracy => {
                let len = predicted.len().max(target.len());
                if len == 0 {
                    return 1.0;
                }
                let hits = predicted.iter().zip(target).filter(|(a, b)| a == b).count();
                hits as f64 / len as f64
            }
        }
    }
}

/// Mean metric over paired predictions and targets.
pub fn score_predictions(predictions: &[Vec<usize>], targets: &[Vec<usize>], metric: Metric) -> f64 {
    assert_eq!(predictions.len(), targets.len(), "prediction/target count mismatch");
    if targets.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| metric.score(p, t))
        .sum::<f64>()
        / targets.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub metric: Metric,
}

impl TaskSpec {
    pub const DEFAULT_TRAIN: usize = 2000;
    pub const DEFAULT_DEV: usize = 200;
    pub const DEFAULT_TEST: usize = 200;

    pub fn new(kind: TaskKind, seed: u64) -> Self {
        let (min_len, max_len) = kind.default_lengths();
        Self {
            task_id: kind.as_str().to_string(),
            kind,
            seed,
            min_len,
            max_len,
            train_size: Self::DEFAULT_TRAIN,
            dev_size: Self::DEFAULT_DEV,
            test_size: Self::DEFAULT_TEST,
            metric: Metric::ExactMatch,
        }
    }

    pub fn with_sizes(mut self, train: usize, dev: usize, test: usize) -> Self {
        self.train_size = train;
        self.dev_size = dev;
        self.test_size = test;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "task {}: bad length range {}..={}",
                self.task_id, self.min_len, self.max_len
            )));
        }
        if self.kind == TaskKind::KeyValueLookup && self.max_len > LETTERS.len() {
            return Err(Error::Config(format!(
                "task {}: at most {} key/value pairs",
                self.task_id,
                LETTERS.len()
            )));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::Config(format!("task {}: every split must be nonempty", self.task_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextExample {
    pub input: String,
    pub target: String,
}

impl TextExample {
    pub fn tokenize(&self) -> Example {
        Example::new(vocab::encode(&self.input), vocab::encode(&self.target))
    }
}

/// Target string for `input` under `kind`.
pub fn solve(kind: TaskKind, input: &str) -> String {
    match kind {
        TaskKind::Copy => input.to_string(),
        TaskKind::Reverse => input.chars().rev().collect(),
        TaskKind::SortDigits => {
            let mut c: Vec<char> = input.chars().collect();
            c.sort_unstable();
            c.into_iter().collect()
        }
        TaskKind::ParityClassify => {
            let ones = input.chars().filter(|&c| c == '1').count();
            if ones % 2 == 0 { "even" } else { "odd" }.to_string()
        }
        TaskKind::KeyValueLookup => {
            let (pairs, query) = input.split_once(KV_DELIMITER).unwrap_or((input, ""));
            let b = pairs.as_bytes();
            b.chunks(2)
                .find(|kv| kv.len() == 2 && query.as_bytes() == &kv[..1])
                .map(|kv| (kv[1] as char).to_string())
                .unwrap_or_default()
        }
    }
}

fn sample_input(kind: TaskKind, min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(min_len..=max_len);
    let pick = |alphabet: &[u8], rng: &mut ChaCha8Rng| alphabet[rng.random_range(0..alphabet.len())] as char;
    match kind {
        TaskKind::Copy | TaskKind::Reverse => (0..len).map(|_| pick(LETTERS, rng)).collect(),
        TaskKind::SortDigits => (0..len).map(|_| pick(DIGITS, rng)).collect(),
        TaskKind::ParityClassify => (0..len).map(|_| pick(b"01", rng)).collect(),
        TaskKind::KeyValueLookup => {
            let mut keys = LETTERS.to_vec();
            keys.shuffle(rng);
            let mut s = String::new();
            for &k in &keys[..len] {
                s.push(k as char);
                s.push(pick(DIGITS, rng));
            }
            s.push(KV_DELIMITER);
            s.push(keys[rng.random_range(0..len)] as char);
            s
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<TextExample>,
    pub dev: Vec<TextExample>,
    pub test: Vec<TextExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Builds the default-sized dataset for a task kind given by name.
pub fn make_task(kind: &str, seed: u64) -> Result<TaskData> {
    generate(&TaskSpec::new(kind.parse()?, seed))
}

/// Deterministically materializes a dataset from its spec.
pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let total = spec.train_size + spec.dev_size + spec.test_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let budget = total.saturating_mul(200).max(10_000);
    let mut attempts = 0;
    while examples.len() < total {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "task {}: could only draw {} unique inputs of the {} requested; widen the length range",
                spec.task_id,
                examples.len(),
                total
            )));
        }
        let input = sample_input(spec.kind, spec.min_len, spec.max_len, &mut rng);
        if seen.insert(input.clone()) {
            let target = solve(spec.kind, &input);
            examples.push(TextExample { input, target });
        }
    }
    let test = examples.split_off(spec.train_size + spec.dev_size);
    let dev = examples.split_off(spec.train_size);
    Ok(TaskData {
        spec: spec.clone(),
        train: examples,
        dev,
        test,
    })
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[TextExample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Writes `<dir>/<task_id>/{spec.json,train.tsv,dev.tsv,test.tsv}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let task_dir = dir.join(&self.spec.task_id);
        fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
        let spec_path = task_dir.join("spec.json");
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(&spec_path, spec + "\n").map_err(|e| Error::io(&spec_path, e))?;
        for split in [Split::Train, Split::Dev, Split::Test] {
            let path = task_dir.join(format!("{}.tsv", split.as_str()));
            let mut body = String::new();
            for ex in self.split(split) {
                body.push_str(&ex.input);
                body.push('\t');
                body.push_str(&ex.target);
                body.push('\n');
            }
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(task_dir: &Path) -> Result<Self> {
        let spec_path = task_dir.join("spec.json");
        let raw = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: TaskSpec = serde_json::from_str(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", spec_path.display())))?;
        let read = |split: Split| -> Result<Vec<TextExample>> {
            let path = task_dir.join(format!("{}.tsv", split.as_str()));
            let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            raw.lines()
                .enumerate()
                .map(|(i, line)| {
                    let (input, target) = line.split_once('\t').ok_or_else(|| {
                        Error::Format(format!("{}:{}: expected input<TAB>target", path.display(), i + 1))
                    })?;
                    Ok(TextExample {
                        input: input.into(),
                        target: target.into(),
                    })
                })
                .collect()
        };
        Ok(Self {
            train: read(Split::Train)?,
            dev: read(Split::Dev)?,
            test: read(Split::Test)?,
            spec,
        })
    }
}

/// Cursor state of a [`MultiTaskMixer`]; small enough to checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerState {
    pub batches: u64,
    /// Per task: (epoch, position within the epoch's permutation).
    pub cursors: Vec<(u64, usize)>,
}

/// Composes batches with near-equal per-task quotas. Each task walks its own
/// training set without replacement, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct MultiTaskMixer {
    sizes: Vec<usize>,
    batch_size: usize,
    seed: u64,
    state: MixerState,
    perms: Vec<Vec<usize>>,
}

impl MultiTaskMixer {
    pub fn new(sizes: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config("mixer needs at least one nonempty task".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let state = MixerState {
            batches: 0,
            cursors: vec![(0, 0); sizes.len()],
        };
        Self::with_state(sizes, batch_size, seed, state)
    }

    pub fn with_state(sizes: Vec<usize>, batch_size: usize, seed: u64, state: MixerState) -> Result<Self> {
        if state.cursors.len() != sizes.len() {
            return Err(Error::Config("mixer state does not match task count".into()));
        }
        let perms = sizes
            .iter()
            .enumerate()
            .map(|(t, &n)| permutation(seed, t, state.cursors[t].0, n))
            .collect();
        Ok(Self {
            sizes,
            batch_size,
            seed,
            state,
            perms,
        })
    }

    pub fn state(&self) -> &MixerState {
        &self.state
    }

    pub fn num_tasks(&self) -> usize {
        self.sizes.len()
    }

    /// Per-task counts for the next batch: `⌊B/T⌋` each, with the `B mod T`
    /// extra slots rotating across tasks from batch to batch.
    pub fn next_quota(&self) -> Vec<usize> {
        let t = self.sizes.len();
        let base = self.batch_size / t;
        let rem = self.batch_size % t;
        let offset = ((self.state.batches as u128 * rem as u128) % t as u128) as usize;
        let mut quota = vec![base; t];
        for i in 0..rem {
            quota[(offset + i) % t] += 1;
        }
        quota
    }

    /// Next batch as `(task index, example index)` pairs, grouped by task.
    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let quota = self.next_quota();
        self.next_batch_with_quota(&quota)
    }

    /// Draws an explicit number of examples per task.
    pub fn next_batch_with_quota(&mut self, quota: &[usize]) -> Vec<(usize, usize)> {
        assert_eq!(quota.len(), self.sizes.len(), "quota length");
        let mut batch = Vec::with_capacity(quota.iter().sum());
        for (t, &count) in quota.iter().enumerate() {
            for _ in 0..count {
                let (epoch, pos) = &mut self.state.cursors[t];
                if *pos == self.sizes[t] {
                    *epoch += 1;
                    *pos = 0;
                    self.perms[t] = permutation(self.seed, t, *epoch, self.sizes[t]);
                }
                batch.push((t, self.perms[t][*pos]));
                *pos += 1;
            }
        }
        self.state.batches += 1;
        batch
    }
}

fn permutation(seed: u64, task: usize, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6d69_7865, task as u64, epoch]));
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}
