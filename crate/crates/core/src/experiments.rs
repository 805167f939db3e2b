//! Experiment engine: declarative configs, the generator × task matrix, the
//! learning-rate sweep, and result tables.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/config.resolved.toml   every default spelled out
//! <out>/lm.ckpt, pretrain.json the pretrained frozen LM
//! <out>/data/<task>/           generated datasets
//! <out>/runs/<run_id>/         record.json, last.ckpt, best.ckpt
//! <out>/metrics.csv            every logged number, one row each
//! <out>/results.{md,csv}       mean/std table
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generators::GeneratorKind;
use crate::lm::FrozenSeq2SeqLm;
use crate::pretrain::{pretrain, PretrainConfig};
use crate::rng::derive_seed;
use crate::tasks::{generate, TaskData, TaskKind, TaskSpec};
use crate::trainer::{train, Mode, RunOptions, RunRecord, RunStatus, TrainConfig, TrainTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_size: TaskSpec::DEFAULT_TRAIN,
            dev_size: TaskSpec::DEFAULT_DEV,
            test_size: TaskSpec::DEFAULT_TEST,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, kind: TaskKind) -> TaskSpec {
        let idx = TaskKind::ALL.iter().position(|k| *k == kind).expect("known kind") as u64;
        TaskSpec::new(kind, derive_seed(self.seed, &[idx])).with_sizes(self.train_size, self.dev_size, self.test_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub tasks: Vec<TaskKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_generators")]
    pub generators: Vec<GeneratorKind>,
    /// Learning-rate axis; `[train.lr]` when empty.
    #[serde(default)]
    pub lrs: Vec<f64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_generators() -> Vec<GeneratorKind> {
    GeneratorKind::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The config with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("tasks must be nonempty".into()));
        }
        if self.generators.is_empty() {
            return Err(Error::Config("generators must be nonempty".into()));
        }
        if self.lrs.iter().any(|lr| lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !lr.is_finite()) {
            return Err(Error::Config(format!("learning rates must be positive: {:?}", self.lrs)));
        }
        if self.pretrain.lm.d_model == 0 {
            return Err(Error::Config("LM width must be positive".into()));
        }
        self.pretrain.lm.validate()?;
        for kind in &self.tasks {
            self.data.spec(*kind);
        }
        self.train.validate()
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        if self.lrs.is_empty() {
            vec![self.train.lr]
        } else {
            self.lrs.clone()
        }
    }

    /// Every (generator, lr, task group, seed) run, in a fixed order.
    pub fn plan(&self) -> Vec<RunPlan> {
        let groups: Vec<Vec<usize>> = match self.train.mode {
            Mode::Single => (0..self.tasks.len()).map(|i| vec![i]).collect(),
            Mode::Multi | Mode::FullFinetune => vec![(0..self.tasks.len()).collect()],
        };
        let mut out = Vec::new();
        for &generator in &self.generators {
            for &lr in &self.learning_rates() {
                for group in &groups {
                    for &seed in &self.seeds {
                        let label = if group.len() == 1 {
                            self.tasks[group[0]].as_str().to_string()
                        } else {
                            "multi".to_string()
                        };
                        out.push(RunPlan {
                            run_id: format!("{generator}_lr{lr}_{label}_seed{seed}"),
                            generator,
                            lr,
                            seed,
                            tasks: group.clone(),
                            config: TrainConfig {
                                generator,
                                lr,
                                seed,
                                ..self.train.clone()
                            },
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub run_id: String,
    pub generator: GeneratorKind,
    pub lr: f64,
    pub seed: u64,
    /// Indices into the experiment's task list.
    pub tasks: Vec<usize>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct MatrixOptions {
    pub out: PathBuf,
    pub jobs: usize,
    pub resume: bool,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub records: Vec<RunRecord>,
    /// `(run_id, reason)` for runs that errored or aborted.
    pub failures: Vec<(String, String)>,
    /// How many runs actually trained (the rest were already complete).
    pub new_runs: usize,
    pub table: ResultsTable,
}

pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads `<out>/lm.ckpt` if it was pretrained with `cfg`, otherwise
/// pretrains and stores it.
pub fn ensure_lm(out: &Path, cfg: &PretrainConfig, progress: impl FnMut(u64, f64)) -> Result<FrozenSeq2SeqLm> {
    let ckpt = out.join("lm.ckpt");
    let meta = out.join("pretrain.json");
    let wanted = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    if ckpt.exists() && meta.exists() {
        let stored = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let stored: PretrainConfig =
            serde_json::from_str(&stored).map_err(|e| Error::Format(format!("{}: {e}", meta.display())))?;
        if &stored != cfg {
            return Err(Error::Config(format!(
                "{} holds an LM pretrained with different settings; use a fresh output directory",
                out.display()
            )));
        }
        return FrozenSeq2SeqLm::from_checkpoint(&Checkpoint::load(&ckpt)?);
    }
    let lm = pretrain(cfg, progress)?;
    lm.to_checkpoint(cfg.seed)?.save(&ckpt)?;
    write_atomic(&meta, &(wanted + "\n"))?;
    Ok(lm)
}

/// Generates (and saves, if absent) the datasets of an experiment.
pub fn prepare_tasks(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TaskData>> {
    cfg.tasks
        .iter()
        .map(|&kind| {
            let data = generate(&cfg.data.spec(kind))?;
            if !out.join("data").join(&data.spec.task_id).join("spec.json").exists() {
                data.save(&out.join("data"))?;
            }
            Ok(data)
        })
        .collect()
}

fn record_path(out: &Path, run_id: &str) -> PathBuf {
    out.join("runs").join(run_id).join("record.json")
}

pub fn load_record(path: &Path) -> Result<RunRecord> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// All records under `<out>/runs`, sorted by run directory name.
pub fn load_records(out: &Path) -> Result<Vec<RunRecord>> {
    let runs = out.join("runs");
    let entries = fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&runs, e))?;
        let p = entry.path().join("record.json");
        if p.exists() {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_record(p)).collect()
}

/// Runs every planned run that does not already have a completed record.
pub fn run_matrix(cfg: &ExperimentConfig, opts: &MatrixOptions, log: &(dyn Fn(&str) + Sync)) -> Result<MatrixOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    write_atomic(&opts.out.join("config.resolved.toml"), &cfg.to_toml()?)?;
    let lm = ensure_lm(&opts.out, &cfg.pretrain, |step, loss| {
        if step % 500 == 0 {
            log(&format!("pretrain step {step}: loss {loss:.4}"));
        }
    })?;
    let data = prepare_tasks(cfg, &opts.out)?;
    let tasks: Vec<TrainTask> = data.iter().map(TrainTask::from_data).collect();
    let plan = cfg.plan();

    let execute = |p: &RunPlan| -> (Option<RunRecord>, bool, Option<String>) {
        let path = record_path(&opts.out, &p.run_id);
        let run_tasks: Vec<TrainTask> = p.tasks.iter().map(|&i| tasks[i].clone()).collect();
        if let Ok(existing) = load_record(&path) {
            let same = existing.config == p.config && existing.tasks == run_tasks.iter().map(|t| t.task_id.clone()).collect::<Vec<_>>();
            if same && existing.status == RunStatus::Completed {
                return (Some(existing), false, None);
            }
        }
        log(&format!("run {} started", p.run_id));
        let run_opts = RunOptions {
            experiment: cfg.name.clone(),
            checkpoint_dir: Some(path.parent().expect("run dir").to_path_buf()),
            resume: opts.resume,
            interrupt_after: None,
        };
        match train(&p.config, &lm, &run_tasks, &run_opts) {
            Ok(outcome) => {
                let rec = outcome.record;
                let json = serde_json::to_string_pretty(&rec).expect("record serializes");
                if let Err(e) = write_atomic(&path, &(json + "\n")) {
                    return (Some(rec), true, Some(e.to_string()));
                }
                let failure = match &rec.status {
                    RunStatus::Aborted { reason } => Some(reason.clone()),
                    _ => None,
                };
                log(&format!(
                    "run {} finished: test {}",
                    p.run_id,
                    rec.test_score().map_or("n/a".to_string(), |s| format!("{s:.4}"))
                ));
                (Some(rec), true, failure)
            }
            Err(e) => (None, true, Some(e.to_string())),
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| plan.par_iter().map(execute).collect());

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut new_runs = 0;
    for (p, (rec, ran, failure)) in plan.iter().zip(results) {
        new_runs += usize::from(ran);
        if let Some(reason) = failure {
            failures.push((p.run_id.clone(), reason));
        }
        if let Some(r) = rec {
            records.push(r);
        }
    }
    let table = ResultsTable::from_records(&cfg.name, &records);
    write_outputs(&opts.out, &records, &table)?;
    Ok(MatrixOutcome {
        records,
        failures,
        new_runs,
        table,
    })
}

/// Writes `metrics.csv` and `results.{md,csv}`.
pub fn write_outputs(out: &Path, records: &[RunRecord], table: &ResultsTable) -> Result<()> {
    write_atomic(&out.join("metrics.csv"), &metrics_csv(records))?;
    write_atomic(&out.join("results.md"), &table.to_markdown())?;
    write_atomic(&out.join("results.csv"), &table.to_csv())
}

pub const METRICS_HEADER: &str = "experiment,generator,task,lr,seed,step,split,metric,value";

/// One row per training loss and per dev/test evaluation.
pub fn metrics_csv(records: &[RunRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let c = &r.config;
        let tasks = r.tasks.join("+");
        for (i, loss) in r.losses.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},train,loss,{}",
                r.experiment,
                c.generator,
                tasks,
                c.lr,
                c.seed,
                i + 1,
                loss
            );
        }
        for p in r.evals.iter().chain(&r.test) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.experiment,
                c.generator,
                p.task,
                c.lr,
                c.seed,
                p.step,
                p.split.as_str(),
                p.metric.as_str(),
                p.value
            );
        }
    }
    s
}

/// Name of the per-seed task average column.
pub const AVG: &str = "avg";

#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub generator: GeneratorKind,
    pub lr: f64,
    pub task: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
}

/// Test scores aggregated over seeds, one cell per (generator, lr, task),
/// plus an [`AVG`] column averaging each seed's task scores first.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub experiment: String,
    pub tasks: Vec<String>,
    pub cells: Vec<CellStats>,
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn lr_key(lr: f64) -> u64 {
    lr.to_bits()
}

impl ResultsTable {
    pub fn from_records(experiment: &str, records: &[RunRecord]) -> Self {
        // (generator, lr bits, task) -> seed -> score
        let mut scores: BTreeMap<(GeneratorKind, u64, String), BTreeMap<u64, f64>> = BTreeMap::new();
        let mut per_seed: BTreeMap<(GeneratorKind, u64, u64), Vec<f64>> = BTreeMap::new();
        let mut tasks: Vec<String> = Vec::new();
        for r in records.iter().filter(|r| r.status == RunStatus::Completed) {
            for p in &r.test {
                scores
                    .entry((r.config.generator, lr_key(r.config.lr), p.task.clone()))
                    .or_default()
                    .insert(r.config.seed, p.value);
                per_seed
                    .entry((r.config.generator, lr_key(r.config.lr), r.config.seed))
                    .or_default()
                    .push(p.value);
                if !tasks.contains(&p.task) {
                    tasks.push(p.task.clone());
                }
            }
        }
        tasks.sort();
        let mut cells: Vec<CellStats> = scores
            .into_iter()
            .map(|((generator, lr, task), by_seed)| {
                let values: Vec<f64> = by_seed.into_values().collect();
                let (mean, std) = mean_std(&values);
                CellStats {
                    generator,
                    lr: f64::from_bits(lr),
                    task,
                    n: values.len(),
                    mean,
                    std,
                }
            })
            .collect();
        if tasks.len() > 1 {
            let mut avg: BTreeMap<(GeneratorKind, u64), Vec<f64>> = BTreeMap::new();
            for ((g, lr, _), v) in per_seed {
                if v.len() == tasks.len() {
                    avg.entry((g, lr)).or_default().push(v.iter().sum::<f64>() / v.len() as f64);
                }
            }
            for ((generator, lr), values) in avg {
                let (mean, std) = mean_std(&values);
                cells.push(CellStats {
                    generator,
                    lr: f64::from_bits(lr),
                    task: AVG.into(),
                    n: values.len(),
                    mean,
                    std,
                });
            }
        }
        let mut table = Self {
            experiment: experiment.into(),
            tasks,
            cells,
        };
        table.sort();
        table
    }

    fn sort(&mut self) {
        self.cells.sort_by(|a, b| {
            (a.generator.as_str(), &a.task)
                .cmp(&(b.generator.as_str(), &b.task))
                .then(a.lr.total_cmp(&b.lr))
        });
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols = self.tasks.clone();
        if self.cells.iter().any(|c| c.task == AVG) {
            cols.push(AVG.into());
        }
        cols
    }

    /// `(generator, lr)` row keys in table order.
    pub fn rows(&self) -> Vec<(GeneratorKind, f64)> {
        let mut rows: Vec<(GeneratorKind, f64)> = Vec::new();
        for c in &self.cells {
            if !rows.iter().any(|(g, lr)| *g == c.generator && lr.to_bits() == c.lr.to_bits()) {
                rows.push((c.generator, c.lr));
            }
        }
        rows.sort_by(|a, b| a.0.as_str().cmp(b.0.as_str()).then(a.1.total_cmp(&b.1)));
        rows
    }

    pub fn cell(&self, generator: GeneratorKind, lr: f64, task: &str) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.generator == generator && c.lr.to_bits() == lr.to_bits() && c.task == task)
    }

    /// Generator rows, task columns, `mean_{std}` cells in percent with two
    /// decimals; the best mean per column is bold.
    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let rows = self.rows();
        let several_lrs = rows.iter().any(|r| r.1.to_bits() != rows[0].1.to_bits());
        let mut s = format!("### {}\n\n|  |", self.experiment);
        for c in &cols {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        for _ in &cols {
            s.push_str("---|");
        }
        s.push('\n');
        let best: Vec<Option<String>> = cols
            .iter()
            .map(|col| {
                self.cells
                    .iter()
                    .filter(|c| &c.task == col)
                    .map(|c| format!("{:.2}", c.mean * 100.0))
                    .max_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()))
            })
            .collect();
        for (g, lr) in rows {
            if several_lrs {
                let _ = write!(s, "| {g} (lr={lr}) |");
            } else {
                let _ = write!(s, "| {g} |");
            }
            for (col, best) in cols.iter().zip(&best) {
                match self.cell(g, lr, col) {
                    Some(c) => {
                        let mean = format!("{:.2}", c.mean * 100.0);
                        let body = match c.std {
                            Some(sd) => format!("{mean}_{{{:.2}}}", sd * 100.0),
                            None => mean.clone(),
                        };
                        if best.as_ref() == Some(&mean) {
                            let _ = write!(s, " **{body}** |");
                        } else {
                            let _ = write!(s, " {body} |");
                        }
                    }
                    None => s.push_str(" failed |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub const CSV_HEADER: &'static str = "experiment,generator,task,lr,n,mean,std";

    /// Full-precision values; `std` is empty when absent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let std = c.std.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.experiment, c.generator, c.task, c.lr, c.n, c.mean, std
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Format("results CSV header mismatch".into()));
        }
        let mut experiment = String::new();
        let mut cells = Vec::new();
        let bad = |i: usize, what: &str| Error::Format(format!("results CSV line {}: {what}", i + 2));
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(i, "expected 7 fields"));
            }
            experiment = f[0].to_string();
            cells.push(CellStats {
                generator: f[1].parse().map_err(|_| bad(i, "generator"))?,
                task: f[2].to_string(),
                lr: f[3].parse().map_err(|_| bad(i, "lr"))?,
                n: f[4].parse().map_err(|_| bad(i, "n"))?,
                mean: f[5].parse().map_err(|_| bad(i, "mean"))?,
                std: if f[6].is_empty() {
                    None
                } else {
                    Some(f[6].parse().map_err(|_| bad(i, "std"))?)
                },
            });
        }
        let mut tasks: Vec<String> = cells.iter().filter(|c| c.task != AVG).map(|c| c.task.clone()).collect();
        tasks.sort();
        tasks.dedup();
        let mut table = Self { experiment, tasks, cells };
        table.sort();
        Ok(table)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub generator: GeneratorKind,
    pub lr: f64,
    pub seed: u64,
    pub task: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dispersion {
    pub generator: GeneratorKind,
    pub runs: usize,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

impl Dispersion {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub experiment: String,
    pub runs: Vec<SweepRun>,
    pub dispersion: Vec<Dispersion>,
}

impl SweepReport {
    pub fn from_records(experiment: &str, records: &[RunRecord]) -> Self {
        let mut runs: Vec<SweepRun> = records
            .iter()
            .filter(|r| r.status == RunStatus::Completed)
            .filter_map(|r| {
                Some(SweepRun {
                    generator: r.config.generator,
                    lr: r.config.lr,
                    seed: r.config.seed,
                    task: r.tasks.join("+"),
                    score: r.test_score()?,
                })
            })
            .collect();
        runs.sort_by(|a, b| {
            (a.generator.as_str(), &a.task)
                .cmp(&(b.generator.as_str(), &b.task))
                .then(a.lr.total_cmp(&b.lr))
                .then(a.seed.cmp(&b.seed))
        });
        let mut groups: BTreeMap<&str, Vec<&SweepRun>> = BTreeMap::new();
        for r in &runs {
            groups.entry(r.generator.as_str()).or_default().push(r);
        }
        let dispersion = groups
            .values()
            .map(|g| {
                let scores: Vec<f64> = g.iter().map(|r| r.score).collect();
                let (_, std) = mean_std(&scores);
                Dispersion {
                    generator: g[0].generator,
                    runs: scores.len(),
                    min: scores.iter().copied().fold(f64::INFINITY, f64::min),
                    max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    std: std.unwrap_or(0.0),
                }
            })
            .collect();
        Self {
            experiment: experiment.into(),
            runs,
            dispersion,
        }
    }

    pub fn dispersion_of(&self, g: GeneratorKind) -> Option<&Dispersion> {
        self.dispersion.iter().find(|d| d.generator == g)
    }

    /// Whether `a` is at most as dispersed as `b` in both range and std.
    pub fn less_dispersed(&self, a: GeneratorKind, b: GeneratorKind) -> Option<bool> {
        let (da, db) = (self.dispersion_of(a)?, self.dispersion_of(b)?);
        Some(da.range() <= db.range() && da.std <= db.std)
    }

    /// Plot-ready rows: one `run` row per run, one `dispersion` row per
    /// generator.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,experiment,generator,task,lr,seed,score,runs,min,max,range,std\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "run,{},{},{},{},{},{},,,,,",
                self.experiment, r.generator, r.task, r.lr, r.seed, r.score
            );
        }
        for d in &self.dispersion {
            let _ = writeln!(
                s,
                "dispersion,{},{},,,,,{},{},{},{},{}",
                self.experiment,
                d.generator,
                d.runs,
                d.min,
                d.max,
                d.range(),
                d.std
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {} learning-rate sweep\n\n| generator | lr | seed | score |\n|---|---|---|---|\n", self.experiment);
        for r in &self.runs {
            let _ = writeln!(s, "| {} | {} | {} | {:.2} |", r.generator, r.lr, r.seed, r.score * 100.0);
        }
        s.push_str("\n| generator | runs | range | std |\n|---|---|---|---|\n");
        for d in &self.dispersion {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} |",
                d.generator,
                d.runs,
                d.range() * 100.0,
                d.std * 100.0
            );
        }
        if let Some(holds) = self.less_dispersed(GeneratorKind::LowRank, GeneratorKind::Direct) {
            let _ = writeln!(
                s,
                "\nlowrank dispersion <= direct dispersion (range and std): {}",
                if holds { "yes" } else { "no" }
            );
        }
        s
    }
}

/// Runs the sweep's matrix and writes `lr_sweep.{csv,md}` next to the usual
/// outputs.
pub fn lr_sweep(
    cfg: &ExperimentConfig,
    opts: &MatrixOptions,
    log: &(dyn Fn(&str) + Sync),
) -> Result<(MatrixOutcome, SweepReport)> {
    if cfg.learning_rates().len() < 2 {
        return Err(Error::Config("an lr sweep needs at least two learning rates".into()));
    }
    let outcome = run_matrix(cfg, opts, log)?;
    let report = SweepReport::from_records(&cfg.name, &outcome.records);
    write_atomic(&opts.out.join("lr_sweep.csv"), &report.to_csv())?;
    write_atomic(&opts.out.join("lr_sweep.md"), &report.to_markdown())?;
    Ok((outcome, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::tasks::{Metric, Split};
    use crate::trainer::EvalPoint;

    fn record(g: GeneratorKind, lr: f64, seed: u64, scores: &[(&str, f64)]) -> RunRecord {
        RunRecord {
            experiment: "t".into(),
            config: TrainConfig {
                generator: g,
                lr,
                seed,
                ..TrainConfig::toy()
            },
            lm: LmConfig::default(),
            tasks: scores.iter().map(|(t, _)| t.to_string()).collect(),
            assumed_settings: vec![],
            trainable_parameters: 0,
            losses: vec![1.0],
            evals: vec![],
            best_step: Some(1),
            best_dev: Some(0.5),
            test: scores
                .iter()
                .map(|(t, v)| EvalPoint {
                    step: 1,
                    split: Split::Test,
                    task: t.to_string(),
                    metric: Metric::ExactMatch,
                    value: *v,
                })
                .collect(),
            status: RunStatus::Completed,
            steps_completed: 1,
            wall_clock_secs: 0.0,
            checkpoint: None,
        }
    }

    #[test]
    fn plan_counts() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            name = "m"
            tasks = ["copy"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.plan().len(), 12);
        let multi = ExperimentConfig::from_toml(
            r#"
            name = "m"
            tasks = ["copy", "reverse", "sort-digits"]
            generators = ["direct", "lowrank"]
            [train]
            mode = "multi"
            "#,
        )
        .unwrap();
        assert_eq!(multi.plan().len(), 6);
        assert!(multi.plan()[0].run_id.contains("multi"));
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "name = \"x\"\ntasks = []",
            "name = \"x\"\ntasks = [\"copy\"]\nseeds = []",
            "name = \"x\"\ntasks = [\"nope\"]",
            "name = \"x\"\ntasks = [\"copy\"]\nlrs = [-1.0]",
            "name = \"x\"\ntasks = [\"copy\"]\nbogus = 1",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::from_toml("name = \"x\"\ntasks = [\"copy\"]").unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn single_record_has_no_std() {
        let t = ResultsTable::from_records("t", &[record(GeneratorKind::Direct, 0.1, 0, &[("copy", 0.5)])]);
        assert_eq!(t.cells.len(), 1);
        assert_eq!(t.cells[0].std, None);
        assert!(t.to_markdown().contains("**50.00**"));
        assert!(!t.to_markdown().contains("_{"));
    }

    #[test]
    fn identical_scores_have_zero_std() {
        let recs: Vec<_> = (0..3).map(|s| record(GeneratorKind::Linear, 0.1, s, &[("copy", 0.75)])).collect();
        let t = ResultsTable::from_records("t", &recs);
        assert_eq!(t.cells[0].std, Some(0.0));
        assert!(t.to_markdown().contains("75.00_{0.00}"));
    }

    #[test]
    fn avg_column_and_bold() {
        let recs = vec![
            record(GeneratorKind::Direct, 0.1, 0, &[("a", 0.2), ("b", 0.4)]),
            record(GeneratorKind::LowRank, 0.1, 0, &[("a", 0.6), ("b", 0.4)]),
        ];
        let t = ResultsTable::from_records("t", &recs);
        assert_eq!(t.columns(), vec!["a", "b", AVG]);
        let md = t.to_markdown();
        assert!(md.contains("| lowrank | **60.00** | **40.00** | **50.00** |"), "{md}");
        assert!(md.contains("| direct | 20.00 | **40.00** | 30.00 |"), "{md}");
    }

    #[test]
    fn csv_round_trip_reproduces_markdown() {
        let recs: Vec<_> = (0..3)
            .flat_map(|s| {
                [
                    record(GeneratorKind::Direct, 0.01, s, &[("kv", 0.1 + s as f64 / 7.0)]),
                    record(GeneratorKind::LowRank, 1.0, s, &[("kv", 0.3 / (s as f64 + 1.0))]),
                ]
            })
            .collect();
        let t = ResultsTable::from_records("t", &recs);
        let back = ResultsTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_markdown(), t.to_markdown());
    }

    #[test]
    fn sweep_dispersion() {
        let recs = vec![
            record(GeneratorKind::Direct, 0.01, 0, &[("kv", 0.1)]),
            record(GeneratorKind::Direct, 1.0, 0, &[("kv", 0.9)]),
            record(GeneratorKind::LowRank, 0.01, 0, &[("kv", 0.5)]),
            record(GeneratorKind::LowRank, 1.0, 0, &[("kv", 0.6)]),
        ];
        let rep = SweepReport::from_records("t", &recs);
        assert_eq!(rep.runs.len(), 4);
        assert!((rep.dispersion_of(GeneratorKind::Direct).unwrap().range() - 0.8).abs() < 1e-12);
        assert_eq!(rep.less_dispersed(GeneratorKind::LowRank, GeneratorKind::Direct), Some(true));
        assert!(rep.to_markdown().contains(": yes"));
        assert_eq!(rep.to_csv().lines().filter(|l| l.starts_with("run,")).count(), 4);
    }
}
