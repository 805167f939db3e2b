//! Training loop: AdamW over the generator and task embeddings (or every
//! parameter in full-finetune mode), dev evaluation at a fixed cadence,
//! best-dev snapshotting, checkpoint/resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generators::{GeneratorKind, GeneratorSpec, PromptGenerator, PromptShape, TaskEmbedding};
use crate::lm::{Example, FrozenSeq2SeqLm, LabelSet, LmConfig, LmWeights};
use crate::optim::{adamw_step, AdamWConfig, AdamWState, Moments};
use crate::rng::{derive_seed, stream};
use crate::tasks::{Metric, MixerState, MultiTaskMixer, Split, TaskData, TaskKind};
use crate::tensor::Tensor;
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Single,
    Multi,
    FullFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub mode: Mode,
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub generator: GeneratorKind,
    pub rank: usize,
    /// MLP hidden width; `4 * embed_dim` when absent.
    pub hidden: Option<usize>,
    pub max_decode_len: usize,
    /// Stop as soon as the mean dev score reaches this value.
    pub target_dev_score: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            steps: 3000,
            eval_every: 200,
            seed: 0,
            mode: Mode::Single,
            prompt_len: 20,
            embed_dim: 64,
            generator: GeneratorKind::LowRank,
            rank: crate::generators::DEFAULT_RANK,
            hidden: None,
            max_decode_len: 16,
            target_dev_score: None,
        }
    }
}

impl TrainConfig {
    /// The small-model setting: eight prompt tokens, sixteen-wide task
    /// embeddings.
    pub fn toy() -> Self {
        Self {
            prompt_len: 8,
            embed_dim: 16,
            ..Self::default()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            kind: self.generator,
            rank: self.rank,
            hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("steps", self.steps),
            ("eval_every", self.eval_every),
            ("prompt_len", self.prompt_len as u64),
            ("embed_dim", self.embed_dim as u64),
            ("rank", self.rank as u64),
            ("max_decode_len", self.max_decode_len as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden must be positive".into()));
        }
        Ok(())
    }

    /// Settings this lab picks on its own; recorded with every run.
    pub fn assumed_settings(&self) -> Vec<String> {
        let mut out = vec![
            format!("weight_decay={}", self.weight_decay),
            format!("betas=({}, {})", self.beta1, self.beta2),
            format!("eps={}", self.eps),
            format!("batch_size={}", self.batch_size),
            format!("steps={}", self.steps),
            format!("eval_every={}", self.eval_every),
            "lr_schedule=constant".to_string(),
            format!("init=normal(0, {}^2), zero biases", crate::generators::INIT_STD),
            "direct_init=most frequent training tokens, ties to lower id".to_string(),
        ];
        match self.generator {
            GeneratorKind::LowRank => out.push(format!("rank={}", self.rank)),
            GeneratorKind::Mlp => out.push(format!("hidden={}", self.generator_spec().hidden_width(self.embed_dim))),
            _ => {}
        }
        out
    }
}

/// One task's tokenized splits.
#[derive(Clone, Debug)]
pub struct TrainTask {
    pub task_id: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub labels: Option<LabelSet>,
}

impl TrainTask {
    pub fn from_data(data: &TaskData) -> Self {
        let tok = |s: Split| data.split(s).iter().map(|e| e.tokenize()).collect();
        Self {
            task_id: data.spec.task_id.clone(),
            kind: data.spec.kind,
            metric: data.spec.metric,
            train: tok(Split::Train),
            dev: tok(Split::Dev),
            test: tok(Split::Test),
            labels: data.spec.kind.labels().map(|l| LabelSet::new(&l)),
        }
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// The trainable prompt side: one generator plus one embedding per task
/// (none for the direct generator, which ignores them).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptModel {
    pub generator: PromptGenerator,
    pub embeddings: Vec<TaskEmbedding>,
}

impl PromptModel {
    pub fn init(cfg: &TrainConfig, lm: &FrozenSeq2SeqLm, tasks: &[TrainTask]) -> Result<Self> {
        let shape = PromptShape::new(cfg.prompt_len, lm.config.d_model)?;
        let generator = if cfg.generator == GeneratorKind::Direct {
            let seqs = tasks
                .iter()
                .flat_map(|t| &t.train)
                .flat_map(|e| [e.input.as_slice(), e.target.as_slice()]);
            let ids = vocab::most_frequent(seqs, cfg.prompt_len);
            PromptGenerator::direct_from_rows(&lm.weights.embed, &ids, shape)?
        } else {
            PromptGenerator::init(&cfg.generator_spec(), shape, cfg.embed_dim, &mut stream(cfg.seed, &[1]))?
        };
        let embeddings = if cfg.generator == GeneratorKind::Direct {
            Vec::new()
        } else {
            tasks
                .iter()
                .enumerate()
                .map(|(i, t)| TaskEmbedding::init(t.task_id.clone(), cfg.embed_dim, &mut stream(cfg.seed, &[2, i as u64])))
                .collect::<Result<_>>()?
        };
        Ok(Self { generator, embeddings })
    }

    /// The prompt matrix for task `task`.
    pub fn prompt(&self, task: usize) -> Result<Tensor> {
        match self.embeddings.get(task) {
            Some(e) => self.generator.generate_value(e),
            None if self.generator.kind() == GeneratorKind::Direct => {
                let dummy = TaskEmbedding {
                    task_id: String::new(),
                    e: Tensor::zeros([1]),
                };
                self.generator.generate_value(&dummy)
            }
            None => Err(Error::Index {
                what: "task embeddings",
                index: task,
                bound: self.embeddings.len(),
            }),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.generator.visit(&mut |n, t| out.push((n, t)));
        for e in &self.embeddings {
            out.push((format!("embedding.{}", e.task_id), &e.e));
        }
        out
    }

    fn slots(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.generator.visit_mut(&mut |n, t| out.push((n, t)));
        for e in &mut self.embeddings {
            out.push((format!("embedding.{}", e.task_id), &mut e.e));
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Gradients of one batch, ordered like the parameters they belong to.
#[derive(Clone, Debug)]
pub struct Grads {
    pub generator: Vec<Option<Tensor>>,
    pub embeddings: Vec<Option<Tensor>>,
    /// Empty unless the LM is unfrozen.
    pub lm: Vec<Option<Tensor>>,
}

impl Grads {
    fn flatten(self) -> Vec<Option<Tensor>> {
        self.generator.into_iter().chain(self.embeddings).chain(self.lm).collect()
    }
}

/// Mean teacher-forced NLL over `batch` (pairs of task index and example)
/// and its gradients with respect to everything trainable.
pub fn loss_and_grads(lm: &FrozenSeq2SeqLm, model: &PromptModel, batch: &[(usize, &Example)]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut tape = Tape::new();
    let w = lm.bind(&mut tape);
    let generator = model.generator.bind(&mut tape, true);
    let embeddings: Vec<Var> = model.embeddings.iter().map(|e| tape.param(e.e.clone())).collect();

    let mut prompts: Vec<Option<Var>> = Vec::new();
    let mut total = None;
    for &(task, example) in batch {
        if prompts.len() <= task {
            prompts.resize(task + 1, None);
        }
        let r = match prompts[task] {
            Some(r) => r,
            None => {
                let e = if model.generator.kind() == GeneratorKind::Direct {
                    None
                } else {
                    Some(*embeddings.get(task).ok_or(Error::Index {
                        what: "task embeddings",
                        index: task,
                        bound: embeddings.len(),
                    })?)
                };
                let r = generator.generate(&mut tape, e)?;
                prompts[task] = Some(r);
                r
            }
        };
        let nll = lm.conditional_nll(&mut tape, &w, Some(r), example)?;
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;

    let mut gen_vars = Vec::new();
    generator.visit(&mut |_, v| gen_vars.push(*v));
    let mut lm_grads = Vec::new();
    if !lm.is_frozen() {
        w.visit(&mut |_, v| lm_grads.push(grads.get(*v).cloned()));
    }
    Ok((
        value,
        Grads {
            generator: gen_vars.iter().map(|v| grads.get(*v).cloned()).collect(),
            embeddings: embeddings.iter().map(|v| grads.get(*v).cloned()).collect(),
            lm: lm_grads,
        },
    ))
}

/// Greedy-decodes every example and averages the metric.
pub fn evaluate(
    lm: &FrozenSeq2SeqLm,
    prompt: Option<&Tensor>,
    examples: &[Example],
    metric: Metric,
    labels: Option<&LabelSet>,
    max_decode_len: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let out = lm.greedy_decode(prompt, &ex.input, max_decode_len, labels)?;
        total += metric.score(&out, &ex.target);
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub split: Split,
    pub task: String,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub config: TrainConfig,
    pub lm: LmConfig,
    pub tasks: Vec<String>,
    pub assumed_settings: Vec<String>,
    pub trainable_parameters: usize,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: Option<u64>,
    pub best_dev: Option<f64>,
    pub test: Vec<EvalPoint>,
    pub status: RunStatus,
    pub steps_completed: u64,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// Mean test score over tasks, once the run has finished.
    pub fn test_score(&self) -> Option<f64> {
        if self.test.is_empty() {
            return None;
        }
        Some(self.test.iter().map(|p| p.value).sum::<f64>() / self.test.len() as f64)
    }

    pub fn task_test_score(&self, task: &str) -> Option<f64> {
        self.test.iter().find(|p| p.task == task).map(|p| p.value)
    }

    /// Equality ignoring wall-clock time and checkpoint location.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| RunRecord {
            wall_clock_secs: 0.0,
            checkpoint: None,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub experiment: String,
    /// Where `last.ckpt` / `best.ckpt` go; no checkpoints when absent.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` when it exists.
    pub resume: bool,
    /// Stop (without finishing) once this many steps have run; used to
    /// exercise resumption.
    pub interrupt_after: Option<u64>,
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// The best-dev prompt model (the final one if no eval happened).
    pub model: PromptModel,
    /// The LM as it ended up; differs from the input only in full-finetune.
    pub lm: FrozenSeq2SeqLm,
}

#[derive(Clone)]
struct Snapshot {
    model: PromptModel,
    lm: Option<LmWeights<Tensor>>,
}

struct State {
    model: PromptModel,
    lm: FrozenSeq2SeqLm,
    opt: AdamWState,
    mixer: MultiTaskMixer,
    record: RunRecord,
    best: Option<Snapshot>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    record: RunRecord,
    mixer: MixerState,
    opt_step: u64,
    has_best: bool,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn trainable_slots<'a>(model: &'a mut PromptModel, lm: &'a mut FrozenSeq2SeqLm) -> Vec<(String, &'a mut Tensor)> {
    let frozen = lm.is_frozen();
    let mut slots = model.slots();
    if !frozen {
        lm.weights.visit_mut(&mut |n, t| slots.push((n, t)));
    }
    slots
}

impl State {
    fn fresh(cfg: &TrainConfig, lm: &FrozenSeq2SeqLm, tasks: &[TrainTask], experiment: &str) -> Result<Self> {
        let mut lm = lm.clone();
        if cfg.mode == Mode::FullFinetune {
            lm.unfreeze();
        }
        let mut model = PromptModel::init(cfg, &lm, tasks)?;
        let opt = {
            let slots = trainable_slots(&mut model, &mut lm);
            let refs: Vec<&Tensor> = slots.iter().map(|(_, t)| &**t).collect();
            AdamWState::new(&refs)
        };
        let mixer = MultiTaskMixer::new(
            tasks.iter().map(|t| t.train.len()).collect(),
            cfg.batch_size,
            derive_seed(cfg.seed, &[3]),
        )?;
        let record = RunRecord {
            experiment: experiment.to_string(),
            config: cfg.clone(),
            lm: lm.config.clone(),
            tasks: tasks.iter().map(|t| t.task_id.clone()).collect(),
            assumed_settings: cfg.assumed_settings(),
            trainable_parameters: model.trainable_count() + if lm.is_frozen() { 0 } else { lm.weights.parameter_count() },
            losses: Vec::new(),
            evals: Vec::new(),
            best_step: None,
            best_dev: None,
            test: Vec::new(),
            status: RunStatus::Running,
            steps_completed: 0,
            wall_clock_secs: 0.0,
            checkpoint: None,
        };
        Ok(Self {
            model,
            lm,
            opt,
            mixer,
            record,
            best: None,
        })
    }

    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            record: self.record.clone(),
            mixer: self.mixer.state().clone(),
            opt_step: self.opt.step,
            has_best: self.best.is_some(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut ck = Checkpoint::new(self.record.config.seed, json);
        push_model(&mut ck, "", &self.model, (!self.lm.is_frozen()).then_some(&self.lm.weights));
        for (i, m) in self.opt.moments.iter().enumerate() {
            ck.push(format!("adam.m.{i}"), m.m.clone());
            ck.push(format!("adam.v.{i}"), m.v.clone());
        }
        if let Some(b) = &self.best {
            push_model(&mut ck, "best.", &b.model, b.lm.as_ref());
        }
        Ok(ck)
    }

    fn restore(ck: &Checkpoint, cfg: &TrainConfig, lm: &FrozenSeq2SeqLm, tasks: &[TrainTask]) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&ck.config).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if &meta.record.config != cfg {
            return Err(Error::Config("checkpoint was written by a different configuration".into()));
        }
        let mut st = Self::fresh(cfg, lm, tasks, &meta.record.experiment)?;
        let unfrozen = !st.lm.is_frozen();
        load_model(ck, "", &mut st.model, unfrozen.then_some(&mut st.lm.weights))?;
        for (i, m) in st.opt.moments.iter_mut().enumerate() {
            *m = Moments {
                m: ck.get(&format!("adam.m.{i}"))?.clone(),
                v: ck.get(&format!("adam.v.{i}"))?.clone(),
            };
        }
        st.opt.step = meta.opt_step;
        st.mixer = MultiTaskMixer::with_state(
            tasks.iter().map(|t| t.train.len()).collect(),
            cfg.batch_size,
            derive_seed(cfg.seed, &[3]),
            meta.mixer,
        )?;
        if meta.has_best {
            let mut model = st.model.clone();
            let mut weights = unfrozen.then(|| st.lm.weights.clone());
            load_model(ck, "best.", &mut model, weights.as_mut())?;
            st.best = Some(Snapshot { model, lm: weights });
        }
        st.record = meta.record;
        Ok(st)
    }
}

fn push_model(ck: &mut Checkpoint, prefix: &str, model: &PromptModel, lm: Option<&LmWeights<Tensor>>) {
    for (name, t) in model.named() {
        ck.push(format!("{prefix}{name}"), t.clone());
    }
    if let Some(w) = lm {
        for (name, t) in w.named() {
            ck.push(format!("{prefix}{name}"), t.clone());
        }
    }
}

fn load_model(ck: &Checkpoint, prefix: &str, model: &mut PromptModel, lm: Option<&mut LmWeights<Tensor>>) -> Result<()> {
    let mut result = Ok(());
    let mut assign = |name: String, t: &mut Tensor| {
        if result.is_err() {
            return;
        }
        match ck.get(&format!("{prefix}{name}")) {
            Ok(src) if src.shape() == t.shape() => *t = src.clone(),
            Ok(src) => result = Err(Error::dim("checkpoint tensor", src.shape(), t.shape())),
            Err(e) => result = Err(e),
        }
    };
    for (name, t) in model.slots() {
        assign(name, t);
    }
    if let Some(w) = lm {
        w.visit_mut(&mut |name, t| assign(name, t));
    }
    result
}

fn evaluate_split(
    cfg: &TrainConfig,
    lm: &FrozenSeq2SeqLm,
    model: &PromptModel,
    tasks: &[TrainTask],
    split: Split,
    step: u64,
) -> Result<Vec<EvalPoint>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let r = model.prompt(i)?;
            let value = evaluate(lm, Some(&r), t.split(split), t.metric, t.labels.as_ref(), cfg.max_decode_len)?;
            Ok(EvalPoint {
                step,
                split,
                task: t.task_id.clone(),
                metric: t.metric,
                value,
            })
        })
        .collect()
}

fn check_setup(cfg: &TrainConfig, lm: &FrozenSeq2SeqLm, tasks: &[TrainTask]) -> Result<()> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no tasks given".into()));
    }
    if cfg.mode == Mode::Single && tasks.len() != 1 {
        return Err(Error::Config(format!("single mode needs exactly one task, got {}", tasks.len())));
    }
    if cfg.mode != Mode::FullFinetune && !lm.is_frozen() {
        return Err(Error::Config("prompt tuning requires a frozen LM".into()));
    }
    for t in tasks {
        if t.train.is_empty() || t.dev.is_empty() || t.test.is_empty() {
            return Err(Error::Config(format!("task {} has an empty split", t.task_id)));
        }
    }
    Ok(())
}

/// Runs (or resumes) one training run.
pub fn train(cfg: &TrainConfig, lm: &FrozenSeq2SeqLm, tasks: &[TrainTask], opts: &RunOptions) -> Result<TrainOutcome> {
    check_setup(cfg, lm, tasks)?;
    let last_path = opts.checkpoint_dir.as_ref().map(|d| d.join(LAST_CHECKPOINT));
    let best_path = opts.checkpoint_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT));

    let mut st = match &last_path {
        Some(p) if opts.resume && p.exists() => State::restore(&Checkpoint::load(p)?, cfg, lm, tasks)?,
        _ => State::fresh(cfg, lm, tasks, &opts.experiment)?,
    };
    if st.record.status != RunStatus::Running {
        let model = st.best.as_ref().map_or_else(|| st.model.clone(), |b| b.model.clone());
        return Ok(TrainOutcome {
            record: st.record,
            model,
            lm: st.lm,
        });
    }

    let started = Instant::now();
    let clock_before = st.record.wall_clock_secs;
    let optimizer = cfg.optimizer();
    let mut interrupted = false;

    while st.record.steps_completed < cfg.steps {
        if opts.interrupt_after.is_some_and(|n| st.record.steps_completed >= n) {
            interrupted = true;
            break;
        }
        let step = st.record.steps_completed + 1;
        let batch: Vec<(usize, &Example)> = st
            .mixer
            .next_batch()
            .into_iter()
            .map(|(t, i)| (t, &tasks[t].train[i]))
            .collect();
        let (loss, grads) = loss_and_grads(&st.lm, &st.model, &batch)?;
        if !loss.is_finite() {
            st.record.status = RunStatus::Aborted {
                reason: format!("non-finite loss {loss} at step {step}"),
            };
            break;
        }
        let flat = grads.flatten();
        {
            let mut slots = trainable_slots(&mut st.model, &mut st.lm);
            let mut refs: Vec<(&str, &mut Tensor)> = slots.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
            if let Err(e) = adamw_step(&optimizer, &mut st.opt, &mut refs, &flat) {
                st.record.status = RunStatus::Aborted {
                    reason: format!("step {step}: {e}"),
                };
                break;
            }
        }
        st.record.losses.push(loss);
        st.record.steps_completed = step;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let points = evaluate_split(cfg, &st.lm, &st.model, tasks, Split::Dev, step)?;
            let mean = points.iter().map(|p| p.value).sum::<f64>() / points.len() as f64;
            st.record.evals.extend(points);
            if st.record.best_dev.is_none_or(|b| mean > b) {
                st.record.best_dev = Some(mean);
                st.record.best_step = Some(step);
                st.best = Some(Snapshot {
                    model: st.model.clone(),
                    lm: (!st.lm.is_frozen()).then(|| st.lm.weights.clone()),
                });
                if let Some(p) = &best_path {
                    let mut ck = Checkpoint::new(cfg.seed, serde_json::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?);
                    push_model(&mut ck, "", &st.model, (!st.lm.is_frozen()).then_some(&st.lm.weights));
                    ck.save(p)?;
                    st.record.checkpoint = Some(p.clone());
                }
            }
            if let Some(p) = &last_path {
                st.record.wall_clock_secs = clock_before + started.elapsed().as_secs_f64();
                st.to_checkpoint()?.save(p)?;
            }
            if cfg.target_dev_score.is_some_and(|t| mean >= t) {
                break;
            }
        }
    }

    if !interrupted && st.record.status == RunStatus::Running {
        let (model, weights) = match &st.best {
            Some(b) => (b.model.clone(), b.lm.clone()),
            None => (st.model.clone(), None),
        };
        let mut eval_lm = st.lm.clone();
        if let Some(w) = weights {
            eval_lm.weights = w;
        }
        let step = st.record.best_step.unwrap_or(st.record.steps_completed);
        st.record.test = evaluate_split(cfg, &eval_lm, &model, tasks, Split::Test, step)?;
        st.record.status = RunStatus::Completed;
    }
    st.record.wall_clock_secs = clock_before + started.elapsed().as_secs_f64();
    if let Some(p) = &last_path {
        st.to_checkpoint()?.save(p)?;
    }
    let model = st.best.as_ref().map_or_else(|| st.model.clone(), |b| b.model.clone());
    Ok(TrainOutcome {
        record: st.record,
        model,
        lm: st.lm,
    })
}

/// Loads the prompt model stored in a `best.ckpt`.
pub fn load_best(path: &Path, cfg: &TrainConfig, lm: &FrozenSeq2SeqLm, tasks: &[TrainTask]) -> Result<PromptModel> {
    let ck = Checkpoint::load(path)?;
    let mut model = PromptModel::init(cfg, lm, tasks)?;
    load_model(&ck, "", &mut model, None)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_lm() -> FrozenSeq2SeqLm {
        let cfg = LmConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_width: 16,
            max_len: 32,
            ..LmConfig::default()
        };
        FrozenSeq2SeqLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn tiny_task(kind: TaskKind) -> TrainTask {
        let spec = crate::tasks::TaskSpec::new(kind, 4).with_sizes(40, 8, 8);
        TrainTask::from_data(&crate::tasks::generate(&spec).unwrap())
    }

    fn tiny_cfg(kind: GeneratorKind) -> TrainConfig {
        TrainConfig {
            generator: kind,
            prompt_len: 3,
            embed_dim: 4,
            rank: 2,
            batch_size: 4,
            steps: 6,
            eval_every: 3,
            lr: 0.05,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn single_mode_rejects_several_tasks() {
        let lm = tiny_lm();
        let tasks = vec![tiny_task(TaskKind::Copy), tiny_task(TaskKind::Reverse)];
        let err = train(&tiny_cfg(GeneratorKind::Linear), &lm, &tasks, &RunOptions::default()).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unfrozen_lm_rejected_for_prompt_tuning() {
        let mut lm = tiny_lm();
        lm.unfreeze();
        let tasks = vec![tiny_task(TaskKind::Copy)];
        assert!(train(&tiny_cfg(GeneratorKind::Linear), &lm, &tasks, &RunOptions::default()).is_err());
    }

    #[test]
    fn record_tracks_steps_and_best() {
        let lm = tiny_lm();
        let tasks = vec![tiny_task(TaskKind::Copy)];
        let out = train(&tiny_cfg(GeneratorKind::Mlp), &lm, &tasks, &RunOptions::default()).unwrap();
        let r = &out.record;
        assert_eq!(r.status, RunStatus::Completed);
        assert_eq!(r.losses.len(), 6);
        assert_eq!(r.evals.len(), 2);
        let max = r.evals.iter().map(|p| p.value).fold(f64::MIN, f64::max);
        assert_eq!(r.best_dev, Some(max));
        assert_eq!(r.test.len(), 1);
    }

    #[test]
    fn direct_has_no_embeddings() {
        let lm = tiny_lm();
        let tasks = vec![tiny_task(TaskKind::Copy)];
        let m = PromptModel::init(&tiny_cfg(GeneratorKind::Direct), &lm, &tasks).unwrap();
        assert!(m.embeddings.is_empty());
        assert_eq!(m.prompt(0).unwrap().shape(), &[3, 8]);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let lm = tiny_lm();
        assert!(evaluate(&lm, None, &[], Metric::ExactMatch, None, 4).is_err());
    }
}
