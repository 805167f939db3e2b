//! Pretraining the stand-in language model.
//!
//! The model is trained end to end (no prompt) on a mixture of the synthetic
//! tasks. Each input is prefixed with `marker_len` copies of a reserved
//! per-task token, so the inputs sit at the same absolute positions they
//! occupy once a soft prompt of that length replaces the markers.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::lm::{Example, FrozenSeq2SeqLm, LmConfig};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::rng::{derive_seed, stream};
use crate::tasks::{generate, MultiTaskMixer, TaskKind, TaskSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lm: LmConfig,
    pub tasks: Vec<TaskKind>,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub marker_len: usize,
    pub seed: u64,
    pub examples_per_task: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            tasks: TaskKind::ALL.to_vec(),
            steps: 3000,
            lr: 3e-3,
            batch_size: 32,
            marker_len: 8,
            seed: 0,
            examples_per_task: 2000,
        }
    }
}

/// `example` with its input prefixed by the task marker.
pub fn marked(kind: TaskKind, example: &Example, marker_len: usize) -> Example {
    let mut input = vec![kind.marker_token(); marker_len];
    input.extend_from_slice(&example.input);
    Example::new(input, example.target.clone())
}

/// Trains a fresh model and returns it frozen. `progress` sees
/// `(step, loss)` after every update.
pub fn pretrain(cfg: &PretrainConfig, mut progress: impl FnMut(u64, f64)) -> Result<FrozenSeq2SeqLm> {
    if cfg.tasks.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 || cfg.examples_per_task == 0 {
        return Err(Error::Config(format!("degenerate pretraining config: {cfg:?}")));
    }
    let mut lm = FrozenSeq2SeqLm::new(cfg.lm.clone(), &mut stream(cfg.seed, &[0x1a]))?;
    lm.unfreeze();
    let corpus: Vec<Vec<Example>> = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let spec = TaskSpec::new(kind, derive_seed(cfg.seed, &[0x1b, i as u64])).with_sizes(cfg.examples_per_task, 1, 1);
            let data = generate(&spec)?;
            Ok(data.train.iter().map(|e| marked(kind, &e.tokenize(), cfg.marker_len)).collect())
        })
        .collect::<Result<_>>()?;
    let mut mixer = MultiTaskMixer::new(
        corpus.iter().map(Vec::len).collect(),
        cfg.batch_size,
        derive_seed(cfg.seed, &[0x1c]),
    )?;
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = {
        let named = lm.weights.named();
        AdamWState::new(&named.iter().map(|(_, t)| *t).collect::<Vec<&Tensor>>())
    };
    for step in 1..=cfg.steps {
        let batch = mixer.next_batch();
        let mut tape = Tape::new();
        let w = lm.bind(&mut tape);
        let mut total = None;
        for &(t, i) in &batch {
            let nll = lm.conditional_nll(&mut tape, &w, None, &corpus[t][i])?;
            total = Some(match total {
                None => nll,
                Some(acc) => tape.add(acc, nll)?,
            });
        }
        let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let mut flat = Vec::new();
        w.visit(&mut |_, v| flat.push(grads.get(*v).cloned()));
        let mut slots = Vec::new();
        lm.weights.visit_mut(&mut |n, t| slots.push((n, t)));
        let mut refs: Vec<(&str, &mut Tensor)> = slots.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        adamw_step(&opt, &mut state, &mut refs, &flat)?;
        progress(step, value);
    }
    lm.freeze();
    Ok(lm)
}
