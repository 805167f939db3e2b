#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use hyperprompt::autodiff::Tape;
use hyperprompt::checkpoint::Checkpoint;
use hyperprompt::experiments::ensure_lm;
use hyperprompt::generators::{GeneratorParams, PromptGenerator};
use hyperprompt::lm::{Example, FrozenSeq2SeqLm, LmConfig};
use hyperprompt::pretrain::PretrainConfig;
use hyperprompt::tasks::{generate, TaskKind, TaskSpec};
use hyperprompt::trainer::TrainTask;
use hyperprompt::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Directory holding the shared pretrained LM; reused across test binaries.
pub fn lm_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pretrained-lm")
}

/// The default-size LM after the default pretraining recipe.
pub fn pretrained_lm() -> &'static FrozenSeq2SeqLm {
    static LM: OnceLock<FrozenSeq2SeqLm> = OnceLock::new();
    LM.get_or_init(|| {
        let dir = lm_dir();
        std::fs::create_dir_all(&dir).unwrap();
        ensure_lm(&dir, &PretrainConfig::default(), |_, _| {}).expect("pretraining")
    })
}

/// Copies the cached LM into `out` so experiment runs there reuse it.
pub fn seed_lm_into(out: &std::path::Path) {
    pretrained_lm();
    std::fs::create_dir_all(out).unwrap();
    for f in ["lm.ckpt", "pretrain.json"] {
        std::fs::copy(lm_dir().join(f), out.join(f)).unwrap();
    }
    let _ = Checkpoint::load(&out.join("lm.ckpt")).unwrap();
}

/// Randomly initialized small LM (not pretrained).
pub fn random_lm(seed: u64) -> FrozenSeq2SeqLm {
    let cfg = LmConfig {
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_width: 16,
        max_len: 48,
        ..LmConfig::default()
    };
    FrozenSeq2SeqLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn small_task(kind: TaskKind, seed: u64, train: usize) -> TrainTask {
    let spec = TaskSpec::new(kind, seed).with_sizes(train, 20, 20);
    TrainTask::from_data(&generate(&spec).unwrap())
}

/// Trains a direct prompt and its reduced linear form side by side with
/// plain gradient descent (the reduced form only updates its bias) and
/// returns the largest elementwise gap between the two prompts seen over
/// `steps` steps.
pub fn reduced_form_trajectory_gap(steps: usize, lr: f64) -> f64 {
    let lm = random_lm(21);
    let task = small_task(TaskKind::Reverse, 3, 64);
    let r0 = Tensor::randn([4, lm.config.d_model], 0.5, &mut ChaCha8Rng::seed_from_u64(5));
    let mut direct = r0.clone();
    let (mut reduced, e) = PromptGenerator::standard_from_prompt(&r0).unwrap();
    let mut worst: f64 = 0.0;
    for step in 0..steps {
        let batch: Vec<&Example> = (0..4).map(|i| &task.train[(step * 4 + i) % task.train.len()]).collect();
        let loss_of = |tape: &mut Tape, r| {
            let w = lm.bind(tape);
            let mut total = None;
            for ex in &batch {
                let nll = lm.conditional_nll(tape, &w, Some(r), ex).unwrap();
                total = Some(match total {
                    None => nll,
                    Some(a) => tape.add(a, nll).unwrap(),
                });
            }
            tape.scale(total.unwrap(), 0.25)
        };
        // Direct prompt.
        let mut tape = Tape::new();
        let r = tape.param(direct.clone());
        let loss = loss_of(&mut tape, r);
        let g = tape.backward(loss).unwrap().get(r).unwrap().clone();
        for (p, gi) in direct.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * gi;
        }
        // Reduced form: W and e are frozen leaves, b trains.
        let mut tape = Tape::new();
        let (weight, bias) = match &reduced.params {
            GeneratorParams::Linear { weight, bias } => (weight.clone(), bias.clone()),
            _ => unreachable!(),
        };
        let bound = PromptGenerator {
            shape: reduced.shape,
            params: GeneratorParams::Linear {
                weight: tape.constant(weight),
                bias: tape.param(bias),
            },
        };
        let ev = tape.constant(e.e.clone());
        let r = bound.generate(&mut tape, Some(ev)).unwrap();
        let loss = loss_of(&mut tape, r);
        let grads = tape.backward(loss).unwrap();
        let GeneratorParams::Linear { bias: bv, .. } = bound.params else { unreachable!() };
        let gb = grads.get(bv).unwrap().clone();
        if let GeneratorParams::Linear { bias, .. } = &mut reduced.params {
            for (p, gi) in bias.data_mut().iter_mut().zip(gb.data()) {
                *p -= lr * gi;
            }
        }
        let generated = reduced.generate_value(&e).unwrap();
        worst = worst.max(generated.max_abs_diff(&direct));
    }
    worst
}

/// Closed-form trainable-parameter count.
pub fn closed_form_count(kind: hyperprompt::generators::GeneratorKind, n: usize, d: usize, k: usize, r: usize, h: usize) -> usize {
    use hyperprompt::generators::GeneratorKind::*;
    let nd = n * d;
    match kind {
        Direct => nd,
        Linear => nd * k + nd,
        LowRank => nd * r + r * k + nd,
        Mlp => h * k + h + nd * h + nd,
    }
}

/// An experiment small enough to pretrain and train in seconds.
pub fn tiny_experiment(name: &str) -> hyperprompt::experiments::ExperimentConfig {
    use hyperprompt::experiments::{DataConfig, ExperimentConfig};
    use hyperprompt::pretrain::PretrainConfig;
    use hyperprompt::trainer::TrainConfig;
    let lm = LmConfig {
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_width: 16,
        max_len: 48,
        ..LmConfig::default()
    };
    ExperimentConfig {
        name: name.into(),
        tasks: vec![TaskKind::Copy],
        seeds: vec![0, 1, 2],
        generators: hyperprompt::generators::GeneratorKind::ALL.to_vec(),
        lrs: vec![],
        data: DataConfig {
            seed: 3,
            train_size: 24,
            dev_size: 8,
            test_size: 8,
        },
        train: TrainConfig {
            steps: 6,
            eval_every: 3,
            batch_size: 4,
            prompt_len: 2,
            embed_dim: 4,
            max_decode_len: 10,
            ..TrainConfig::toy()
        },
        pretrain: PretrainConfig {
            lm,
            steps: 10,
            batch_size: 8,
            marker_len: 2,
            examples_per_task: 32,
            ..PretrainConfig::default()
        },
    }
}
