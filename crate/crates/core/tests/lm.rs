mod common;

use hyperprompt::autodiff::Tape;
use hyperprompt::lm::{Example, FrozenSeq2SeqLm, LmConfig};
use hyperprompt::optim::{adamw_step, AdamWConfig, AdamWState};
use hyperprompt::pretrain::{marked, PretrainConfig};
use hyperprompt::tasks::{Metric, TaskKind};
use hyperprompt::trainer::{evaluate, loss_and_grads, train, Mode, PromptModel, RunOptions, TrainConfig};
use hyperprompt::generators::GeneratorKind;
use hyperprompt::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_init_nll_is_near_uniform() {
    let lm = FrozenSeq2SeqLm::new(LmConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let task = common::small_task(TaskKind::Copy, 0, 100);
    let mean = task.train.iter().map(|e| lm.nll_value(None, e).unwrap()).sum::<f64>() / 100.0;
    let uniform = (lm.config.vocab_size as f64).ln();
    assert!((mean - uniform).abs() <= 0.2 * uniform, "mean nll {mean} vs ln V {uniform}");
}

#[test]
fn batch_loss_is_the_mean_of_independent_example_losses() {
    let lm = common::random_lm(1);
    let task = common::small_task(TaskKind::Reverse, 1, 6);
    let prompt = Tensor::randn([3, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    let cfg = TrainConfig {
        generator: GeneratorKind::Direct,
        prompt_len: 3,
        ..TrainConfig::toy()
    };
    let mut model = PromptModel::init(&cfg, &lm, std::slice::from_ref(&task)).unwrap();
    model.generator = hyperprompt::generators::PromptGenerator {
        shape: model.generator.shape,
        params: hyperprompt::generators::GeneratorParams::Direct { prompt: prompt.clone() },
    };
    let single: Vec<f64> = task.train.iter().map(|e| lm.nll_value(Some(&prompt), e).unwrap()).collect();
    let batch: Vec<(usize, &Example)> = task.train.iter().map(|e| (0, e)).collect();
    let (loss, _) = loss_and_grads(&lm, &model, &batch).unwrap();
    let mean = single.iter().sum::<f64>() / single.len() as f64;
    assert!((loss - mean).abs() < 1e-12);

    // Reversing the batch or duplicating one example changes nothing per example.
    let reversed: Vec<(usize, &Example)> = batch.iter().rev().copied().collect();
    let (loss_rev, _) = loss_and_grads(&lm, &model, &reversed).unwrap();
    assert!((loss_rev - mean).abs() < 1e-12);
    let mut dup = batch.clone();
    dup.push(batch[0]);
    let (loss_dup, _) = loss_and_grads(&lm, &model, &dup).unwrap();
    let want = (single.iter().sum::<f64>() + single[0]) / (single.len() + 1) as f64;
    assert!((loss_dup - want).abs() < 1e-12);
    for (e, s) in task.train.iter().zip(&single) {
        assert_eq!(lm.nll_value(Some(&prompt), e).unwrap().to_bits(), s.to_bits());
    }
}

#[test]
fn prompt_only_training_lowers_nll() {
    let lm = common::random_lm(3);
    let task = common::small_task(TaskKind::Copy, 2, 8);
    let mut prompt = Tensor::randn([4, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(4));
    let loss = |p: &Tensor| task.train.iter().map(|e| lm.nll_value(Some(p), e).unwrap()).sum::<f64>() / 8.0;
    let before = loss(&prompt);
    let cfg = AdamWConfig {
        lr: 0.05,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new(&[&prompt]);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let w = lm.bind(&mut tape);
        let r = tape.param(prompt.clone());
        let mut total = None;
        for e in &task.train {
            let nll = lm.conditional_nll(&mut tape, &w, Some(r), e).unwrap();
            total = Some(match total {
                None => nll,
                Some(a) => tape.add(a, nll).unwrap(),
            });
        }
        let l = tape.scale(total.unwrap(), 1.0 / 8.0);
        let g = tape.backward(l).unwrap().get(r).cloned();
        adamw_step(&cfg, &mut state, &mut [("prompt", &mut prompt)], &[g]).unwrap();
    }
    let after = loss(&prompt);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_length_prompt_is_the_plain_encoder() {
    let lm = common::random_lm(5);
    let input = [20, 21, 22, 23];
    let run = |prompt: Option<Tensor>| {
        let mut tape = Tape::new();
        let w = lm.bind(&mut tape);
        let p = prompt.map(|t| tape.constant(t));
        let h = lm.encode_with_prompt(&mut tape, &w, p, &input).unwrap();
        tape.value(h).clone()
    };
    let plain = run(None);
    assert_eq!(plain.shape(), &[4, 8]);
    assert!(run(None).bit_eq(&plain));
    assert_eq!(run(Some(Tensor::zeros([3, 8]))).shape(), &[7, 8]);
    // Zero-row prompts are not representable; absence is the n = 0 case.
    assert!(hyperprompt::generators::PromptShape::new(0, 8).is_err());
    let ex = Example::new(input.to_vec(), vec![30, 31]);
    let mut tape = Tape::new();
    let w = lm.bind(&mut tape);
    let nll = lm.conditional_nll(&mut tape, &w, None, &ex).unwrap();
    assert_eq!(tape.value(nll).item().to_bits(), lm.nll_value(None, &ex).unwrap().to_bits());
}

fn toy_run(lm: &FrozenSeq2SeqLm, mode: Mode, steps: u64) -> FrozenSeq2SeqLm {
    let task = common::small_task(TaskKind::Copy, 6, 32);
    let cfg = TrainConfig {
        mode,
        steps,
        eval_every: steps,
        batch_size: 4,
        prompt_len: 2,
        embed_dim: 4,
        generator: GeneratorKind::LowRank,
        lr: 0.01,
        ..TrainConfig::toy()
    };
    train(&cfg, lm, &[task], &RunOptions::default()).unwrap().lm
}

#[test]
fn frozen_weights_survive_training_bit_for_bit() {
    let lm = common::random_lm(7);
    let after = toy_run(&lm, Mode::Single, 100);
    let (a, b) = (lm.weights.named(), after.weights.named());
    assert_eq!(a.len(), b.len());
    for ((na, ta), (_, tb)) in a.iter().zip(&b) {
        assert!(ta.bit_eq(tb), "{na} changed");
    }
}

#[test]
fn unfrozen_weights_move_within_ten_steps() {
    let mut lm = common::random_lm(8);
    lm.unfreeze();
    let after = toy_run(&lm, Mode::FullFinetune, 10);
    let changed = lm
        .weights
        .named()
        .iter()
        .zip(after.weights.named())
        .filter(|((_, a), (_, b))| !a.bit_eq(b))
        .count();
    assert!(changed > 0);
}

#[test]
fn pretrained_lm_copies_marked_inputs() {
    let lm = common::pretrained_lm();
    assert!(lm.is_frozen());
    let marker = PretrainConfig::default().marker_len;
    let task = common::small_task(TaskKind::Copy, 11, 1);
    let examples: Vec<Example> = task.test.iter().map(|e| marked(TaskKind::Copy, e, marker)).collect();
    for e in &examples {
        assert_eq!(e.target, e.input[marker..]);
    }
    let acc = evaluate(lm, None, &examples, Metric::ExactMatch, None, 16).unwrap();
    assert!(acc >= 0.95, "copy accuracy {acc}");
}

#[test]
fn trained_prompt_changes_decoding() {
    let lm = common::pretrained_lm();
    let task = common::small_task(TaskKind::Reverse, 12, 200);
    let cfg = TrainConfig {
        steps: 60,
        eval_every: 60,
        generator: GeneratorKind::Direct,
        ..TrainConfig::toy()
    };
    let out = train(&cfg, lm, std::slice::from_ref(&task), &RunOptions::default()).unwrap();
    let prompt = out.model.prompt(0).unwrap();
    let differs = task.dev.iter().any(|e| {
        lm.greedy_decode(Some(&prompt), &e.input, 16, None).unwrap() != lm.greedy_decode(None, &e.input, 16, None).unwrap()
    });
    assert!(differs);
}
