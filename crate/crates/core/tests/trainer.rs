mod common;

use hyperprompt::generators::GeneratorKind;
use hyperprompt::lm::Example;
use hyperprompt::optim::{adamw_step, AdamWConfig, AdamWState};
use hyperprompt::tasks::{MultiTaskMixer, Metric, Split, TaskKind};
use hyperprompt::trainer::{
    evaluate, loss_and_grads, train, Mode, PromptModel, RunOptions, RunStatus, TrainConfig, TrainTask,
};
use hyperprompt::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adamw_first_step_closed_form() {
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut p = Tensor::scalar(1.0);
    let mut st = AdamWState::new(&[&p]);
    adamw_step(&cfg, &mut st, &mut [("p", &mut p)], &[Some(Tensor::scalar(1.0))]).unwrap();
    assert!((p.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let mut p = Tensor::scalar(3.0);
    let mut st = AdamWState::new(&[&p]);
    adamw_step(&cfg, &mut st, &mut [("p", &mut p)], &[Some(Tensor::scalar(0.0))]).unwrap();
    assert!((p.item() - 0.99 * 3.0).abs() < 1e-15);
}

#[test]
fn adamw_names_the_non_finite_parameter() {
    let mut a = Tensor::zeros([2]);
    let mut b = Tensor::zeros([2]);
    let mut st = AdamWState::new(&[&a, &b]);
    let grads = [Some(Tensor::zeros([2])), Some(Tensor::vector(vec![1.0, f64::NAN]))];
    let err = adamw_step(&AdamWConfig::default(), &mut st, &mut [("a", &mut a), ("b.weight", &mut b)], &grads).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("b.weight"), "{err}");
    assert!(a.data().iter().all(|&x| x == 0.0), "no partial update");
}

#[test]
fn adamw_solves_a_convex_quadratic() {
    // f(x) = 1/2 sum a_i (x_i - c_i)^2
    let a = [1.0, 3.0, 0.5, 2.0];
    let c = [0.7, -1.2, 0.3, 2.0];
    let loss = |x: &Tensor| x.data().iter().zip(a.iter().zip(&c)).map(|(x, (a, c))| 0.5 * a * (x - c).powi(2)).sum::<f64>();
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut x = Tensor::zeros([4]);
    let mut st = AdamWState::new(&[&x]);
    for _ in 0..200 {
        let g = Tensor::vector(x.data().iter().zip(a.iter().zip(&c)).map(|(x, (a, c))| a * (x - c)).collect());
        adamw_step(&cfg, &mut st, &mut [("x", &mut x)], &[Some(g)]).unwrap();
    }
    assert!(loss(&x) < 1e-6, "loss {}", loss(&x));
}

/// Element-by-element textbook AdamW with decoupled decay.
fn reference_step(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, c: &AdamWConfig) {
    for i in 0..p.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let mh = m[i] / (1.0 - c.beta1.powi(t));
        let vh = v[i] / (1.0 - c.beta2.powi(t));
        p[i] = p[i] * (1.0 - c.lr * c.weight_decay) - c.lr * mh / (vh.sqrt() + c.eps);
    }
}

#[test]
fn adamw_matches_slow_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = AdamWConfig {
        lr: 0.03,
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let mut p1 = Tensor::randn([3, 4], 1.0, &mut rng);
    let mut p2 = Tensor::randn([5], 1.0, &mut rng);
    let mut ref1 = p1.data().to_vec();
    let mut ref2 = p2.data().to_vec();
    let (mut m1, mut v1, mut m2, mut v2) = (vec![0.0; 12], vec![0.0; 12], vec![0.0; 5], vec![0.0; 5]);
    let mut st = AdamWState::new(&[&p1, &p2]);
    for t in 1..=50 {
        let g1 = Tensor::randn([3, 4], rng.random_range(0.1..3.0), &mut rng);
        let g2 = Tensor::randn([5], 1.0, &mut rng);
        reference_step(&mut ref1, &mut m1, &mut v1, g1.data(), t, &cfg);
        reference_step(&mut ref2, &mut m2, &mut v2, g2.data(), t, &cfg);
        adamw_step(&cfg, &mut st, &mut [("a", &mut p1), ("b", &mut p2)], &[Some(g1), Some(g2)]).unwrap();
        for (x, y) in p1.data().iter().zip(&ref1).chain(p2.data().iter().zip(&ref2)) {
            assert!((x - y).abs() <= 1e-12, "step {t}: {x} vs {y}");
        }
    }
}

fn tiny_cfg(generator: GeneratorKind, mode: Mode, steps: u64) -> TrainConfig {
    TrainConfig {
        generator,
        mode,
        steps,
        eval_every: 5,
        batch_size: 6,
        prompt_len: 2,
        embed_dim: 4,
        lr: 0.05,
        max_decode_len: 8,
        ..TrainConfig::toy()
    }
}

#[test]
fn fixed_seed_runs_are_identical() {
    let lm = common::random_lm(10);
    let tasks = [common::small_task(TaskKind::SortDigits, 1, 24)];
    let cfg = tiny_cfg(GeneratorKind::Mlp, Mode::Single, 12);
    let a = train(&cfg, &lm, &tasks, &RunOptions::default()).unwrap().record;
    let b = train(&cfg, &lm, &tasks, &RunOptions::default()).unwrap().record;
    assert!(a.same_results(&b));
    assert_eq!(a.losses.len(), 12);
    let c = train(&TrainConfig { seed: 1, ..cfg }, &lm, &tasks, &RunOptions::default()).unwrap().record;
    assert!(!a.same_results(&c));
}

#[test]
fn forced_quota_leaves_absent_task_embedding_untouched() {
    let lm = common::random_lm(11);
    let tasks: Vec<TrainTask> = [TaskKind::Copy, TaskKind::Reverse, TaskKind::SortDigits]
        .iter()
        .enumerate()
        .map(|(i, &k)| common::small_task(k, i as u64, 10))
        .collect();
    let cfg = tiny_cfg(GeneratorKind::LowRank, Mode::Multi, 1);
    let mut model = PromptModel::init(&cfg, &lm, &tasks).unwrap();
    let before = model.clone();
    let mut mixer = MultiTaskMixer::new(tasks.iter().map(|t| t.train.len()).collect(), 6, 0).unwrap();
    let batch: Vec<(usize, &Example)> = mixer
        .next_batch_with_quota(&[3, 3, 0])
        .into_iter()
        .map(|(t, i)| (t, &tasks[t].train[i]))
        .collect();
    let (_, grads) = loss_and_grads(&lm, &model, &batch).unwrap();
    assert!(grads.embeddings[2].is_none());

    let flat: Vec<Option<Tensor>> = grads.generator.iter().chain(&grads.embeddings).cloned().collect();
    let mut slots: Vec<(String, &mut Tensor)> = Vec::new();
    model.generator.visit_mut(&mut |n, t| slots.push((n, t)));
    for e in &mut model.embeddings {
        slots.push((e.task_id.clone(), &mut e.e));
    }
    let refs: Vec<&Tensor> = slots.iter().map(|(_, t)| &**t).collect();
    let mut st = AdamWState::new(&refs);
    let mut named: Vec<(&str, &mut Tensor)> = slots.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    adamw_step(&cfg.optimizer(), &mut st, &mut named, &flat).unwrap();

    assert!(model.embeddings[2].e.bit_eq(&before.embeddings[2].e));
    assert!(!model.embeddings[0].e.bit_eq(&before.embeddings[0].e));
    assert!(!model.embeddings[1].e.bit_eq(&before.embeddings[1].e));
}

#[test]
fn exactly_the_prompt_side_is_updated() {
    let lm = common::random_lm(12);
    let tasks = vec![common::small_task(TaskKind::Copy, 3, 20), common::small_task(TaskKind::Reverse, 4, 20)];
    for kind in GeneratorKind::ALL {
        let cfg = tiny_cfg(kind, Mode::Multi, 10);
        let init = PromptModel::init(&cfg, &lm, &tasks).unwrap();
        let out = train(&cfg, &lm, &tasks, &RunOptions::default()).unwrap();
        for ((name, a), (_, b)) in lm.weights.named().iter().zip(out.lm.weights.named()) {
            assert_eq!(a.l2_norm().to_bits(), b.l2_norm().to_bits(), "{name}");
            assert!(a.bit_eq(b), "{name}");
        }
        let moved = init
            .named()
            .iter()
            .zip(out.model.named())
            .filter(|((_, a), (_, b))| !a.bit_eq(b))
            .count();
        assert_eq!(moved, init.named().len(), "{kind}: every prompt-side tensor trains");
        assert_eq!(out.record.trainable_parameters, init.trainable_count());
    }
}

#[test]
fn best_dev_is_the_maximum_eval() {
    let lm = common::random_lm(13);
    let tasks = [common::small_task(TaskKind::Copy, 5, 30)];
    let cfg = TrainConfig {
        eval_every: 3,
        ..tiny_cfg(GeneratorKind::Direct, Mode::Single, 30)
    };
    let rec = train(&cfg, &lm, &tasks, &RunOptions::default()).unwrap().record;
    let dev: Vec<f64> = rec.evals.iter().filter(|e| e.split == Split::Dev).map(|e| e.value).collect();
    assert_eq!(dev.len(), 10);
    let max = dev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(rec.best_dev, Some(max));
    let first_best = rec.evals.iter().find(|e| e.split == Split::Dev && e.value == max).unwrap().step;
    assert_eq!(rec.best_step, Some(first_best));
    assert_eq!(rec.status, RunStatus::Completed);
    assert!(!rec.test.is_empty());
}

#[test]
fn untrained_parity_is_near_chance() {
    let lm = common::random_lm(14);
    let task = common::small_task(TaskKind::ParityClassify, 6, 200);
    let labels = task.labels.clone().unwrap();
    let acc = evaluate(&lm, None, &task.train, task.metric, Some(&labels), 4).unwrap();
    assert!((0.3..=0.7).contains(&acc), "accuracy {acc}");
}

#[test]
fn perfect_and_sentinel_scores() {
    let task = common::small_task(TaskKind::Copy, 7, 10);
    for metric in [Metric::ExactMatch, Metric::TokenAccuracy] {
        let perfect: f64 = task.dev.iter().map(|e| metric.score(&e.input, &e.target)).sum::<f64>() / 20.0;
        assert_eq!(perfect, 1.0);
        let sentinel: f64 = task.dev.iter().map(|e| metric.score(&vec![0; e.target.len()], &e.target)).sum::<f64>() / 20.0;
        assert_eq!(sentinel, 0.0);
    }
    let lm = common::random_lm(15);
    assert!(matches!(
        evaluate(&lm, None, &[], Metric::ExactMatch, None, 4),
        Err(Error::Config(_))
    ));
}

#[test]
fn nan_weights_abort_but_still_report() {
    let mut lm = common::random_lm(16);
    for d in lm.weights.embed.data_mut().iter_mut() {
        *d = f64::NAN;
    }
    let tasks = [common::small_task(TaskKind::Copy, 8, 10)];
    let out = train(&tiny_cfg(GeneratorKind::LowRank, Mode::Single, 5), &lm, &tasks, &RunOptions::default()).unwrap();
    assert!(matches!(out.record.status, RunStatus::Aborted { .. }), "{:?}", out.record.status);
    assert_eq!(out.record.steps_completed, 0);
    assert!(out.record.test.is_empty());
}

#[test]
fn setup_errors() {
    let lm = common::random_lm(17);
    let two = [common::small_task(TaskKind::Copy, 1, 5), common::small_task(TaskKind::Reverse, 1, 5)];
    let cfg = tiny_cfg(GeneratorKind::LowRank, Mode::Single, 1);
    assert!(matches!(train(&cfg, &lm, &two, &RunOptions::default()), Err(Error::Config(_))));
    let mut open = lm.clone();
    open.unfreeze();
    assert!(matches!(train(&cfg, &open, &two[..1], &RunOptions::default()), Err(Error::Config(_))));
    let bad = TrainConfig { lr: 0.0, ..cfg };
    assert!(matches!(train(&bad, &lm, &two[..1], &RunOptions::default()), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixer_quota_fairness_and_epoch_coverage(
        sizes in prop::collection::vec(1usize..12, 1..5),
        batch in 1usize..20,
        seed in any::<u64>(),
    ) {
        let t = sizes.len();
        let mut mixer = MultiTaskMixer::new(sizes.clone(), batch, seed).unwrap();
        let (lo, hi) = (batch / t, batch.div_ceil(t));
        let mut drawn: Vec<Vec<usize>> = vec![Vec::new(); t];
        let mut totals = vec![0usize; t];
        let max_size = *sizes.iter().max().unwrap();
        let batches = 3 * max_size * t / batch.max(1) + 3 * t;
        for _ in 0..batches {
            let mut counts = vec![0usize; t];
            for (task, i) in mixer.next_batch() {
                prop_assert!(i < sizes[task]);
                counts[task] += 1;
                drawn[task].push(i);
            }
            for (c, total) in counts.iter().zip(totals.iter_mut()) {
                prop_assert!(*c == lo || *c == hi, "count {} outside [{}, {}]", c, lo, hi);
                *total += c;
            }
            let spread = totals.iter().max().unwrap() - totals.iter().min().unwrap();
            prop_assert!(spread <= 1, "cumulative totals {:?}", totals);
        }
        for (task, seq) in drawn.iter().enumerate() {
            for epoch in seq.chunks_exact(sizes[task]) {
                let mut e = epoch.to_vec();
                e.sort_unstable();
                prop_assert_eq!(e, (0..sizes[task]).collect::<Vec<_>>());
            }
        }
    }
}
