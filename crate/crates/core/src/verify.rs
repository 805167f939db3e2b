//! Finite-difference audit of every differentiable primitive, every
//! generator, and the prompt gradient through the LM.
//!
//! Each check projects the op's output onto fixed random weights,
//! `L = Σ w ⊙ op(inputs)`, so no gradient is trivially zero, and compares
//! the tape gradient of `L` for each input with central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::generators::{GeneratorKind, GeneratorSpec, PromptGenerator, PromptShape, TaskEmbedding};
use crate::gradcheck::{finite_difference_grad, relative_error, DEFAULT_STEP};
use crate::lm::{Example, FrozenSeq2SeqLm, LmConfig};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Primitive or component under test.
    pub name: String,
    /// Shapes of all inputs, e.g. `[3, 4]x[4, 2]`.
    pub shapes: String,
    /// Which input the gradient was taken for.
    pub input: usize,
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error <= TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Gradient check of `build` with respect to each of `inputs`.
pub fn check_op(name: &str, inputs: &[Tensor], build: &Build<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Tensor::randn(tape.value(out).shape().to_vec(), 1.0, rng)
    };
    let project = |tape: &mut Tape, out: Var| -> Result<Var> {
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };
    let shapes = inputs.iter().map(|t| format!("{:?}", t.shape())).collect::<Vec<_>>().join("x");

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut results = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x);
        let numeric = finite_difference_grad(
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut tape, &vars)?;
                let loss = project(&mut tape, out)?;
                Ok(tape.value(loss).item())
            },
            x,
            DEFAULT_STEP,
        )?;
        results.push(GradCheck {
            name: name.to_string(),
            shapes: shapes.clone(),
            input: i,
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(results)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn ids(n: usize, bound: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..bound)).collect()
}

/// Every primitive on three shapes each.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, &[0x7e57]);
    let rng = &mut rng;
    let mut out = Vec::new();
    let mats: [(usize, usize, usize); 3] = [(3, 4, 2), (1, 5, 3), (4, 2, 6)];
    for &(m, p, q) in &mats {
        let (a, b) = (randn(&[m, p], rng), randn(&[p, q], rng));
        out.extend(check_op("matmul", &[a, b], &|t, v| t.matmul(v[0], v[1]), rng)?);
        let (a, b) = (randn(&[m, p], rng), randn(&[q, p], rng));
        out.extend(check_op("matmul_nt", &[a, b], &|t, v| t.matmul_nt(v[0], v[1]), rng)?);
    }
    let shapes: [&[usize]; 3] = [&[2, 3], &[5], &[3, 1, 4]];
    for s in shapes {
        let (a, b) = (randn(s, rng), randn(s, rng));
        out.extend(check_op("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), rng)?);
        out.extend(check_op("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]), rng)?);
        out.extend(check_op("mul", &[a.clone(), b], &|t, v| t.mul(v[0], v[1]), rng)?);
        out.extend(check_op("scale", std::slice::from_ref(&a), &|t, v| Ok(t.scale(v[0], -1.7)), rng)?);
        out.extend(check_op("gelu", &[a.map(|x| 2.0 * x)], &|t, v| Ok(t.gelu(v[0])), rng)?);
        out.extend(check_op("sum", std::slice::from_ref(&a), &|t, v| Ok(t.sum(v[0])), rng)?);
        out.extend(check_op("mean", &[a], &|t, v| Ok(t.mean(v[0])), rng)?);
    }
    for &(r, c) in &[(2, 3), (4, 4), (1, 6)] {
        let x = randn(&[r, c], rng);
        out.extend(check_op("add_row", &[x.clone(), randn(&[c], rng)], &|t, v| t.add_row(v[0], v[1]), rng)?);
        out.extend(check_op("softmax", std::slice::from_ref(&x), &|t, v| t.softmax(v[0], false), rng)?);
        out.extend(check_op("transpose", std::slice::from_ref(&x), &|t, v| t.transpose(v[0]), rng)?);
        out.extend(check_op("reshape", std::slice::from_ref(&x), &|t, v| t.reshape(v[0], &[c, r]), rng)?);
        out.extend(check_op(
            "layer_norm",
            &[x.clone(), randn(&[c], rng), randn(&[c], rng)],
            &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
            rng,
        )?);
        let targets = ids(r, c, rng);
        out.extend(check_op(
            "softmax_cross_entropy",
            std::slice::from_ref(&x),
            &|t, v| t.softmax_cross_entropy(v[0], &targets),
            rng,
        )?);
        let y = randn(&[r + 1, c], rng);
        out.extend(check_op("concat_rows", &[x.clone(), y], &|t, v| t.concat_rows(&[v[0], v[1]]), rng)?);
        let z = randn(&[r, c + 2], rng);
        out.extend(check_op("concat_cols", &[x, z], &|t, v| t.concat_cols(&[v[0], v[1]]), rng)?);
    }
    for n in [3, 4, 6] {
        let x = randn(&[n, n], rng);
        out.extend(check_op("softmax_causal", &[x], &|t, v| t.softmax(v[0], true), rng)?);
    }
    for &(vocab, d, len) in &[(5, 3, 4), (8, 2, 8), (3, 4, 2)] {
        let table = randn(&[vocab, d], rng);
        let picks = ids(len, vocab, rng);
        out.extend(check_op("embedding", &[table], &|t, v| t.embedding(v[0], &picks), rng)?);
    }
    Ok(out)
}

/// Each generator with respect to every parameter and the task embedding,
/// on three `(n, d, k)` shapes.
pub fn generator_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, &[0x6e6e]);
    let mut out = Vec::new();
    for &(n, d, k) in &[(2, 3, 4), (4, 8, 16), (3, 2, 5)] {
        let shape = PromptShape::new(n, d)?;
        for kind in GeneratorKind::ALL {
            let spec = GeneratorSpec {
                kind,
                rank: 2,
                hidden: Some(2 * k),
            };
            let mut g = PromptGenerator::init(&spec, shape, k, &mut rng)?;
            // Larger than the default init so GeLU curvature and biases matter.
            g.visit_mut(&mut |_, t| *t = Tensor::randn(t.shape().to_vec(), 0.5, &mut rng));
            let e = TaskEmbedding::init("t", k, &mut rng)?.e.map(|x| x * 25.0);
            let mut names = Vec::new();
            let mut inputs = Vec::new();
            g.visit(&mut |name, t| {
                names.push(name);
                inputs.push(t.clone());
            });
            inputs.push(e);
            let count = names.len();
            let template = g.clone();
            let build = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
                let mut i = 0;
                let bound = template.map(&mut |_| {
                    i += 1;
                    v[i - 1]
                });
                bound.generate(tape, Some(v[count]))
            };
            out.extend(check_op(&format!("generator.{kind}"), &inputs, &build, &mut rng)?);
        }
    }
    Ok(out)
}

/// Prompt gradient through a two-layer LM, plus a two-layer MLP loss.
pub fn model_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, &[0x1a1a]);
    let mut out = Vec::new();
    let cfg = LmConfig {
        vocab_size: 16,
        d_model: 8,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        ff_width: 12,
        max_len: 16,
    };
    let lm = FrozenSeq2SeqLm::new(cfg, &mut rng)?;
    for &(n, len) in &[(1, 3), (2, 4), (3, 2)] {
        let prompt = randn(&[n, 8], &mut rng);
        let ex = Example::new(ids(len, 16, &mut rng), ids(2, 16, &mut rng));
        let build = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let w = lm.weights.map(&mut |t| tape.constant(t.clone()));
            lm.conditional_nll(tape, &w, Some(v[0]), &ex)
        };
        out.extend(check_op("lm.prompt", &[prompt], &build, &mut rng)?);
    }
    for &(b, i, h, o) in &[(2, 3, 5, 2), (4, 2, 3, 3), (1, 6, 4, 5)] {
        let inputs = [
            randn(&[b, i], &mut rng),
            randn(&[i, h], &mut rng),
            randn(&[h], &mut rng),
            randn(&[h, o], &mut rng),
            randn(&[o], &mut rng),
        ];
        let targets = ids(b, o, &mut rng);
        let build = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let x = tape.matmul(v[0], v[1])?;
            let x = tape.add_row(x, v[2])?;
            let x = tape.gelu(x);
            let x = tape.matmul(x, v[3])?;
            let x = tape.add_row(x, v[4])?;
            tape.softmax_cross_entropy(x, &targets)
        };
        out.extend(check_op("mlp2", &inputs, &build, &mut rng)?);
    }
    Ok(out)
}

pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = primitive_checks(seed)?;
    all.extend(generator_checks(seed)?);
    all.extend(model_checks(seed)?);
    Ok(all)
}
