//! Prompt generators: hypernetworks mapping a task embedding to the soft
//! prompt matrix prepended to the frozen model's input.
//!
//! Four architectures share one interface:
//!
//! | kind      | output                              | trainable scalars          |
//! |-----------|-------------------------------------|----------------------------|
//! | `direct`  | the stored `n×d` prompt, verbatim   | `nd`                       |
//! | `linear`  | `M(W·e + b)`                        | `nd·k + nd`                |
//! | `lowrank` | `M(C·F·e + b)`, `rank(C·F) ≤ r`     | `nd·r + r·k + nd`          |
//! | `mlp`     | `M(W2·gelu(W1·e + b1) + b2)`        | `h·k + h + nd·h + nd`      |
//!
//! `M` is row-major matricization: row `i` of the prompt is
//! `v[i·d .. (i+1)·d]`.
//!
//! Generators are generic over their parameter storage so the same structure
//! holds owned tensors ([`PromptGenerator<Tensor>`]) or handles bound onto a
//! tape ([`PromptGenerator<Var>`]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation used for every randomly initialized generator weight
/// and task embedding.
pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 8;

/// Prompt length `n` and model width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptShape {
    pub n: usize,
    pub d: usize,
}

impl PromptShape {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Config(format!("prompt shape must be positive, got n={n}, d={d}")));
        }
        Ok(Self { n, d })
    }

    pub fn flat_len(&self) -> usize {
        self.n * self.d
    }
}

/// Reshapes a length-`nd` vector into the row-major `n×d` prompt matrix.
pub fn matricize(v: &Tensor, shape: PromptShape) -> Result<Tensor> {
    if v.numel() != shape.flat_len() {
        return Err(Error::dim("matricize", v.shape(), &[shape.n, shape.d]));
    }
    v.reshape([shape.n, shape.d])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Direct,
    Linear,
    LowRank,
    Mlp,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 4] = [
        GeneratorKind::Direct,
        GeneratorKind::Linear,
        GeneratorKind::LowRank,
        GeneratorKind::Mlp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GeneratorKind::Direct => "direct",
            GeneratorKind::Linear => "linear",
            GeneratorKind::LowRank => "lowrank",
            GeneratorKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator kind {s:?}")))
    }
}

/// Architecture choice plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Inner dimension `r` of the low-rank factorization.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Hidden width `h` of the MLP; `None` means `4·k`.
    #[serde(default)]
    pub hidden: Option<usize>,
}

fn default_rank() -> usize {
    DEFAULT_RANK
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        Self {
            kind,
            rank: DEFAULT_RANK,
            hidden: None,
        }
    }

    pub fn hidden_width(&self, k: usize) -> usize {
        self.hidden.unwrap_or(4 * k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorParams<T> {
    Direct { prompt: T },
    Linear { weight: T, bias: T },
    LowRank { left: T, right: T, bias: T },
    Mlp { w1: T, b1: T, w2: T, b2: T },
}

/// A hypernetwork `H` with `R = H(e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenerator<T = Tensor> {
    pub shape: PromptShape,
    pub params: GeneratorParams<T>,
}

/// Trainable task embedding `e_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub task_id: String,
    pub e: Tensor,
}

impl TaskEmbedding {
    pub fn init<R: Rng + ?Sized>(task_id: impl Into<String>, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("task embedding width k must be >= 1".into()));
        }
        Ok(Self {
            task_id: task_id.into(),
            e: Tensor::randn([k], INIT_STD, rng),
        })
    }

    pub fn k(&self) -> usize {
        self.e.numel()
    }
}

impl<T> PromptGenerator<T> {
    pub fn kind(&self) -> GeneratorKind {
        match self.params {
            GeneratorParams::Direct { .. } => GeneratorKind::Direct,
            GeneratorParams::Linear { .. } => GeneratorKind::Linear,
            GeneratorParams::LowRank { .. } => GeneratorKind::LowRank,
            GeneratorParams::Mlp { .. } => GeneratorKind::Mlp,
        }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PromptGenerator<U> {
        use GeneratorParams::*;
        let params = match &self.params {
            Direct { prompt } => Direct { prompt: f(prompt) },
            Linear { weight, bias } => Linear {
                weight: f(weight),
                bias: f(bias),
            },
            LowRank { left, right, bias } => LowRank {
                left: f(left),
                right: f(right),
                bias: f(bias),
            },
            Mlp { w1, b1, w2, b2 } => Mlp {
                w1: f(w1),
                b1: f(b1),
                w2: f(w2),
                b2: f(b2),
            },
        };
        PromptGenerator {
            shape: self.shape,
            params,
        }
    }

    /// Visits parameters in a fixed order with stable names.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        for (name, p) in self.named() {
            f(format!("generator.{name}"), p);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        use GeneratorParams::*;
        let entries: Vec<(&str, &'a mut T)> = match &mut self.params {
            Direct { prompt } => vec![("prompt", prompt)],
            Linear { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LowRank { left, right, bias } => vec![("left", left), ("right", right), ("bias", bias)],
            Mlp { w1, b1, w2, b2 } => vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
        };
        for (name, p) in entries {
            f(format!("generator.{name}"), p);
        }
    }

    fn named(&self) -> Vec<(&'static str, &T)> {
        use GeneratorParams::*;
        match &self.params {
            Direct { prompt } => vec![("prompt", prompt)],
            Linear { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LowRank { left, right, bias } => vec![("left", left), ("right", right), ("bias", bias)],
            Mlp { w1, b1, w2, b2 } => vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
        }
    }
}

impl PromptGenerator<Tensor> {
    /// Random initialization: weights from `Normal(0, 0.02²)`, biases zero.
    /// A `direct` generator also starts from small random values here; see
    /// [`PromptGenerator::direct_from_rows`] for vocabulary initialization.
    pub fn init<R: Rng + ?Sized>(
        spec: &GeneratorSpec,
        shape: PromptShape,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("task embedding width k must be >= 1".into()));
        }
        let nd = shape.flat_len();
        let params = match spec.kind {
            GeneratorKind::Direct => GeneratorParams::Direct {
                prompt: Tensor::randn([shape.n, shape.d], INIT_STD, rng),
            },
            GeneratorKind::Linear => GeneratorParams::Linear {
                weight: Tensor::randn([nd, k], INIT_STD, rng),
                bias: Tensor::zeros([nd]),
            },
            GeneratorKind::LowRank => {
                if spec.rank == 0 {
                    return Err(Error::Config("low-rank generator needs rank >= 1".into()));
                }
                GeneratorParams::LowRank {
                    left: Tensor::randn([nd, spec.rank], INIT_STD, rng),
                    right: Tensor::randn([spec.rank, k], INIT_STD, rng),
                    bias: Tensor::zeros([nd]),
                }
            }
            GeneratorKind::Mlp => {
                let h = spec.hidden_width(k);
                if h == 0 {
                    return Err(Error::Config("MLP generator needs hidden width >= 1".into()));
                }
                GeneratorParams::Mlp {
                    w1: Tensor::randn([h, k], INIT_STD, rng),
                    b1: Tensor::zeros([h]),
                    w2: Tensor::randn([nd, h], INIT_STD, rng),
                    b2: Tensor::zeros([nd]),
                }
            }
        };
        Ok(Self { shape, params })
    }

    /// Standard prompt tuning initialized from rows of an embedding table,
    /// one row per token id (cycled if there are fewer ids than rows).
    pub fn direct_from_rows(table: &Tensor, ids: &[usize], shape: PromptShape) -> Result<Self> {
        let (vocab, d) = table.dims2()?;
        if d != shape.d {
            return Err(Error::dim("direct_from_rows", table.shape(), &[shape.n, shape.d]));
        }
        if ids.is_empty() {
            return Err(Error::Config("need at least one token id to initialize a prompt".into()));
        }
        let mut data = Vec::with_capacity(shape.flat_len());
        for i in 0..shape.n {
            let id = ids[i % ids.len()];
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        Ok(Self {
            shape,
            params: GeneratorParams::Direct {
                prompt: Tensor::new([shape.n, shape.d], data)?,
            },
        })
    }

    /// The `k = 1` linear generator with `W ∈ R^{nd×1}` that expresses
    /// standard prompt tuning, together with the scalar embedding `e = [1]`.
    /// Both `W` and `b` start at zero.
    pub fn reduce_to_standard(shape: PromptShape) -> (Self, TaskEmbedding) {
        let nd = shape.flat_len();
        let generator = Self {
            shape,
            params: GeneratorParams::Linear {
                weight: Tensor::zeros([nd, 1]),
                bias: Tensor::zeros([nd]),
            },
        };
        let embedding = TaskEmbedding {
            task_id: "standard".into(),
            e: Tensor::vector(vec![1.0]),
        };
        (generator, embedding)
    }

    /// The reduced form that reproduces a given direct prompt exactly:
    /// `W = 0`, `b = flatten(prompt)`, `e = [1]`.
    pub fn standard_from_prompt(prompt: &Tensor) -> Result<(Self, TaskEmbedding)> {
        let (n, d) = prompt.dims2()?;
        let (mut generator, embedding) = Self::reduce_to_standard(PromptShape::new(n, d)?);
        if let GeneratorParams::Linear { bias, .. } = &mut generator.params {
            *bias = prompt.flatten();
        }
        Ok((generator, embedding))
    }

    /// Trainable scalars, excluding the task embedding.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }

    /// Width of the task embedding this generator consumes, or `None` for
    /// `direct`, which ignores it.
    pub fn input_width(&self) -> Option<usize> {
        match &self.params {
            GeneratorParams::Direct { .. } => None,
            GeneratorParams::Linear { weight, .. } => Some(weight.shape()[1]),
            GeneratorParams::LowRank { right, .. } => Some(right.shape()[1]),
            GeneratorParams::Mlp { w1, .. } => Some(w1.shape()[1]),
        }
    }

    /// Binds every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PromptGenerator<Var> {
        self.map(&mut |t| tape.leaf(t.clone(), trainable))
    }

    /// Evaluates `H(e)` without recording gradients.
    pub fn generate_value(&self, embedding: &TaskEmbedding) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let e = tape.constant(embedding.e.clone());
        let r = bound.generate(&mut tape, Some(e))?;
        Ok(tape.value(r).clone())
    }
}

impl PromptGenerator<Var> {
    /// Records `R = H(e)` on the tape and returns the `n×d` prompt.
    pub fn generate(&self, tape: &mut Tape, embedding: Option<Var>) -> Result<Var> {
        let shape = self.shape;
        let flat = match &self.params {
            GeneratorParams::Direct { prompt } => return Ok(*prompt),
            GeneratorParams::Linear { weight, bias } => {
                let e = column(tape, embedding)?;
                let we = tape.matmul(*weight, e)?;
                add_flat_bias(tape, we, *bias)?
            }
            GeneratorParams::LowRank { left, right, bias } => {
                let e = column(tape, embedding)?;
                let fe = tape.matmul(*right, e)?;
                let cfe = tape.matmul(*left, fe)?;
                add_flat_bias(tape, cfe, *bias)?
            }
            GeneratorParams::Mlp { w1, b1, w2, b2 } => {
                let e = column(tape, embedding)?;
                let pre = tape.matmul(*w1, e)?;
                let pre = add_flat_bias(tape, pre, *b1)?;
                let hidden = tape.gelu(pre);
                let width = tape.shape(hidden)[0];
                let hidden = tape.reshape(hidden, &[width, 1])?;
                let out = tape.matmul(*w2, hidden)?;
                add_flat_bias(tape, out, *b2)?
            }
        };
        if tape.value(flat).numel() != shape.flat_len() {
            return Err(Error::dim("generate", tape.shape(flat), &[shape.n, shape.d]));
        }
        tape.reshape(flat, &[shape.n, shape.d])
    }
}

fn column(tape: &mut Tape, embedding: Option<Var>) -> Result<Var> {
    let e = embedding.ok_or_else(|| Error::Config("this generator needs a task embedding".into()))?;
    let k = tape.value(e).numel();
    tape.reshape(e, &[k, 1])
}

/// `[m×1] + [m]` → `[m]`.
fn add_flat_bias(tape: &mut Tape, col: Var, bias: Var) -> Result<Var> {
    let m = tape.value(col).numel();
    let flat = tape.reshape(col, &[m])?;
    tape.add(flat, bias)
}
