//! A tiny pre-norm encoder–decoder transformer standing in for a frozen
//! pretrained seq2seq model.
//!
//! The soft prompt `R` (`n×d`) is prepended to the embedded encoder input, so
//! the encoder runs over `[r_1; …; r_n; embed(X)]` with sinusoidal positions
//! `0..n+|X|`. The decoder is teacher-forced on `[BOS, y_1, …, y_m]` and
//! predicts `[y_1, …, y_m, EOS]`. There is no dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: vocab::VOCAB_SIZE,
            d_model: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ff_width: 64,
            max_len: 128,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.ff_width,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("LM dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// One input/target pair of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn new(input: Vec<usize>, target: Vec<usize>) -> Self {
        Self { input, target }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Config("example target must be nonempty".into()));
        }
        if let Some(&bad) = self.input.iter().chain(&self.target).find(|&&id| id >= vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// Multi-head attention with per-head projections and no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub out: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub ff: FeedForward<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub norm1: Norm<T>,
    pub self_attn: Attention<T>,
    pub norm2: Norm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: Norm<T>,
    pub ff: FeedForward<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights<T> {
    pub embed: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: Norm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: Norm<T>,
    pub unembed: T,
}

type Visitor<'a, 'b, T> = &'b mut dyn FnMut(String, &'a T);
type VisitorMut<'a, 'b, T> = &'b mut dyn FnMut(String, &'a mut T);

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, p: &str, f: Visitor<'a, '_, T>) {
        f(format!("{p}.gain"), &self.gain);
        f(format!("{p}.bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, f: VisitorMut<'a, '_, T>) {
        f(format!("{p}.gain"), &mut self.gain);
        f(format!("{p}.bias"), &mut self.bias);
    }
}

impl<T> Attention<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            query: self.query.iter().map(&mut *f).collect(),
            key: self.key.iter().map(&mut *f).collect(),
            value: self.value.iter().map(&mut *f).collect(),
            out: f(&self.out),
        }
    }

    fn visit<'a>(&'a self, p: &str, f: Visitor<'a, '_, T>) {
        for (name, list) in [("query", &self.query), ("key", &self.key), ("value", &self.value)] {
            for (h, t) in list.iter().enumerate() {
                f(format!("{p}.{name}.{h}"), t);
            }
        }
        f(format!("{p}.out"), &self.out);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, f: VisitorMut<'a, '_, T>) {
        for (name, list) in [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
        ] {
            for (h, t) in list.iter_mut().enumerate() {
                f(format!("{p}.{name}.{h}"), t);
            }
        }
        f(format!("{p}.out"), &mut self.out);
    }
}

impl<T> FeedForward<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FeedForward<U> {
        FeedForward {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    fn visit<'a>(&'a self, p: &str, f: Visitor<'a, '_, T>) {
        f(format!("{p}.w1"), &self.w1);
        f(format!("{p}.b1"), &self.b1);
        f(format!("{p}.w2"), &self.w2);
        f(format!("{p}.b2"), &self.b2);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, f: VisitorMut<'a, '_, T>) {
        f(format!("{p}.w1"), &mut self.w1);
        f(format!("{p}.b1"), &mut self.b1);
        f(format!("{p}.w2"), &mut self.w2);
        f(format!("{p}.b2"), &mut self.b2);
    }
}

impl<T> LmWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LmWeights<U> {
        LmWeights {
            embed: f(&self.embed),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    norm1: l.norm1.map(f),
                    attn: l.attn.map(f),
                    norm2: l.norm2.map(f),
                    ff: l.ff.map(f),
                })
                .collect(),
            encoder_norm: self.encoder_norm.map(f),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    norm1: l.norm1.map(f),
                    self_attn: l.self_attn.map(f),
                    norm2: l.norm2.map(f),
                    cross_attn: l.cross_attn.map(f),
                    norm3: l.norm3.map(f),
                    ff: l.ff.map(f),
                })
                .collect(),
            decoder_norm: self.decoder_norm.map(f),
            unembed: f(&self.unembed),
        }
    }

    /// Visits every parameter with a stable dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("lm.embed".into(), &self.embed);
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("lm.encoder.{i}");
            l.norm1.visit(&format!("{p}.norm1"), f);
            l.attn.visit(&format!("{p}.attn"), f);
            l.norm2.visit(&format!("{p}.norm2"), f);
            l.ff.visit(&format!("{p}.ff"), f);
        }
        self.encoder_norm.visit("lm.encoder_norm", f);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("lm.decoder.{i}");
            l.norm1.visit(&format!("{p}.norm1"), f);
            l.self_attn.visit(&format!("{p}.self_attn"), f);
            l.norm2.visit(&format!("{p}.norm2"), f);
            l.cross_attn.visit(&format!("{p}.cross_attn"), f);
            l.norm3.visit(&format!("{p}.norm3"), f);
            l.ff.visit(&format!("{p}.ff"), f);
        }
        self.decoder_norm.visit("lm.decoder_norm", f);
        f("lm.unembed".into(), &self.unembed);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        f("lm.embed".into(), &mut self.embed);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = format!("lm.encoder.{i}");
            l.norm1.visit_mut(&format!("{p}.norm1"), f);
            l.attn.visit_mut(&format!("{p}.attn"), f);
            l.norm2.visit_mut(&format!("{p}.norm2"), f);
            l.ff.visit_mut(&format!("{p}.ff"), f);
        }
        self.encoder_norm.visit_mut("lm.encoder_norm", f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("lm.decoder.{i}");
            l.norm1.visit_mut(&format!("{p}.norm1"), f);
            l.self_attn.visit_mut(&format!("{p}.self_attn"), f);
            l.norm2.visit_mut(&format!("{p}.norm2"), f);
            l.cross_attn.visit_mut(&format!("{p}.cross_attn"), f);
            l.norm3.visit_mut(&format!("{p}.norm3"), f);
            l.ff.visit_mut(&format!("{p}.ff"), f);
        }
        self.decoder_norm.visit_mut("lm.decoder_norm", f);
        f("lm.unembed".into(), &mut self.unembed);
    }
}

impl LmWeights<Tensor> {
    fn init<R: Rng + ?Sized>(cfg: &LmConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let norm = || Norm {
            gain: Tensor::full([d], 1.0),
            bias: Tensor::zeros([d]),
        };
        let attention = |rng: &mut R| Attention {
            query: (0..cfg.heads).map(|_| Tensor::randn([d, dh], fan_in(d), rng)).collect(),
            key: (0..cfg.heads).map(|_| Tensor::randn([d, dh], fan_in(d), rng)).collect(),
            value: (0..cfg.heads).map(|_| Tensor::randn([d, dh], fan_in(d), rng)).collect(),
            out: Tensor::randn([d, d], fan_in(d), rng),
        };
        let ff = |rng: &mut R| FeedForward {
            w1: Tensor::randn([d, cfg.ff_width], fan_in(d), rng),
            b1: Tensor::zeros([cfg.ff_width]),
            w2: Tensor::randn([cfg.ff_width, d], fan_in(cfg.ff_width), rng),
            b2: Tensor::zeros([d]),
        };
        let embed = Tensor::randn([cfg.vocab_size, d], 1.0, rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|_| EncoderLayer {
                norm1: norm(),
                attn: attention(rng),
                norm2: norm(),
                ff: ff(rng),
            })
            .collect();
        let decoder = (0..cfg.decoder_layers)
            .map(|_| DecoderLayer {
                norm1: norm(),
                self_attn: attention(rng),
                norm2: norm(),
                cross_attn: attention(rng),
                norm3: norm(),
                ff: ff(rng),
            })
            .collect();
        let unembed = Tensor::randn([d, cfg.vocab_size], fan_in(d), rng);
        LmWeights {
            embed,
            encoder,
            encoder_norm: norm(),
            decoder,
            decoder_norm: norm(),
            unembed,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Sinusoidal position table, `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([len, d], data).expect("positive dims")
}

/// Candidate output sequences for classification-as-generation; greedy
/// decoding restricted to them always yields one of the labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    sequences: Vec<Vec<usize>>,
}

impl LabelSet {
    pub fn new(labels: &[String]) -> Self {
        Self {
            sequences: labels
                .iter()
                .map(|l| {
                    let mut s = vocab::encode(l);
                    s.push(vocab::EOS);
                    s
                })
                .collect(),
        }
    }

    fn allowed(&self, prefix: &[usize]) -> Vec<usize> {
        let mut next: Vec<usize> = self
            .sequences
            .iter()
            .filter(|s| s.len() > prefix.len() && s.starts_with(prefix))
            .map(|s| s[prefix.len()])
            .collect();
        next.sort_unstable();
        next.dedup();
        next
    }
}

/// The frozen language model: weights plus a flag controlling whether they
/// are registered as trainable.
#[derive(Clone, Debug)]
pub struct FrozenSeq2SeqLm {
    pub config: LmConfig,
    pub weights: LmWeights<Tensor>,
    frozen: bool,
    positions: Tensor,
}

impl FrozenSeq2SeqLm {
    /// Randomly initialized model; starts frozen.
    pub fn new<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let weights = LmWeights::init(&config, rng);
        Ok(Self::from_weights(config, weights))
    }

    pub fn from_weights(config: LmConfig, weights: LmWeights<Tensor>) -> Self {
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Self {
            config,
            weights,
            frozen: true,
            positions,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Binds the weights onto `tape`; they receive gradients only when the
    /// model is unfrozen.
    pub fn bind(&self, tape: &mut Tape) -> LmWeights<Var> {
        let trainable = !self.frozen;
        self.weights.map(&mut |t| tape.leaf(t.clone(), trainable))
    }

    /// Serializes the weights, with the config as the JSON snapshot.
    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let json = serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut ck = Checkpoint::new(seed, json);
        for (name, t) in self.weights.named() {
            ck.push(name, t.clone());
        }
        Ok(ck)
    }

    /// Rebuilds a (frozen) model from [`to_checkpoint`](Self::to_checkpoint)
    /// output.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: LmConfig =
            serde_json::from_str(&ck.config).map_err(|e| Error::Format(format!("LM config: {e}")))?;
        config.validate()?;
        let mut weights = LmWeights::init(&config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        let mut result = Ok(());
        weights.visit_mut(&mut |name, t| {
            if result.is_err() {
                return;
            }
            match ck.get(&name) {
                Ok(src) if src.shape() == t.shape() => *t = src.clone(),
                Ok(src) => result = Err(Error::dim("LM checkpoint tensor", src.shape(), t.shape())),
                Err(e) => result = Err(e),
            }
        });
        result?;
        Ok(Self::from_weights(config, weights))
    }

    fn positions(&self, len: usize) -> Result<Tensor> {
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        Tensor::new([len, self.config.d_model], self.positions.data()[..len * self.config.d_model].to_vec())
    }

    /// Encoder states for `[prompt; embed(input)]`, one row per position.
    pub fn encode_with_prompt(
        &self,
        tape: &mut Tape,
        w: &LmWeights<Var>,
        prompt: Option<Var>,
        input: &[usize],
    ) -> Result<Var> {
        let d = self.config.d_model;
        let mut parts = Vec::with_capacity(2);
        if let Some(r) = prompt {
            let (_, cols) = tape.value(r).dims2()?;
            if cols != d {
                return Err(Error::dim("prompt width", tape.shape(r), &[d]));
            }
            parts.push(r);
        }
        if !input.is_empty() {
            parts.push(tape.embedding(w.embed, input)?);
        }
        if parts.is_empty() {
            return Err(Error::Config("cannot encode an empty sequence without a prompt".into()));
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let len = tape.shape(h)[0];
        let pos = tape.constant(self.positions(len)?);
        h = tape.add(h, pos)?;
        for layer in &w.encoder {
            let x = layer_norm(tape, h, &layer.norm1)?;
            let a = self.attend(tape, &layer.attn, x, x, false)?;
            h = tape.add(h, a)?;
            let x = layer_norm(tape, h, &layer.norm2)?;
            let f = feed_forward(tape, &layer.ff, x)?;
            h = tape.add(h, f)?;
        }
        layer_norm(tape, h, &w.encoder_norm)
    }

    /// Next-token logits `[len × V]` for a decoder input sequence.
    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        w: &LmWeights<Var>,
        memory: Var,
        decoder_input: &[usize],
    ) -> Result<Var> {
        let mut h = tape.embedding(w.embed, decoder_input)?;
        let pos = tape.constant(self.positions(decoder_input.len())?);
        h = tape.add(h, pos)?;
        for layer in &w.decoder {
            let x = layer_norm(tape, h, &layer.norm1)?;
            let a = self.attend(tape, &layer.self_attn, x, x, true)?;
            h = tape.add(h, a)?;
            let x = layer_norm(tape, h, &layer.norm2)?;
            let a = self.attend(tape, &layer.cross_attn, x, memory, false)?;
            h = tape.add(h, a)?;
            let x = layer_norm(tape, h, &layer.norm3)?;
            let f = feed_forward(tape, &layer.ff, x)?;
            h = tape.add(h, f)?;
        }
        let h = layer_norm(tape, h, &w.decoder_norm)?;
        tape.matmul(h, w.unembed)
    }

    /// Teacher-forced negative log-likelihood of the target, averaged over
    /// target positions (including the closing EOS).
    pub fn conditional_nll(
        &self,
        tape: &mut Tape,
        w: &LmWeights<Var>,
        prompt: Option<Var>,
        example: &Example,
    ) -> Result<Var> {
        example.validate(self.config.vocab_size)?;
        let memory = self.encode_with_prompt(tape, w, prompt, &example.input)?;
        let mut decoder_input = Vec::with_capacity(example.target.len() + 1);
        decoder_input.push(vocab::BOS);
        decoder_input.extend_from_slice(&example.target);
        let mut targets = example.target.clone();
        targets.push(vocab::EOS);
        let logits = self.decode_logits(tape, w, memory, &decoder_input)?;
        tape.softmax_cross_entropy(logits, &targets)
    }

    /// Convenience: the NLL value of one example with a fixed prompt.
    pub fn nll_value(&self, prompt: Option<&Tensor>, example: &Example) -> Result<f64> {
        let mut tape = Tape::new();
        let w = self.weights.map(&mut |t| tape.constant(t.clone()));
        let r = prompt.map(|p| tape.constant(p.clone()));
        let loss = self.conditional_nll(&mut tape, &w, r, example)?;
        Ok(tape.value(loss).item())
    }

    /// Argmax decoding until EOS or `max_len` tokens; ties go to the lowest
    /// token id. The returned sequence excludes EOS. With `labels`, each step
    /// only considers tokens that keep the output a prefix of some label.
    pub fn greedy_decode(
        &self,
        prompt: Option<&Tensor>,
        input: &[usize],
        max_len: usize,
        labels: Option<&LabelSet>,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let w = self.weights.map(&mut |t| tape.constant(t.clone()));
        let r = prompt.map(|p| tape.constant(p.clone()));
        let memory = self.encode_with_prompt(&mut tape, &w, r, input)?;
        let mut out = Vec::new();
        let mut decoder_input = vec![vocab::BOS];
        for _ in 0..max_len.max(1) {
            let logits = self.decode_logits(&mut tape, &w, memory, &decoder_input)?;
            let v = tape.value(logits);
            let last = v.row(v.shape()[0] - 1);
            let next = match labels {
                Some(set) => {
                    let allowed = set.allowed(&out);
                    if allowed.is_empty() {
                        break;
                    }
                    argmax_among(last, allowed)
                }
                None => argmax_among(last, 0..last.len()),
            };
            if next == vocab::EOS {
                break;
            }
            out.push(next);
            decoder_input.push(next);
        }
        Ok(out)
    }

    fn attend(&self, tape: &mut Tape, attn: &Attention<Var>, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(attn.query.len());
        for h in 0..attn.query.len() {
            let q = tape.matmul(x, attn.query[h])?;
            let k = tape.matmul(memory, attn.key[h])?;
            let v = tape.matmul(memory, attn.value[h])?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, causal)?;
            heads.push(tape.matmul(weights, v)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        tape.matmul(joined, attn.out)
    }
}

fn argmax_among(row: &[f64], candidates: impl IntoIterator<Item = usize>) -> usize {
    let mut best = None;
    for id in candidates {
        match best {
            Some((b, v)) if row[id] < v || (row[id] == v && id > b) => {}
            _ => best = Some((id, row[id])),
        }
    }
    best.expect("nonempty candidate set").0
}

fn layer_norm(tape: &mut Tape, x: Var, norm: &Norm<Var>) -> Result<Var> {
    tape.layer_norm(x, norm.gain, norm.bias, LAYER_NORM_EPS)
}

fn feed_forward(tape: &mut Tape, ff: &FeedForward<Var>, x: Var) -> Result<Var> {
    let h = tape.matmul(x, ff.w1)?;
    let h = tape.add_row(h, ff.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, ff.w2)?;
    tape.add_row(h, ff.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> FrozenSeq2SeqLm {
        let cfg = LmConfig {
            vocab_size: 32,
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_width: 16,
            max_len: 40,
        };
        FrozenSeq2SeqLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn prompted_length_law() {
        let lm = FrozenSeq2SeqLm::new(LmConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let w = lm.bind(&mut tape);
        let r = tape.constant(Tensor::zeros([20, 16]));
        let x: Vec<usize> = (0..13).map(|i| 97 + i).collect();
        let enc = lm.encode_with_prompt(&mut tape, &w, Some(r), &x).unwrap();
        assert_eq!(tape.shape(enc), &[33, 16]);
    }

    #[test]
    fn overlong_sequence_is_length_error() {
        let lm = small();
        let mut tape = Tape::new();
        let w = lm.bind(&mut tape);
        let r = tape.constant(Tensor::zeros([30, 8]));
        let x = vec![5; 11];
        assert!(matches!(
            lm.encode_with_prompt(&mut tape, &w, Some(r), &x),
            Err(Error::Length { len: 41, max: 40 })
        ));
    }

    #[test]
    fn freeze_is_idempotent_and_default() {
        let mut lm = small();
        assert!(lm.is_frozen());
        lm.unfreeze();
        assert!(!lm.is_frozen());
        lm.freeze();
        lm.freeze();
        assert!(lm.is_frozen());
    }

    #[test]
    fn frozen_binding_yields_no_weight_gradients() {
        let lm = small();
        let mut tape = Tape::new();
        let w = lm.bind(&mut tape);
        let r = tape.param(Tensor::full([2, 8], 0.1));
        let ex = Example::new(vec![4, 5, 6], vec![7, 8]);
        let loss = lm.conditional_nll(&mut tape, &w, Some(r), &ex).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut touched = 0;
        w.visit(&mut |_, v| touched += usize::from(grads.get(*v).is_some()));
        assert_eq!(touched, 0);
        assert!(grads.get(r).unwrap().l2_norm() > 0.0);
    }

    #[test]
    fn decoding_is_deterministic_and_label_constrained() {
        let lm = small();
        let x = vec![4, 9, 12];
        let a = lm.greedy_decode(None, &x, 6, None).unwrap();
        let b = lm.greedy_decode(None, &x, 6, None).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        // Labels over a 32-token vocabulary: ids 10/11/12 then EOS.
        let labels = LabelSet {
            sequences: vec![vec![10, 11, vocab::EOS], vec![12, vocab::EOS]],
        };
        let out = lm.greedy_decode(None, &x, 6, Some(&labels)).unwrap();
        assert!(out == vec![10, 11] || out == vec![12], "{out:?}");
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax_among(&[0.0, 2.0, 2.0, 1.0], 0..4), 1);
        assert_eq!(argmax_among(&[5.0, 2.0, 2.0], [2, 1]), 1);
    }

    #[test]
    fn positions_are_sinusoidal() {
        let p = sinusoidal_positions(4, 6);
        assert_eq!(p.at2(0, 0), 0.0);
        assert_eq!(p.at2(0, 1), 1.0);
        assert!((p.at2(3, 2) - (3.0 / 10_000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-12);
    }

    #[test]
    fn parameter_names_are_unique() {
        let lm = small();
        let named = lm.weights.named();
        let mut names: Vec<_> = named.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
        assert_eq!(lm.weights.parameter_count(), named.iter().map(|(_, t)| t.numel()).sum::<usize>());
    }
}
