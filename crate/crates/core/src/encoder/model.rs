use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{ParamGrads, Tape, Var};
use super::tensor::{self, Tensor};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            max_len: 32,
            ffn_mult: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_len == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("max_len and ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

// Per-layer parameter offsets.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;
const PER_LAYER: usize = 16;

/// Index of the token embedding matrix, which is also the tied MLM output
/// projection.
pub const TOKEN_EMBEDDING: usize = 0;
pub const POSITION_EMBEDDING: usize = 1;

/// Small pre-LN bidirectional transformer with a tied masked-LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    params: Vec<Tensor>,
    names: Vec<String>,
}

/// Parameter leaves of one model bound onto a tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Tape handle of parameter `index`.
    pub fn var(&self, index: usize) -> Var {
        self.0[index]
    }
}

impl EncoderModel {
    /// Seed-deterministic initialization.
    pub fn new(config: EncoderConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let v = tokenizer.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
            )
        };

        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        push("token_embedding".into(), normal(v, d, 0.1));
        push("position_embedding".into(), normal(config.max_len, d, 0.1));
        let lin = 1.0 / (d as f64).sqrt();
        let lin_f = 1.0 / (f as f64).sqrt();
        for l in 0..config.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            push(p("ln1.gain"), Tensor::filled(1, d, 1.0));
            push(p("ln1.bias"), Tensor::zeros(1, d));
            for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                push(p(w), normal(d, d, lin));
                push(p(b), Tensor::zeros(1, d));
            }
            push(p("ln2.gain"), Tensor::filled(1, d, 1.0));
            push(p("ln2.bias"), Tensor::zeros(1, d));
            push(p("w1"), normal(d, f, lin));
            push(p("b1"), Tensor::zeros(1, f));
            push(p("w2"), normal(f, d, lin_f));
            push(p("b2"), Tensor::zeros(1, d));
        }
        push("final_ln.gain".into(), Tensor::filled(1, d, 1.0));
        push("final_ln.bias".into(), Tensor::zeros(1, d));
        push("mlm.bias".into(), Tensor::zeros(1, v));

        Ok(EncoderModel {
            config,
            tokenizer,
            params,
            names,
        })
    }

    /// Reassembles a model from stored tensors, checking every shape.
    pub fn from_parts(
        config: EncoderConfig,
        tokenizer: Tokenizer,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let mut model = EncoderModel::new(config, tokenizer)?;
        if params.len() != model.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (slot, p)) in model.params.iter_mut().zip(params).enumerate() {
            if slot.shape() != p.shape() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    model.names[i],
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        model.check_finite()?;
        Ok(model)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Direct parameter access for tests and tools; callers keep shapes.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn mlm_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    fn layer(&self, l: usize, offset: usize) -> usize {
        2 + l * PER_LAYER + offset
    }

    pub fn check_finite(&self) -> Result<()> {
        for (t, name) in self.params.iter().zip(&self.names) {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Deep copy that can no longer be trained.
    pub fn snapshot(&self) -> Frozen {
        Frozen(self.clone())
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.tokenizer.encode(text);
        if ids.is_empty() {
            return Err(Error::Validation(format!("\"{text}\" has no tokens")));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Validation(format!(
                "\"{text}\" has {} tokens, max_len is {}",
                ids.len(),
                self.config.max_len
            )));
        }
        Ok(ids)
    }

    /// Puts the parameters on `tape`, trainable or as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if trainable {
                        tape.param(i, p)
                    } else {
                        tape.constant_ref(p)
                    }
                })
                .collect(),
        )
    }

    /// Final-layer hidden states, one row per token.
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, ids: &[usize]) -> Var {
        let p = &bound.0;
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let positions: Vec<usize> = (0..ids.len()).collect();

        let tok = tape.gather(p[TOKEN_EMBEDDING], ids);
        let pos = tape.gather(p[POSITION_EMBEDDING], &positions);
        let mut x = tape.add(tok, pos);

        for l in 0..self.config.layers {
            let at = |o: usize| p[self.layer(l, o)];
            let h = tape.layer_norm(x);
            let h = tape.mul_row(h, at(LN1_G));
            let h = tape.add_row(h, at(LN1_B));
            let proj = |tape: &mut Tape<'_>, w: usize, b: usize| {
                let y = tape.matmul(h, at(w));
                tape.add_row(y, at(b))
            };
            let q = proj(tape, WQ, BQ);
            let k = proj(tape, WK, BK);
            let v = proj(tape, WV, BV);
            let scale = 1.0 / (dh as f64).sqrt();
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                head_out.push(tape.matmul(attn, vh));
            }
            let merged = if heads == 1 {
                head_out[0]
            } else {
                tape.concat_cols(&head_out)
            };
            let o = tape.matmul(merged, at(WO));
            let o = tape.add_row(o, at(BO));
            x = tape.add(x, o);

            let h = tape.layer_norm(x);
            let h = tape.mul_row(h, at(LN2_G));
            let h = tape.add_row(h, at(LN2_B));
            let f = tape.matmul(h, at(W1));
            let f = tape.add_row(f, at(B1));
            let f = tape.gelu(f);
            let f = tape.matmul(f, at(W2));
            let f = tape.add_row(f, at(B2));
            x = tape.add(x, f);
        }
        let n = self.params.len();
        let h = tape.layer_norm(x);
        let h = tape.mul_row(h, p[n - 3]);
        tape.add_row(h, p[n - 2])
    }

    /// MLM logits (tied to the token embeddings) for the given rows of
    /// `hidden`.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        hidden: Var,
        positions: &[usize],
    ) -> Var {
        let rows = tape.gather(hidden, positions);
        let logits = tape.matmul_t(rows, bound.0[TOKEN_EMBEDDING]);
        tape.add_row(logits, bound.0[self.mlm_bias_index()])
    }

    /// Mean hidden state over the positions of `word` in `text`, on a tape.
    pub fn word_repr_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        text: &str,
        word: &str,
    ) -> Result<Var> {
        let ids = self.token_ids(text)?;
        let positions = word_positions(text, word)?;
        let hidden = self.forward(tape, bound, &ids);
        let rows = tape.gather(hidden, &positions);
        Ok(tape.mean_rows(rows))
    }

    /// Final-layer hidden vectors of `text`, one per token.
    pub fn encode(&self, text: &str) -> Result<Tensor> {
        let ids = self.token_ids(text)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = self.forward(&mut tape, &bound, &ids);
        Ok(tape.value(h).clone())
    }

    /// Mean of the final-layer vectors over every occurrence of `word`.
    pub fn word_in_context_repr(&self, text: &str, word: &str) -> Result<Vec<f64>> {
        let positions = word_positions(text, word)?;
        let hidden = self.encode(text)?;
        let mut out = vec![0.0; hidden.cols];
        for &p in &positions {
            for (o, v) in out.iter_mut().zip(hidden.row(p)) {
                *o += v;
            }
        }
        let n = positions.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Mean-pooled sentence embedding.
    pub fn sentence_embedding(&self, text: &str) -> Result<Vec<f64>> {
        sentence_repr(&self.encode(text)?)
    }

    /// `Σ_t log p(token_t | text with t masked)`, natural log.
    pub fn pseudo_log_likelihood(&self, text: &str) -> Result<f64> {
        Ok(self.pll_terms(text)?.iter().sum())
    }

    /// Per-position masked log-probabilities.
    pub fn pll_terms(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.token_ids(text)?;
        let mut out = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            let mut masked = ids.clone();
            masked[t] = Tokenizer::MASK_ID;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let h = self.forward(&mut tape, &bound, &masked);
            let logits = self.mlm_logits(&mut tape, &bound, h, &[t]);
            let lp = tensor::log_softmax(&tape.value(logits).data);
            out.push(lp[ids[t]]);
        }
        Ok(out)
    }

    /// Exact gradients of the scalar `loss` for every parameter tensor.
    pub fn gradients(&self, tape: &Tape<'_>, loss: Var) -> Result<Vec<Tensor>> {
        let grads: ParamGrads = tape.backward(loss, self.params.len())?;
        Ok(self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| grads.get_or_zeros(i, p.shape()))
            .collect())
    }

    /// `θ ← θ − lr·g`
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.scaled_add_assign(-lr, g);
        }
        self.check_finite()
    }
}

fn word_positions(text: &str, word: &str) -> Result<Vec<usize>> {
    let positions = text::word_positions(&text::tokenize(text), word);
    if positions.is_empty() {
        return Err(Error::Validation(format!(
            "word \"{word}\" absent from \"{text}\""
        )));
    }
    Ok(positions)
}

/// Mean pooling over token vectors.
pub fn sentence_repr(hidden: &Tensor) -> Result<Vec<f64>> {
    if hidden.rows == 0 {
        return Err(Error::Validation("empty hidden sequence".into()));
    }
    Ok(hidden.mean_rows().data)
}

/// A snapshot that cannot be trained; reads go through [`Deref`].
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen(EncoderModel);

impl Deref for Frozen {
    type Target = EncoderModel;

    fn deref(&self) -> &EncoderModel {
        &self.0
    }
}

impl Frozen {
    /// Trainable copy of the snapshot.
    pub fn thaw(&self) -> EncoderModel {
        self.0.clone()
    }
}

/// Adam state for the pretraining phase.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &EncoderModel, lr: f64) -> Self {
        let zeros: Vec<Tensor> = model
            .params
            .iter()
            .map(|p| Tensor::zeros(p.rows, p.cols))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut EncoderModel, grads: &[Tensor]) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        model.check_finite()
    }
}
