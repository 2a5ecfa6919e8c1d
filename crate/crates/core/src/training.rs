//! Debiasing objective `L = L_b + λ·L_r` and its plain-SGD training loop,
//! plus the masked-LM pretraining that produces the biased starting model.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{self, Neighborhoods, Prototypes};
use crate::corpus::{Corpus, PairwiseGroup};
use crate::encoder::{Adam, Bound, EncoderModel, Frozen, Tape, Tensor, Tokenizer, Var};
use crate::error::{Error, Result};
use crate::metrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub k: usize,
    pub keep_fraction_align: f64,
    /// Softmax temperature of the target distributions inside `D`.
    pub temperature: f64,
    /// Softmax temperature of the KNN similarity weights.
    pub knn_temperature: f64,
    /// Replace KNN neighborhoods by random groups with uniform weights.
    pub random_neighbors: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            learning_rate: 2e-2,
            lambda: 1.0,
            batch_size: 8,
            k: 5,
            keep_fraction_align: 0.5,
            temperature: 1.0,
            knn_temperature: 1.0,
            random_neighbors: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.knn_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.keep_fraction_align > 0.0 && self.keep_fraction_align <= 1.0) {
            return Err(Error::Config("keep_fraction_align outside (0, 1]".into()));
        }
        Ok(())
    }
}

/// `l_b + λ·l_r`
pub fn total_loss(l_b: f64, l_r: f64, lambda: f64) -> f64 {
    l_b + lambda * l_r
}

/// Shared state for building the debiasing losses on one tape.
pub struct LossContext<'c> {
    pub corpus: &'c Corpus,
    pub neighborhoods: &'c Neighborhoods,
    pub temperature: f64,
    index: HashMap<&'c str, usize>,
}

impl<'c> LossContext<'c> {
    pub fn new(corpus: &'c Corpus, neighborhoods: &'c Neighborhoods, temperature: f64) -> Self {
        LossContext {
            corpus,
            neighborhoods,
            temperature,
            index: corpus.index(),
        }
    }

    fn group(&self, id: &str) -> Result<&'c PairwiseGroup> {
        self.index
            .get(id)
            .map(|&i| &self.corpus.groups[i])
            .ok_or_else(|| Error::Validation(format!("group {id} is not in the corpus")))
    }
}

/// Per-group `D` nodes of one tape, so each neighbor is encoded once.
pub struct BiasTerms {
    pub loss: Var,
    pub d_nodes: Vec<(String, Var)>,
}

/// `L_b = Σ_{anchors} Σ_k D(x^(n,k); current model)·S_{n,k}` on a tape.
pub fn loss_bias_on_tape(
    tape: &mut Tape<'_>,
    model: &EncoderModel,
    bound: &Bound,
    ctx: &LossContext<'_>,
    anchors: &[&str],
) -> Result<BiasTerms> {
    let protos = Prototypes::on_tape(tape, model, bound, &ctx.corpus.word_lists)?;
    let mut memo: HashMap<String, Var> = HashMap::new();
    let mut d_nodes = Vec::new();
    let mut terms = Vec::new();
    for &anchor in anchors {
        let nb = ctx
            .neighborhoods
            .get(anchor)
            .ok_or_else(|| Error::Validation(format!("no neighborhood for group {anchor}")))?;
        for (id, &w) in nb.neighbor_ids.iter().zip(&nb.weights) {
            let d = match memo.get(id) {
                Some(v) => *v,
                None => {
                    let g = ctx.group(id)?;
                    let v = alignment::bias_measure_on_tape(
                        tape,
                        model,
                        bound,
                        &protos,
                        g,
                        ctx.temperature,
                    )?;
                    memo.insert(id.clone(), v);
                    d_nodes.push((id.clone(), v));
                    v
                }
            };
            terms.push(tape.scale(d, w));
        }
    }
    let loss = tape.sum(&terms);
    Ok(BiasTerms { loss, d_nodes })
}

/// Frozen-model hidden states of `sentences`, used as constant targets.
pub fn frozen_hidden(m0: &EncoderModel, sentences: &[&str]) -> Result<Vec<Tensor>> {
    sentences.par_iter().map(|s| m0.encode(s)).collect()
}

/// Mean squared difference over every final-layer token-state entry.
pub fn loss_repr_on_tape<'a>(
    tape: &mut Tape<'a>,
    model: &EncoderModel,
    bound: &Bound,
    sentences: &[&str],
    frozen: &[&'a Tensor],
) -> Result<Var> {
    let total: usize = frozen.iter().map(|t| t.len()).sum();
    let mut parts = Vec::with_capacity(sentences.len());
    for (s, h0) in sentences.iter().zip(frozen) {
        let ids = model.token_ids(s)?;
        let h = model.forward(tape, bound, &ids);
        let target = tape.constant_ref(*h0);
        let mse = tape.mse(h, target);
        parts.push(tape.scale(mse, h0.len() as f64 / total as f64));
    }
    Ok(tape.sum(&parts))
}

/// `L_b` of a batch under `model`, without gradients.
pub fn loss_bias(
    model: &EncoderModel,
    corpus: &Corpus,
    neighborhoods: &Neighborhoods,
    anchors: &[&str],
    temperature: f64,
) -> Result<f64> {
    let ctx = LossContext::new(corpus, neighborhoods, temperature);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let terms = loss_bias_on_tape(&mut tape, model, &bound, &ctx, anchors)?;
    Ok(tape.scalar(terms.loss))
}

/// `L_r` between `model` and the frozen snapshot on `sentences`.
pub fn loss_repr(model: &EncoderModel, m0: &EncoderModel, sentences: &[&str]) -> Result<f64> {
    let frozen = frozen_hidden(m0, sentences)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, h0) in sentences.iter().zip(&frozen) {
        let h = model.encode(s)?;
        total += h
            .data
            .iter()
            .zip(&h0.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += h.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-anchor `L_b` over the aligned set.
    pub l_b: f64,
    pub l_r: f64,
    pub l_total: f64,
    pub mean_d: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// State before the first update.
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_b,l_r,l_total,mean_D,ppl\n");
        for r in std::iter::once(&self.initial).chain(&self.epochs) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.l_b, r.l_r, r.l_total, r.mean_d, r.ppl
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }
}

/// Everything `train` reads besides the model pair.
pub struct TrainData<'d> {
    /// Every group a neighborhood may point at.
    pub corpus: &'d Corpus,
    /// Aligned group ids (X^C), the anchors of `L_b`.
    pub aligned: &'d [String],
    pub neighborhoods: &'d Neighborhoods,
    /// Sentences for the held-out pseudo-perplexity.
    pub held_out: &'d [String],
}

/// Evaluates the log quantities for `model`.
pub fn evaluate(
    model: &EncoderModel,
    m0: &EncoderModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let ctx = LossContext::new(data.corpus, data.neighborhoods, cfg.temperature);
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for a in data.aligned {
        let nb = data
            .neighborhoods
            .get(a)
            .ok_or_else(|| Error::Validation(format!("no neighborhood for group {a}")))?;
        ids.extend(nb.neighbor_ids.iter().map(String::as_str));
        ids.insert(a);
    }
    let groups: Vec<PairwiseGroup> = ids
        .iter()
        .map(|id| ctx.group(id).cloned())
        .collect::<Result<_>>()?;
    let d = alignment::bias_measures(model, &groups, &data.corpus.word_lists, cfg.temperature)?;
    let d_of: HashMap<&str, f64> = groups
        .iter()
        .zip(&d)
        .map(|(g, v)| (g.group_id.as_str(), *v))
        .collect();
    let n = data.aligned.len().max(1) as f64;
    let mean_d = data.aligned.iter().map(|a| d_of[a.as_str()]).sum::<f64>() / n;
    let l_b = data
        .aligned
        .iter()
        .map(|a| alignment::weighted_effect(&data.neighborhoods[a], |id| d_of[id]))
        .sum::<f64>()
        / n;

    let sentences: Vec<&str> = data
        .aligned
        .iter()
        .map(|a| ctx.group(a))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|g| g.variants.iter().map(|v| v.text.as_str()))
        .collect();
    let l_r = loss_repr(model, m0, &sentences)?;
    let ppl = if data.held_out.is_empty() {
        f64::NAN
    } else {
        metrics::pseudo_perplexity(model, data.held_out)?
    };
    let rec = EpochRecord {
        epoch,
        l_b,
        l_r,
        l_total: total_loss(l_b, l_r, cfg.lambda),
        mean_d,
        ppl,
    };
    let finite = [rec.l_b, rec.l_r, rec.mean_d].iter().all(|v| v.is_finite())
        && (data.held_out.is_empty() || rec.ppl.is_finite());
    if !finite {
        return Err(Error::Numeric(format!("non-finite training statistics at epoch {epoch}")));
    }
    Ok(rec)
}

/// Minimizes `L_b + λ·L_r` over the aligned groups with plain mini-batch
/// SGD. Batches come from a seeded permutation per epoch.
pub fn train(
    model: EncoderModel,
    m0: &Frozen,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainLog)> {
    train_with(model, m0, data, cfg, |_, _| Ok(()))
}

/// [`train`] with a hook called after every epoch, e.g. for checkpoints.
pub fn train_with(
    mut model: EncoderModel,
    m0: &Frozen,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EncoderModel) -> Result<()>,
) -> Result<(EncoderModel, TrainLog)> {
    cfg.validate()?;
    if data.aligned.is_empty() {
        return Err(Error::Validation("aligned set is empty".into()));
    }
    let ctx = LossContext::new(data.corpus, data.neighborhoods, cfg.temperature);
    let initial = evaluate(&model, m0, data, cfg, 0)?;
    let mut log = TrainLog {
        initial,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    // frozen hidden states of every anchor's variants
    let mut frozen: HashMap<&str, Vec<Tensor>> = HashMap::new();
    for a in data.aligned {
        let g = ctx.group(a)?;
        let texts: Vec<&str> = g.variants.iter().map(|v| v.text.as_str()).collect();
        frozen.insert(a.as_str(), frozen_hidden(m0, &texts)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<&str> = data.aligned.iter().map(String::as_str).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grads = {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let bias = loss_bias_on_tape(&mut tape, &model, &bound, &ctx, batch)?;
                let mut sentences = Vec::new();
                let mut targets: Vec<&Tensor> = Vec::new();
                for a in batch {
                    let g = ctx.group(a)?;
                    sentences.extend(g.variants.iter().map(|v| v.text.as_str()));
                    targets.extend(frozen[a].iter());
                }
                let repr = loss_repr_on_tape(&mut tape, &model, &bound, &sentences, &targets)?;
                let weighted = tape.scale(repr, cfg.lambda);
                let loss = tape.sum(&[bias.loss, weighted]);
                if !tape.scalar(loss).is_finite() {
                    let culprit = bias
                        .d_nodes
                        .iter()
                        .find(|(_, v)| !tape.scalar(*v).is_finite())
                        .map(|(id, _)| id.clone())
                        .unwrap_or_else(|| batch.join(","));
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, group {culprit}"
                    )));
                }
                model.gradients(&tape, loss)?
            };
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
        log.epochs.push(evaluate(&model, m0, data, cfg, epoch)?);
        on_epoch(epoch, &model)?;
        log::info!(
            "epoch {epoch}: mean D {:.6}, L_r {:.6}, ppl {:.4}",
            log.last().mean_d,
            log.last().l_r,
            log.last().ppl
        );
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 16,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

/// Masked-LM pretraining with Adam; returns the mean loss of each epoch.
pub fn pretrain(
    model: &mut EncoderModel,
    sentences: &[String],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(cfg.mask_prob > 0.0 && cfg.mask_prob <= 1.0) {
        return Err(Error::Config("invalid pretraining config".into()));
    }
    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| model.token_ids(s))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let masks: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| {
                    let n = encoded[i].len();
                    let mut pos: Vec<usize> =
                        (0..n).filter(|_| rng.random::<f64>() < cfg.mask_prob).collect();
                    if pos.is_empty() {
                        pos.push(rng.random_range(0..n));
                    }
                    pos
                })
                .collect();
            let (loss_value, grads) = {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let mut parts = Vec::with_capacity(batch.len());
                for (&i, pos) in batch.iter().zip(&masks) {
                    let ids = &encoded[i];
                    let mut masked = ids.clone();
                    for &p in pos {
                        masked[p] = Tokenizer::MASK_ID;
                    }
                    let h = model.forward(&mut tape, &bound, &masked);
                    let logits = model.mlm_logits(&mut tape, &bound, h, pos);
                    let targets: Vec<usize> = pos.iter().map(|&p| ids[p]).collect();
                    let ce = tape.cross_entropy(logits, &targets);
                    parts.push(tape.scale(ce, 1.0 / batch.len() as f64));
                }
                let loss = tape.sum(&parts);
                (tape.scalar(loss), model.gradients(&tape, loss)?)
            };
            adam.step(model, &grads)?;
            total += loss_value;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::info!("pretrain epoch {}: mlm loss {mean:.4}", epoch + 1);
        history.push(mean);
    }
    Ok(history)
}
