//! Stage-by-stage orchestration. Every stage reads its inputs from, and
//! writes its outputs to, the configured output directory, so running the
//! stages one at a time composes to the same result as [`run_pipeline`].

mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{MetricToggles, PipelineConfig};
pub use report::{report, svg_line_chart, Series};

use crate::alignment::{self, AlignmentReport};
use crate::corpus::{self, Corpus, WordLists};
use crate::encoder::{checkpoint, EncoderModel, Tokenizer};
use crate::error::{Error, Result};
use crate::llm_gen;
use crate::metrics::{self, MetricValues, SeatSpec};
use crate::synthetic;
use crate::training::{self, TrainData};

pub const CORPUS: &str = "corpus.jsonl";
pub const REJECTED: &str = "rejected.jsonl";
pub const FILTERED: &str = "corpus_filtered.jsonl";
pub const HELD_OUT: &str = "held_out.txt";
pub const BASE_CHECKPOINT: &str = "m0.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_loss.csv";
pub const ALIGNMENT: &str = "alignment.json";
pub const DEBIASED_CHECKPOINT: &str = "debiased.ckpt";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const TRAIN_LOG_JSON: &str = "train_log.json";
pub const METRICS_BEFORE: &str = "metrics_before.json";
pub const METRICS_AFTER: &str = "metrics_after.json";
pub const BIAS_REPORT: &str = "bias_report.json";
pub const PROJECTION_BEFORE: &str = "projection_before.csv";
pub const PROJECTION_AFTER: &str = "projection_after.csv";
pub const SWEEP_MANIFEST: &str = "sweep.json";
pub const RESOLVED_CONFIG: &str = "config.resolved";

/// Metrics of the frozen and debiased models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub before: MetricValues,
    pub after: MetricValues,
    pub aligned_groups: usize,
    pub filtered_groups: usize,
}

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::json(path.display().to_string(), e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn prepare(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write(&out(cfg, RESOLVED_CONFIG), cfg.to_kv_string())
}

fn word_lists(cfg: &PipelineConfig) -> Result<WordLists> {
    match &cfg.word_lists {
        Some(p) => corpus::parse_word_lists(p),
        None => Err(Error::Config("word_lists is not set".into())),
    }
}

/// Reads a corpus file written by an earlier stage.
pub fn load_corpus(path: &Path, lists: &WordLists) -> Result<Corpus> {
    let ingested = corpus::ingest_groups(path, lists)?;
    if let Some(r) = ingested.rejected.first() {
        return Err(Error::Validation(format!(
            "{} line {}: {}",
            path.display(),
            r.line,
            r.reason
        )));
    }
    Ok(ingested.corpus)
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

/// Writes `corpus.jsonl` from the word lists.
pub fn generate(cfg: &PipelineConfig) -> Result<Corpus> {
    stage("generate", || {
        prepare(cfg)?;
        let lists = word_lists(cfg)?;
        let corpus = llm_gen::generate_groups(&lists, &cfg.generation)?;
        corpus.write_jsonl(out(cfg, CORPUS))?;
        Ok(corpus)
    })
}

/// Validates the configured corpus file into `corpus.jsonl`, listing
/// rejected lines in `rejected.jsonl`.
pub fn ingest(cfg: &PipelineConfig) -> Result<Corpus> {
    stage("ingest", || {
        prepare(cfg)?;
        let lists = word_lists(cfg)?;
        let src = cfg
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("corpus is not set".into()))?;
        let ingested = corpus::ingest_groups(src, &lists)?;
        if !ingested.rejected.is_empty() {
            log::warn!("{} groups rejected", ingested.rejected.len());
        }
        write(&out(cfg, REJECTED), ingested.report_jsonl())?;
        ingested.corpus.write_jsonl(out(cfg, CORPUS))?;
        Ok(ingested.corpus)
    })
}

/// Keeps the least toxic groups. A corpus without any scores passes
/// through unchanged; a partially scored one is an error.
pub fn tox_filter(cfg: &PipelineConfig) -> Result<Corpus> {
    stage("tox-filter", || {
        let lists = word_lists(cfg)?;
        let corpus = load_corpus(&out(cfg, CORPUS), &lists)?;
        let scored = corpus.groups.iter().filter(|g| g.toxicity.is_some()).count();
        let kept = if scored == 0 {
            log::warn!("no toxicity scores; keeping all {} groups", corpus.len());
            corpus
        } else {
            corpus::toxicity_filter(&corpus, cfg.tox_keep_fraction)?
        };
        kept.write_jsonl(out(cfg, FILTERED))?;
        Ok(kept)
    })
}

fn filtered_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    load_corpus(&out(cfg, FILTERED), &word_lists(cfg)?)
}

fn fixture_texts(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let mut texts = Vec::new();
    if let Some(p) = &cfg.stereoset {
        for it in metrics::read_jsonl::<metrics::StereoItem>(p)? {
            texts.extend([it.stereotype, it.anti_stereotype, it.unrelated]);
        }
    }
    if let Some(p) = &cfg.crows {
        for it in metrics::read_jsonl::<metrics::CrowsPair>(p)? {
            texts.extend([it.sent_more, it.sent_less]);
        }
    }
    if let Some(p) = &cfg.seat {
        for s in metrics::read_seat_specs(p)? {
            texts.extend(s.target_x.into_iter().chain(s.target_y).chain(s.attribute_a).chain(s.attribute_b));
        }
    }
    Ok(texts)
}

/// Vocabulary over the corpus, the prototype and word templates, and
/// `extra` texts.
pub fn corpus_tokenizer(corpus: &Corpus, extra: impl IntoIterator<Item = String>) -> Tokenizer {
    let lists = &corpus.word_lists;
    let words: Vec<&String> = lists.attributes.iter().flatten().chain(&lists.targets).collect();
    let mut texts: Vec<String> = corpus.sentences().map(str::to_string).collect();
    texts.extend(lists.targets.iter().map(|t| alignment::target_sentence(t)));
    texts.extend(words.iter().map(|w| metrics::word_sentence(w)));
    texts.extend(extra);
    Tokenizer::build(texts.iter().map(String::as_str))
}

/// [`corpus_tokenizer`] plus every configured evaluation fixture.
pub fn build_tokenizer(cfg: &PipelineConfig, corpus: &Corpus) -> Result<Tokenizer> {
    Ok(corpus_tokenizer(corpus, fixture_texts(cfg)?))
}

/// Masked-LM pretraining of the base model `M_0` on the (optionally
/// skewed) filtered corpus.
pub fn pretrain(cfg: &PipelineConfig) -> Result<EncoderModel> {
    stage("pretrain", || {
        let corpus = filtered_corpus(cfg)?;
        let tokenizer = build_tokenizer(cfg, &corpus)?;
        let setup = synthetic::skew(corpus, &cfg.skew)?;
        let mut model = EncoderModel::new(cfg.encoder.clone(), tokenizer)?;
        let losses = training::pretrain(&mut model, &setup.pretrain_sentences, &cfg.pretrain)?;
        let mut csv = String::from("epoch,mlm_loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        write(&out(cfg, PRETRAIN_LOG), csv)?;
        let mut held = setup.held_out.join("\n");
        held.push('\n');
        write(&out(cfg, HELD_OUT), held)?;
        checkpoint::save(&model, out(cfg, BASE_CHECKPOINT))?;
        Ok(model)
    })
}

fn neighborhoods(
    cfg: &PipelineConfig,
    m0: &EncoderModel,
    corpus: &Corpus,
) -> Result<alignment::Neighborhoods> {
    if cfg.train.random_neighbors {
        let ids: Vec<String> = corpus.groups.iter().map(|g| g.group_id.clone()).collect();
        alignment::random_neighborhoods(&ids, cfg.train.k, cfg.seed)
    } else {
        let emb = alignment::group_embeddings(m0, corpus)?;
        alignment::build_knn(&emb, cfg.train.k, cfg.train.knn_temperature)
    }
}

/// KNN neighborhoods, causal effects and the aligned/filtered split.
pub fn align(cfg: &PipelineConfig) -> Result<AlignmentReport> {
    stage("align", || {
        let corpus = filtered_corpus(cfg)?;
        let m0 = checkpoint::load(out(cfg, BASE_CHECKPOINT))?;
        let nbs = neighborhoods(cfg, &m0, &corpus)?;
        let mut report = alignment::causal_effect(&m0, &corpus, &nbs, cfg.train.temperature)?;
        report.apply_selection(cfg.train.keep_fraction_align)?;
        write(&out(cfg, ALIGNMENT), report.to_json() + "\n")?;
        Ok(report)
    })
}

fn held_out(cfg: &PipelineConfig) -> Result<Vec<String>> {
    Ok(read(&out(cfg, HELD_OUT))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn sorted_kept(report: &AlignmentReport) -> Vec<String> {
    let kept: BTreeSet<String> = report.kept_ids().into_iter().collect();
    kept.into_iter().collect()
}

/// Fine-tunes a copy of `M_0` on the aligned groups.
pub fn debias(cfg: &PipelineConfig) -> Result<(EncoderModel, training::TrainLog)> {
    stage("debias", || {
        let corpus = filtered_corpus(cfg)?;
        let m0 = checkpoint::load(out(cfg, BASE_CHECKPOINT))?.snapshot();
        let report: AlignmentReport = read_json(&out(cfg, ALIGNMENT))?;
        let aligned = sorted_kept(&report);
        let nbs = report.neighborhoods();
        let held = if cfg.metrics.ppl { held_out(cfg)? } else { Vec::new() };
        let data = TrainData {
            corpus: &corpus,
            aligned: &aligned,
            neighborhoods: &nbs,
            held_out: &held,
        };
        let (model, log) = training::train_with(m0.thaw(), &m0, &data, &cfg.train, |epoch, m| {
            checkpoint::save(m, out(cfg, &format!("debiased_epoch{epoch}.ckpt")))
        })?;
        checkpoint::save(&model, out(cfg, DEBIASED_CHECKPOINT))?;
        write(&out(cfg, TRAIN_LOG_CSV), log.to_csv())?;
        write(&out(cfg, TRAIN_LOG_JSON), log.to_json() + "\n")?;
        Ok((model, log))
    })
}

/// SEAT specs from the configured file, or one built from the word lists:
/// targets at even and odd positions against the first and second
/// attribute of every tuple.
pub fn seat_specs(cfg: &PipelineConfig, lists: &WordLists) -> Result<Vec<SeatSpec>> {
    if let Some(p) = &cfg.seat {
        return metrics::read_seat_specs(p);
    }
    let x: Vec<&str> = lists.targets.iter().step_by(2).map(String::as_str).collect();
    let y: Vec<&str> = lists.targets.iter().skip(1).step_by(2).map(String::as_str).collect();
    let a: Vec<&str> = lists.attributes.iter().map(|t| t[0].as_str()).collect();
    let b: Vec<&str> = lists.attributes.iter().map(|t| t[1].as_str()).collect();
    if y.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![SeatSpec::from_words("word-lists", &x, &y, &a, &b)])
}

fn projection_words(lists: &WordLists) -> Vec<(String, String)> {
    let mut words = Vec::new();
    for tuple in &lists.attributes {
        for (i, w) in tuple.iter().enumerate() {
            words.push((w.clone(), format!("attribute_{i}")));
        }
    }
    words.extend(lists.targets.iter().map(|t| (t.clone(), "target".to_string())));
    words
}

/// Every enabled metric for one model. `mean_d` covers the aligned groups
/// only; filtered groups never enter training statistics.
pub fn measure(
    cfg: &PipelineConfig,
    model: &EncoderModel,
    corpus: &Corpus,
    aligned: &[String],
    held: &[String],
) -> Result<MetricValues> {
    let lists = &corpus.word_lists;
    let mut seat = Vec::new();
    if cfg.metrics.seat {
        for spec in seat_specs(cfg, lists)? {
            let name = spec.name.clone();
            seat.push((name, metrics::seat_effect_size(model, &spec)?));
        }
    }
    let seat_mean_abs = (!seat.is_empty())
        .then(|| seat.iter().map(|s| s.1.abs()).sum::<f64>() / seat.len() as f64);
    let stereoset = match (&cfg.stereoset, cfg.metrics.stereoset) {
        (Some(p), true) => Some(metrics::stereoset_scores(model, &metrics::read_jsonl(p)?)?),
        _ => None,
    };
    let crows = match (&cfg.crows, cfg.metrics.crows) {
        (Some(p), true) => Some(metrics::crows_score(model, &metrics::read_jsonl(p)?)?),
        _ => None,
    };
    let mean_d = if aligned.is_empty() {
        None
    } else {
        let index = corpus.index();
        let groups: Vec<_> = aligned
            .iter()
            .map(|id| {
                index.get(id.as_str()).map(|&i| corpus.groups[i].clone()).ok_or_else(|| {
                    Error::Validation(format!("aligned group {id} is not in the corpus"))
                })
            })
            .collect::<Result<_>>()?;
        let d = alignment::bias_measures(model, &groups, lists, cfg.train.temperature)?;
        Some(d.iter().sum::<f64>() / d.len() as f64)
    };
    let ppl = if cfg.metrics.ppl && !held.is_empty() {
        Some(metrics::pseudo_perplexity(model, held)?)
    } else {
        None
    };
    Ok(MetricValues {
        seat,
        seat_mean_abs,
        stereoset,
        crows,
        mean_d,
        ppl,
    })
}

/// Scores `M_0` and the debiased model and writes the metric reports.
pub fn eval(cfg: &PipelineConfig) -> Result<BiasReport> {
    stage("eval", || {
        let corpus = filtered_corpus(cfg)?;
        let report: AlignmentReport = read_json(&out(cfg, ALIGNMENT))?;
        let aligned = sorted_kept(&report);
        let held = held_out(cfg)?;
        let m0 = checkpoint::load(out(cfg, BASE_CHECKPOINT))?;
        let m1 = checkpoint::load(out(cfg, DEBIASED_CHECKPOINT))?;
        let before = measure(cfg, &m0, &corpus, &aligned, &held)?;
        let after = measure(cfg, &m1, &corpus, &aligned, &held)?;
        if cfg.metrics.projection {
            let words = projection_words(&corpus.word_lists);
            for (m, name) in [(&m0, PROJECTION_BEFORE), (&m1, PROJECTION_AFTER)] {
                match metrics::export_projection(m, &words) {
                    Ok(rows) => write(&out(cfg, name), metrics::projection_csv(&rows)?)?,
                    Err(e) => log::warn!("projection skipped: {e}"),
                }
            }
        }
        write(&out(cfg, METRICS_BEFORE), to_json(&before))?;
        write(&out(cfg, METRICS_AFTER), to_json(&after))?;
        let bias = BiasReport {
            before,
            after,
            aligned_groups: aligned.len(),
            filtered_groups: report.groups.len() - aligned.len(),
        };
        write(&out(cfg, BIAS_REPORT), to_json(&bias))?;
        Ok(bias)
    })
}

/// Every stage in order, ending with the human-readable report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<BiasReport> {
    cfg.validate()?;
    if cfg.corpus.is_some() {
        ingest(cfg)?;
    } else {
        generate(cfg)?;
    }
    tox_filter(cfg)?;
    pretrain(cfg)?;
    align(cfg)?;
    debias(cfg)?;
    let bias = eval(cfg)?;
    report(&cfg.out_dir)?;
    Ok(bias)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub groups: usize,
    pub dir: String,
    pub report: BiasReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub points: Vec<SweepPoint>,
}

/// Reruns pretrain → eval on seeded subsets of the filtered corpus, one
/// per size in `sweep_sizes`, and writes the manifest `report` plots.
pub fn sweep(cfg: &PipelineConfig) -> Result<SweepManifest> {
    cfg.validate()?;
    if cfg.sweep_sizes.is_empty() {
        return Err(Error::Config("sweep.sizes is empty".into()));
    }
    if cfg.corpus.is_some() {
        ingest(cfg)?;
    } else {
        generate(cfg)?;
    }
    let full = tox_filter(cfg)?;
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut points = Vec::new();
    let mut sizes = cfg.sweep_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    for n in sizes {
        if n > full.len() {
            return Err(Error::Config(format!(
                "sweep size {n} exceeds the {} available groups",
                full.len()
            )));
        }
        let dir = format!("sweep/{n}");
        let mut sub = cfg.clone();
        sub.out_dir = cfg.out_dir.join(&dir);
        prepare(&sub)?;
        let chosen: HashSet<String> = order[..n]
            .iter()
            .map(|&i| full.groups[i].group_id.clone())
            .collect();
        full.subset(&chosen).write_jsonl(out(&sub, FILTERED))?;
        pretrain(&sub)?;
        align(&sub)?;
        debias(&sub)?;
        let report = eval(&sub)?;
        points.push(SweepPoint {
            groups: n,
            dir,
            report,
        });
    }
    let manifest = SweepManifest { points };
    write(&out(cfg, SWEEP_MANIFEST), to_json(&manifest))?;
    report(&cfg.out_dir)?;
    Ok(manifest)
}

/// Per-group D under `model` for every group of `corpus`, keyed by id.
pub fn bias_by_group(
    model: &EncoderModel,
    corpus: &Corpus,
    temperature: f64,
) -> Result<BTreeMap<String, f64>> {
    let d = alignment::bias_measures(model, &corpus.groups, &corpus.word_lists, temperature)?;
    Ok(corpus
        .groups
        .iter()
        .map(|g| g.group_id.clone())
        .zip(d)
        .collect())
}
