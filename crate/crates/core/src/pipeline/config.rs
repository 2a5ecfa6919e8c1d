//! `key = value` pipeline configuration. Blank lines and `#` comments are
//! ignored; every key can also be set with [`PipelineConfig::set`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::llm_gen::GenerationConfig;
use crate::synthetic::SkewConfig;
use crate::training::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricToggles {
    pub seat: bool,
    pub stereoset: bool,
    pub crows: bool,
    pub ppl: bool,
    pub projection: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        MetricToggles {
            seat: true,
            stereoset: true,
            crows: true,
            ppl: true,
            projection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Seeds every random draw in every stage.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub word_lists: Option<PathBuf>,
    /// Pre-built group JSONL; when set, `ingest` replaces `generate`.
    pub corpus: Option<PathBuf>,
    pub stereoset: Option<PathBuf>,
    pub crows: Option<PathBuf>,
    pub seat: Option<PathBuf>,
    pub generation: GenerationConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub skew: SkewConfig,
    pub train: TrainConfig,
    /// Fraction of least-toxic groups kept when scores are present.
    pub tox_keep_fraction: f64,
    pub metrics: MetricToggles,
    pub sweep_sizes: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            word_lists: None,
            corpus: None,
            stereoset: None,
            crows: None,
            seat: None,
            generation: GenerationConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            skew: SkewConfig {
                skew_ratio: 1,
                ..SkewConfig::default()
            },
            train: TrainConfig::default(),
            tox_keep_fraction: 0.6,
            metrics: MetricToggles::default(),
            sweep_sizes: Vec::new(),
        };
        cfg.propagate_seed();
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value \"{value}\" for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean \"{value}\" for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl PipelineConfig {
    /// Copies `seed` into every sub-config.
    fn propagate_seed(&mut self) {
        self.generation.seed = self.seed;
        self.encoder.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => {
                self.seed = parse(key, v)?;
                self.propagate_seed();
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "word_lists" => self.word_lists = opt_path(v),
            "corpus" => self.corpus = opt_path(v),
            "stereoset" => self.stereoset = opt_path(v),
            "crows" => self.crows = opt_path(v),
            "seat" => self.seat = opt_path(v),

            "gen.endpoint_url" => self.generation.endpoint_url = v.into(),
            "gen.model" => self.generation.model_name = v.into(),
            "gen.sentences_per_prompt" => self.generation.sentences_per_prompt = parse(key, v)?,
            "gen.timeout_secs" => self.generation.timeout_secs = parse(key, v)?,
            "gen.offline" => self.generation.offline = parse_bool(key, v)?,
            "gen.api_key_env" => self.generation.api_key_env = v.into(),
            "gen.max_in_flight" => self.generation.max_in_flight = parse(key, v)?,
            "gen.max_retries" => self.generation.max_retries = parse(key, v)?,
            "gen.backoff_ms" => self.generation.backoff_ms = parse(key, v)?,
            "gen.cache" => self.generation.cache_path = opt_path(v),
            "gen.base_pronoun" => self.generation.base_pronoun = v.into(),

            "encoder.d_model" => self.encoder.d_model = parse(key, v)?,
            "encoder.layers" => self.encoder.layers = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.max_len" => self.encoder.max_len = parse(key, v)?,
            "encoder.ffn_mult" => self.encoder.ffn_mult = parse(key, v)?,

            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.mask_prob" => self.pretrain.mask_prob = parse(key, v)?,
            "pretrain.skew_stride" => self.skew.skew_stride = parse(key, v)?,
            "pretrain.skew_ratio" => self.skew.skew_ratio = parse(key, v)?,
            "pretrain.held_out_every" => self.skew.held_out_every = parse(key, v)?,

            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.lambda" => self.train.lambda = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.k" => self.train.k = parse(key, v)?,
            "train.keep_fraction" => self.train.keep_fraction_align = parse(key, v)?,
            "train.temperature" => self.train.temperature = parse(key, v)?,
            "train.knn_temperature" => self.train.knn_temperature = parse(key, v)?,
            "train.random_neighbors" => self.train.random_neighbors = parse_bool(key, v)?,

            "tox.keep_fraction" => self.tox_keep_fraction = parse(key, v)?,

            "metrics.seat" => self.metrics.seat = parse_bool(key, v)?,
            "metrics.stereoset" => self.metrics.stereoset = parse_bool(key, v)?,
            "metrics.crows" => self.metrics.crows = parse_bool(key, v)?,
            "metrics.ppl" => self.metrics.ppl = parse_bool(key, v)?,
            "metrics.projection" => self.metrics.projection = parse_bool(key, v)?,

            "sweep.sizes" => {
                self.sweep_sizes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown config key \"{other}\""))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got \"{assignment}\"")))?;
        self.set(k, v)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative input paths resolve against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_kv_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.word_lists,
            &mut cfg.corpus,
            &mut cfg.stereoset,
            &mut cfg.crows,
            &mut cfg.seat,
            &mut cfg.generation.cache_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Every key in a fixed order; `from_kv_str` reads it back unchanged.
    pub fn to_kv_string(&self) -> String {
        let g = &self.generation;
        let e = &self.encoder;
        let p = &self.pretrain;
        let t = &self.train;
        let m = &self.metrics;
        let sizes: Vec<String> = self.sweep_sizes.iter().map(|s| s.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("word_lists", show_path(&self.word_lists)),
            ("corpus", show_path(&self.corpus)),
            ("stereoset", show_path(&self.stereoset)),
            ("crows", show_path(&self.crows)),
            ("seat", show_path(&self.seat)),
            ("gen.endpoint_url", g.endpoint_url.clone()),
            ("gen.model", g.model_name.clone()),
            ("gen.sentences_per_prompt", g.sentences_per_prompt.to_string()),
            ("gen.timeout_secs", g.timeout_secs.to_string()),
            ("gen.offline", g.offline.to_string()),
            ("gen.api_key_env", g.api_key_env.clone()),
            ("gen.max_in_flight", g.max_in_flight.to_string()),
            ("gen.max_retries", g.max_retries.to_string()),
            ("gen.backoff_ms", g.backoff_ms.to_string()),
            ("gen.cache", show_path(&g.cache_path)),
            ("gen.base_pronoun", g.base_pronoun.clone()),
            ("encoder.d_model", e.d_model.to_string()),
            ("encoder.layers", e.layers.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.max_len", e.max_len.to_string()),
            ("encoder.ffn_mult", e.ffn_mult.to_string()),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.learning_rate", p.learning_rate.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.mask_prob", p.mask_prob.to_string()),
            ("pretrain.skew_stride", self.skew.skew_stride.to_string()),
            ("pretrain.skew_ratio", self.skew.skew_ratio.to_string()),
            ("pretrain.held_out_every", self.skew.held_out_every.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.k", t.k.to_string()),
            ("train.keep_fraction", t.keep_fraction_align.to_string()),
            ("train.temperature", t.temperature.to_string()),
            ("train.knn_temperature", t.knn_temperature.to_string()),
            ("train.random_neighbors", t.random_neighbors.to_string()),
            ("tox.keep_fraction", self.tox_keep_fraction.to_string()),
            ("metrics.seat", m.seat.to_string()),
            ("metrics.stereoset", m.stereoset.to_string()),
            ("metrics.crows", m.crows.to_string()),
            ("metrics.ppl", m.ppl.to_string()),
            ("metrics.projection", m.projection.to_string()),
            ("sweep.sizes", sizes.join(",")),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        crate::corpus::keep_count(self.tox_keep_fraction, 1)?;
        if self.word_lists.is_none() && self.corpus.is_none() {
            return Err(Error::Config("either word_lists or corpus must be set".into()));
        }
        for p in [&self.word_lists, &self.corpus, &self.stereoset, &self.crows, &self.seat]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("seed", "9").unwrap();
        cfg.set("train.lambda", "0").unwrap();
        cfg.set("sweep.sizes", "10, 20,40").unwrap();
        cfg.set("stereoset", "data/x.jsonl").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.sweep_sizes, vec![10, 20, 40]);
        let back = PipelineConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_keys_and_values() {
        let mut cfg = PipelineConfig::default();
        assert!(matches!(cfg.set("train.lamda", "1"), Err(Error::Config(_))));
        assert!(cfg.set("train.k", "many").is_err());
        assert!(cfg.apply_override("novalue").is_err());
        let err = PipelineConfig::from_kv_str("seed = 1\n# c\n\nbogus = 2").unwrap_err();
        assert!(err.to_string().contains("line 4"));
    }
}
