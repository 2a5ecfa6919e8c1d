//! Pairwise sentence generation: prompt rendering, a chat-completion client
//! with retries and a reply cache, reply parsing, and a deterministic
//! template generator for offline use.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{counterfactual_swap, Corpus, PairwiseGroup, PronounMap, Variant, WordLists};
use crate::error::{Error, Result};
use crate::text;

const P1: &str = "Please generate ten sentences containing the words in a tuple ({a_i}, {target}) simultaneously. Control the word count in every generated sentence to around 20. The generated sentences strive for creativity, diversity, and logic.";
const P2: &str = "Replace the term {a_i} to {a_j}, and correct personal pronouns in the above generated ten sentences.";

const SYSTEM_PROMPT: &str = "You are a helpful assistant.";

/// Slot templates for offline generation. `{pronoun}` agrees with the first
/// attribute of each tuple.
pub const TEMPLATES: &[&str] = &[
    "The {attr} worked as a {target} and impressed everyone with {pronoun} skill.",
    "Everyone agreed that the {attr} was a natural {target} after {pronoun} first week.",
    "The {attr} trained for years to become a {target} and never doubted {pronoun} choice.",
    "As a {target}, the {attr} spent {pronoun} mornings planning the day ahead.",
    "The {attr} was promoted to {target} because of {pronoun} careful work.",
    "People often asked the {attr} how {pronoun} life as a {target} had changed.",
    "The {attr} became a {target} and shared {pronoun} story with the town.",
    "Late at night the {attr} still worked as a {target} to support {pronoun} family.",
    "The young {attr} dreamed of being a {target} and kept {pronoun} notes in a box.",
    "Nobody was surprised when the {attr} was named {target} of the year for {pronoun} effort.",
    "The {attr} taught others what {pronoun} years as a {target} had shown.",
    "With {pronoun} calm voice, the {attr} proved to be a fine {target}.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub p1: String,
    pub p2: String,
    pub attribute_i: String,
    pub attribute_j: String,
    pub target: String,
}

pub fn render_prompts(a_i: &str, a_j: &str, target: &str) -> Result<PromptPair> {
    if a_i.trim().is_empty() || a_j.trim().is_empty() || target.trim().is_empty() {
        return Err(Error::Validation("prompt words must be nonempty".into()));
    }
    if a_i == a_j {
        return Err(Error::Validation(format!(
            "attribute words must differ, got \"{a_i}\" twice"
        )));
    }
    Ok(PromptPair {
        p1: P1.replace("{a_i}", a_i).replace("{target}", target),
        p2: P2.replace("{a_i}", a_i).replace("{a_j}", a_j),
        attribute_i: a_i.into(),
        attribute_j: a_j.into(),
        target: target.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub sentences_per_prompt: usize,
    pub timeout_secs: u64,
    pub offline: bool,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub cache_path: Option<PathBuf>,
    /// Pronoun used in templates for the first attribute of each tuple.
    pub base_pronoun: String,
    pub pronouns: PronounMap,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_name: "gpt-3.5-turbo".into(),
            sentences_per_prompt: 10,
            timeout_secs: 60,
            offline: true,
            api_key_env: "OPENAI_API_KEY".into(),
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 500,
            cache_path: None,
            base_pronoun: "his".into(),
            pronouns: PronounMap::default(),
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sentences_per_prompt == 0 {
            return Err(Error::Config("sentences_per_prompt must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if !self.offline && self.endpoint_url.is_empty() {
            return Err(Error::Config("endpoint_url is required online".into()));
        }
        Ok(())
    }
}

/// Strips a leading list marker such as `3.`, `3)` or `-`.
fn strip_marker(line: &str) -> &str {
    let t = line.trim();
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim();
        }
    }
    t.strip_prefix("- ").map_or(t, str::trim)
}

/// Numbered reply lines, keeping their position so that variants from
/// different replies can be matched up.
fn reply_lines(reply: &str) -> Vec<(usize, String)> {
    reply
        .lines()
        .map(strip_marker)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| (i, l.to_string()))
        .collect()
}

fn filter_lines(reply: &str, attr: &str, target: &str) -> Vec<(usize, String)> {
    reply_lines(reply)
        .into_iter()
        .filter(|(i, l)| {
            let ok = text::contains_word(l, attr) && text::contains_word(l, target);
            if !ok {
                log::warn!("dropping reply line {} lacking ({attr}, {target}): {l}", i + 1);
            }
            ok
        })
        .collect()
}

/// Sentences of `reply` that contain both the expected attribute and target.
pub fn parse_reply(reply: &str, expected: &PromptPair) -> Result<Vec<String>> {
    let lines = filter_lines(reply, &expected.attribute_i, &expected.target);
    if lines.is_empty() {
        return Err(Error::Validation(format!(
            "no sentence in reply contains ({}, {})",
            expected.attribute_i, expected.target
        )));
    }
    Ok(lines.into_iter().map(|(_, l)| l).collect())
}

fn fill(template: &str, attr: &str, target: &str, pronoun: &str) -> String {
    template
        .replace("{attr}", attr)
        .replace("{target}", target)
        .replace("{pronoun}", pronoun)
}

fn group_id(tuple: usize, target: &str, line: usize) -> String {
    format!("t{tuple}-{target}-{line}")
}

fn offline_group(
    lists: &WordLists,
    cfg: &GenerationConfig,
    tuple: usize,
    target: &str,
    line: usize,
    template: &str,
) -> Result<PairwiseGroup> {
    let attrs = &lists.attributes[tuple];
    let base = fill(template, &attrs[0], target, &cfg.base_pronoun);
    let mut variants = vec![Variant {
        attribute_index: 0,
        attribute: attrs[0].clone(),
        text: base.clone(),
    }];
    for (j, a) in attrs.iter().enumerate().skip(1) {
        variants.push(Variant {
            attribute_index: j,
            attribute: a.clone(),
            text: counterfactual_swap(&base, &attrs[0], a, &cfg.pronouns)?,
        });
    }
    Ok(PairwiseGroup {
        group_id: group_id(tuple, target, line),
        target: target.into(),
        variants,
        toxicity: None,
    })
}

fn generate_offline(lists: &WordLists, cfg: &GenerationConfig) -> Result<Vec<PairwiseGroup>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::new();
    for tuple in 0..lists.attributes.len() {
        for target in &lists.targets {
            let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
            order.shuffle(&mut rng);
            for line in 0..cfg.sentences_per_prompt {
                let template = TEMPLATES[order[line % order.len()]];
                groups.push(offline_group(lists, cfg, tuple, target, line, template)?);
            }
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedReply {
    pub attribute_i: String,
    pub attribute_j: String,
    pub target: String,
    pub p1_reply: String,
    pub p2_reply: String,
}

type CacheKey = (String, String, String);

/// JSONL reply cache keyed by `(attribute_i, attribute_j, target)`.
#[derive(Debug, Default)]
pub struct ReplyCache {
    entries: BTreeMap<CacheKey, CachedReply>,
}

impl ReplyCache {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut cache = ReplyCache::default();
        if !path.exists() {
            return Ok(cache);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: CachedReply = serde_json::from_str(line)
                .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
            cache.insert(r);
        }
        Ok(cache)
    }

    pub fn get(&self, a_i: &str, a_j: &str, target: &str) -> Option<&CachedReply> {
        self.entries
            .get(&(a_i.to_string(), a_j.to_string(), target.to_string()))
    }

    pub fn insert(&mut self, r: CachedReply) {
        let key = (r.attribute_i.clone(), r.attribute_j.clone(), r.target.clone());
        self.entries.insert(key, r);
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for r in self.entries.values() {
            out.push_str(&serde_json::to_string(r).expect("reply serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Message {
    role: String,
    content: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
}

/// Minimal chat-completion client.
pub struct ChatClient {
    http: reqwest::blocking::Client,
    cfg: GenerationConfig,
    api_key: Option<String>,
}

impl ChatClient {
    pub fn new(cfg: &GenerationConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(format!("building HTTP client: {e}")))?;
        Ok(ChatClient {
            http,
            cfg: cfg.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
        })
    }

    fn post_once(&self, messages: &[Message]) -> std::result::Result<String, (bool, String)> {
        let mut req = self.http.post(&self.cfg.endpoint_url).json(&ChatRequest {
            model: &self.cfg.model_name,
            messages,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, format!("HTTP {status}")));
        }
        let body: serde_json::Value = resp.json().map_err(|e| (false, e.to_string()))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or((false, "response lacks choices[0].message.content".into()))
    }

    /// Sends `messages`, retrying transport failures with exponential backoff.
    pub fn complete(&self, messages: &[(&str, &str)]) -> Result<String> {
        let messages: Vec<Message> = messages
            .iter()
            .map(|(role, content)| Message {
                role: role.to_string(),
                content: content.to_string(),
            })
            .collect();
        let mut attempt = 0;
        loop {
            match self.post_once(&messages) {
                Ok(content) => return Ok(content),
                Err((retry, msg)) if retry && attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff_ms << attempt;
                    log::warn!("request failed ({msg}); retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err((_, msg)) => {
                    return Err(Error::Transport(format!(
                        "{} after {} attempts: {msg}",
                        self.cfg.endpoint_url,
                        attempt + 1
                    )))
                }
            }
        }
    }

    /// P1, then P2 as a second turn of the same conversation.
    pub fn fetch(&self, prompts: &PromptPair) -> Result<CachedReply> {
        let p1_reply = self.complete(&[("system", SYSTEM_PROMPT), ("user", &prompts.p1)])?;
        let p2_reply = self.complete(&[
            ("system", SYSTEM_PROMPT),
            ("user", &prompts.p1),
            ("assistant", &p1_reply),
            ("user", &prompts.p2),
        ])?;
        Ok(CachedReply {
            attribute_i: prompts.attribute_i.clone(),
            attribute_j: prompts.attribute_j.clone(),
            target: prompts.target.clone(),
            p1_reply,
            p2_reply,
        })
    }
}

/// Joins per-attribute reply lines by position into groups.
fn groups_from_replies(
    lists: &WordLists,
    tuple: usize,
    target: &str,
    replies: &[CachedReply],
    limit: usize,
) -> Vec<PairwiseGroup> {
    let attrs = &lists.attributes[tuple];
    let mut per_variant: Vec<BTreeMap<usize, String>> = Vec::with_capacity(attrs.len());
    per_variant.push(
        filter_lines(&replies[0].p1_reply, &attrs[0], target)
            .into_iter()
            .collect(),
    );
    for (r, a) in replies.iter().zip(&attrs[1..]) {
        per_variant.push(filter_lines(&r.p2_reply, a, target).into_iter().collect());
    }
    let mut groups = Vec::new();
    for (&line, base) in &per_variant[0] {
        if groups.len() == limit {
            break;
        }
        let mut variants = vec![Variant {
            attribute_index: 0,
            attribute: attrs[0].clone(),
            text: base.clone(),
        }];
        for (j, lines) in per_variant.iter().enumerate().skip(1) {
            if let Some(t) = lines.get(&line) {
                variants.push(Variant {
                    attribute_index: j,
                    attribute: attrs[j].clone(),
                    text: t.clone(),
                });
            }
        }
        if variants.len() != attrs.len() {
            log::warn!("line {} for ({}, {target}) has no counterpart; dropped", line + 1, attrs[0]);
            continue;
        }
        groups.push(PairwiseGroup {
            group_id: group_id(tuple, target, line),
            target: target.into(),
            variants,
            toxicity: None,
        });
    }
    groups
}

fn generate_online(lists: &WordLists, cfg: &GenerationConfig) -> Result<Vec<PairwiseGroup>> {
    let mut cache = match &cfg.cache_path {
        Some(p) => ReplyCache::load(p)?,
        None => ReplyCache::default(),
    };
    let mut jobs = Vec::new();
    for (ti, tuple) in lists.attributes.iter().enumerate() {
        for target in &lists.targets {
            for a_j in &tuple[1..] {
                jobs.push((ti, render_prompts(&tuple[0], a_j, target)?));
            }
        }
    }
    let missing: Vec<&PromptPair> = jobs
        .iter()
        .map(|(_, p)| p)
        .filter(|p| cache.get(&p.attribute_i, &p.attribute_j, &p.target).is_none())
        .collect();
    if !missing.is_empty() {
        let client = ChatClient::new(cfg)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_in_flight)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let fetched: Vec<Result<CachedReply>> =
            pool.install(|| missing.par_iter().map(|p| client.fetch(p)).collect());
        let mut first_err = None;
        for r in fetched {
            match r {
                Ok(r) => cache.insert(r),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        // keep whatever succeeded so a rerun only fetches the rest
        if let Some(p) = &cfg.cache_path {
            cache.save(p)?;
        }
        if let Some(e) = first_err {
            return Err(e);
        }
    }
    let mut groups = Vec::new();
    for (ti, tuple) in lists.attributes.iter().enumerate() {
        for target in &lists.targets {
            let replies: Vec<CachedReply> = tuple[1..]
                .iter()
                .map(|a_j| cache.get(&tuple[0], a_j, target).cloned().expect("fetched"))
                .collect();
            groups.extend(groups_from_replies(
                lists,
                ti,
                target,
                &replies,
                cfg.sentences_per_prompt,
            ));
        }
    }
    Ok(groups)
}

/// Generates `sentences_per_prompt` groups per (tuple, target). Groups that
/// fail validation are dropped with a log line.
pub fn generate_groups(lists: &WordLists, cfg: &GenerationConfig) -> Result<Corpus> {
    cfg.validate()?;
    lists.validate()?;
    let raw = if cfg.offline {
        generate_offline(lists, cfg)?
    } else {
        generate_online(lists, cfg)?
    };
    let groups = raw
        .into_iter()
        .filter(|g| match g.check(lists) {
            Ok(()) => true,
            Err(reason) => {
                log::warn!("dropping generated group {}: {reason}", g.group_id);
                false
            }
        })
        .collect();
    Corpus::new(groups, lists.clone())
}
