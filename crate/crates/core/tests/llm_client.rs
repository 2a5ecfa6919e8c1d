#[allow(dead_code)]
#[path = "../examples/chat_mock_server.rs"]
mod chat_mock_server;

use std::sync::atomic::Ordering;

use chat_mock_server::stub;
use pairdebias::corpus::{ingest_str, WordLists};
use pairdebias::llm_gen::{generate_groups, GenerationConfig, ReplyCache};
use pairdebias::Error;

fn lists() -> WordLists {
    WordLists::new(
        vec![vec!["he".into(), "she".into()]],
        vec!["nurse".into(), "pilot".into(), "baker".into()],
    )
    .unwrap()
}

fn online(url: &str) -> GenerationConfig {
    GenerationConfig {
        endpoint_url: url.into(),
        offline: false,
        backoff_ms: 1,
        timeout_secs: 5,
        ..GenerationConfig::default()
    }
}

fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}/v1/chat/completions")
}

#[test]
fn online_groups_pass_corpus_invariants() {
    let s = stub::spawn(0).unwrap();
    let corpus = generate_groups(&lists(), &online(&s.url)).unwrap();
    assert_eq!(corpus.len(), 3 * 10);
    assert_eq!(s.hits.load(Ordering::SeqCst), 3 * 2);
    let back = ingest_str(&corpus.to_jsonl(), &lists());
    assert!(back.rejected.is_empty());
    for g in &corpus.groups {
        assert!(g.variant(1).text.contains(" she "));
    }
}

#[test]
fn transient_failures_are_retried() {
    let s = stub::spawn(3).unwrap();
    let cfg = GenerationConfig {
        max_in_flight: 1,
        ..online(&s.url)
    };
    assert_eq!(generate_groups(&lists(), &cfg).unwrap().len(), 30);
    assert_eq!(s.hits.load(Ordering::SeqCst), 3 + 6);
}

#[test]
fn exhausted_retries_are_a_transport_error() {
    let s = stub::spawn(usize::MAX).unwrap();
    let cfg = GenerationConfig {
        max_in_flight: 1,
        max_retries: 3,
        ..online(&s.url)
    };
    let e = generate_groups(&lists(), &cfg).unwrap_err();
    assert!(matches!(e, Error::Transport(_)), "{e}");
    assert_eq!(e.exit_code(), 5);
    let e = generate_groups(&lists(), &online(&dead_url())).unwrap_err();
    assert!(matches!(e, Error::Transport(_)), "{e}");
}

#[test]
fn lines_lacking_the_words_are_dropped() {
    let s = stub::spawn_with(0, Some(2)).unwrap();
    let corpus = generate_groups(&lists(), &online(&s.url)).unwrap();
    assert_eq!(corpus.len(), 3 * 9);
    assert!(corpus.groups.iter().all(|g| !g.group_id.ends_with("-2")));
}

#[test]
fn cached_replies_make_reruns_offline() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("replies.jsonl");
    let s = stub::spawn(0).unwrap();
    let cfg = GenerationConfig {
        cache_path: Some(cache.clone()),
        ..online(&s.url)
    };
    let first = generate_groups(&lists(), &cfg).unwrap();
    assert_eq!(ReplyCache::load(&cache).unwrap().len(), 3);

    let rerun = GenerationConfig {
        endpoint_url: dead_url(),
        ..cfg
    };
    let second = generate_groups(&lists(), &rerun).unwrap();
    assert_eq!(first.to_jsonl(), second.to_jsonl());
    assert_eq!(s.hits.load(Ordering::SeqCst), 6);
}
