//! Online generation against a local chat-completion stub: the stub answers
//! the first prompt with numbered sentences and the second with the same
//! sentences after the attribute swap. Transient 503s exercise the retries.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pairdebias::corpus::WordLists;
use pairdebias::llm_gen::{generate_groups, GenerationConfig};

pub mod stub {
    use super::*;

    pub struct Stub {
        pub url: String,
        pub hits: Arc<AtomicUsize>,
    }

    fn between<'a>(s: &'a str, start: &str, end: &str) -> Option<&'a str> {
        let i = s.find(start)? + start.len();
        let j = s[i..].find(end)? + i;
        Some(&s[i..j])
    }

    fn sentences(a: &str, target: &str) -> String {
        (1..=10)
            .map(|i| format!("{i}. The {a} met a {target} on day {i} and waved at the {target}."))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Reply content for a request body, or `None` when it is not a chat
    /// request this stub understands. `garble` replaces that 0-based line
    /// of every second-turn reply with text lacking both words.
    pub fn answer(body: &serde_json::Value, garble: Option<usize>) -> Option<String> {
        let msgs = body["messages"].as_array()?;
        let last = msgs.last()?["content"].as_str()?;
        if let Some(tuple) = between(last, "tuple (", ")") {
            let (a, target) = tuple.split_once(", ")?;
            return Some(sentences(a, target));
        }
        let (a_i, a_j) = between(last, "Replace the term ", ", and")?.split_once(" to ")?;
        let previous = msgs.iter().rev().find(|m| m["role"] == "assistant")?["content"].as_str()?;
        Some(
            previous
                .lines()
                .enumerate()
                .map(|(i, l)| match garble {
                    Some(g) if g == i => format!("{}. I would rather not.", i + 1),
                    _ => l.replace(&format!(" {a_i} "), &format!(" {a_j} ")),
                })
                .collect::<Vec<_>>()
                .join("\n"),
        )
    }

    fn respond(stream: &mut std::net::TcpStream, status: &str, body: &str) {
        let _ = write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
    }

    /// Serves on an ephemeral port; the first `fail_first` requests get 503.
    pub fn spawn(fail_first: usize) -> std::io::Result<Stub> {
        spawn_with(fail_first, None)
    }

    pub fn spawn_with(fail_first: usize, garble: Option<usize>) -> std::io::Result<Stub> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let url = format!("http://{}/v1/chat/completions", listener.local_addr()?);
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
                let mut len = 0;
                let mut line = String::new();
                while reader.read_line(&mut line).unwrap_or(0) > 0 && line != "\r\n" {
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    line.clear();
                }
                let mut body = vec![0; len];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                let n = counter.fetch_add(1, Ordering::SeqCst);
                if n < fail_first {
                    respond(&mut stream, "503 Service Unavailable", "{}");
                    continue;
                }
                let reply = serde_json::from_slice(&body).ok().and_then(|b| answer(&b, garble));
                match reply {
                    Some(content) => {
                        let out = serde_json::json!({
                            "choices": [{"message": {"role": "assistant", "content": content}}]
                        });
                        respond(&mut stream, "200 OK", &out.to_string());
                    }
                    None => respond(&mut stream, "400 Bad Request", "{}"),
                }
            }
        });
        Ok(Stub { url, hits })
    }
}

pub fn run_example() -> pairdebias::Result<()> {
    let server = stub::spawn(2).map_err(|e| pairdebias::Error::io("127.0.0.1:0", e))?;
    let lists = WordLists::new(
        vec![vec!["he".into(), "she".into()]],
        vec!["nurse".into(), "pilot".into()],
    )?;
    let cfg = GenerationConfig {
        endpoint_url: server.url.clone(),
        offline: false,
        max_in_flight: 1,
        backoff_ms: 10,
        ..GenerationConfig::default()
    };
    let corpus = generate_groups(&lists, &cfg)?;
    println!(
        "{} groups from {} requests (2 answered with 503)",
        corpus.len(),
        server.hits.load(Ordering::SeqCst)
    );
    for v in &corpus.groups[0].variants {
        println!("  {}: {}", v.attribute, v.text);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    run_example()
}
