//! Renders the generation prompts, builds an offline corpus from slot
//! templates and parses a chat reply into sentences.

use pairdebias::corpus::WordLists;
use pairdebias::llm_gen::{generate_groups, parse_reply, render_prompts, GenerationConfig};

pub fn run_example() -> pairdebias::Result<()> {
    let prompts = render_prompts("he", "she", "boss")?;
    println!("P1: {}\nP2: {}", prompts.p1, prompts.p2);

    let reply = "1. He became the boss of a small bakery.\n2. She thanked the boss.\n3. He met the boss at noon.\n";
    for s in parse_reply(reply, &prompts)? {
        println!("kept: {s}");
    }

    let lists = WordLists::new(
        vec![vec!["he".into(), "she".into()], vec!["man".into(), "woman".into()]],
        vec!["boss".into(), "nurse".into()],
    )?;
    let cfg = GenerationConfig {
        sentences_per_prompt: 3,
        ..GenerationConfig::default()
    };
    let corpus = generate_groups(&lists, &cfg)?;
    println!("{} groups", corpus.len());
    for g in corpus.groups.iter().take(4) {
        println!("{}: {} | {}", g.group_id, g.variants[0].text, g.variants[1].text);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    run_example()
}
