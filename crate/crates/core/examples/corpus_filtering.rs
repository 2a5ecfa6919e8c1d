//! Validates a JSONL group file, reports rejected lines, applies the
//! toxicity filter and shows counterfactual swaps.

use pairdebias::corpus::{counterfactual_swap, ingest_str, toxicity_filter, PronounMap, WordLists};

const GROUPS: &str = r#"{"group_id":"a","target":"boss","variants":[{"attribute_index":0,"attribute":"he","text":"He is the boss."},{"attribute_index":1,"attribute":"she","text":"She is the boss."}],"toxicity":[0.1,0.2]}
{"group_id":"b","target":"boss","variants":[{"attribute_index":0,"attribute":"he","text":"He fired the boss."},{"attribute_index":1,"attribute":"she","text":"She fired the boss."}],"toxicity":[0.7,0.4]}
{"group_id":"c","target":"boss","variants":[{"attribute_index":0,"attribute":"he","text":"He thanked the boss."},{"attribute_index":1,"attribute":"she","text":"She thanked the boss."}],"toxicity":[0.0,0.05]}
{"group_id":"d","target":"boss","variants":[{"attribute_index":0,"attribute":"he","text":"He is the boss."}]}
"#;

pub fn run_example() -> pairdebias::Result<()> {
    let lists = WordLists::new(vec![vec!["he".into(), "she".into()]], vec!["boss".into()])?;
    let ingested = ingest_str(GROUPS, &lists);
    println!("{} valid groups", ingested.corpus.len());
    print!("{}", ingested.report_jsonl());

    let kept = toxicity_filter(&ingested.corpus, 0.6)?;
    let ids: Vec<&str> = kept.groups.iter().map(|g| g.group_id.as_str()).collect();
    println!("least toxic: {ids:?}");

    let map = PronounMap::default();
    let swapped = counterfactual_swap("He said his brother admired him.", "he", "she", &map)?;
    println!("{swapped}");
    let back = counterfactual_swap(&swapped, "she", "he", &map.reversed())?;
    println!("{back}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    run_example()
}
