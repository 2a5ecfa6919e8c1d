//! Runs every pipeline stage on a small offline configuration and prints
//! the before/after report. Pass a directory to keep the artifacts.

use pairdebias::pipeline::{run_pipeline, PipelineConfig};

pub fn run_example_in(out_dir: &std::path::Path) -> pairdebias::Result<()> {
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/data");
    let mut cfg = PipelineConfig::load(format!("{data}/demo.conf"))?;
    cfg.out_dir = out_dir.to_path_buf();
    for o in [
        "gen.sentences_per_prompt=2",
        "encoder.d_model=16",
        "pretrain.epochs=2",
        "train.epochs=1",
        "train.k=3",
    ] {
        cfg.apply_override(o)?;
    }
    let report = run_pipeline(&cfg)?;
    println!("mean D {:?} -> {:?}", report.before.mean_d, report.after.mean_d);
    print!("{}", std::fs::read_to_string(out_dir.join("report.md")).unwrap_or_default());
    Ok(())
}

pub fn run_example() -> pairdebias::Result<()> {
    let dir = std::env::temp_dir().join(format!("pairdebias-demo-{}", std::process::id()));
    let result = run_example_in(&dir);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

#[allow(dead_code)]
fn main() -> pairdebias::Result<()> {
    match std::env::args().nth(1) {
        Some(dir) => run_example_in(std::path::Path::new(&dir)),
        None => run_example(),
    }
}
