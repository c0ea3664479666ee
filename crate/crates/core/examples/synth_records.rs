//! Generates the three synthetic tasks from the bundled word lists, writes
//! one record file per task and prints a sample record of each.
//!
//! Usage: `synth_records [out_dir] [seed]`

use std::env;
use std::path::PathBuf;

use scpr::data::{generate_bundled, records_vocab, write_records, SyntheticSpec, TargetMode, Task};

fn main() -> scpr::Result<()> {
    let dir: PathBuf = env::args().nth(1).map(PathBuf::from).unwrap_or_else(env::temp_dir);
    let seed: u64 = env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    for task in [Task::Parallelogram, Task::ListCompletion, Task::Choice] {
        let mut records = Vec::new();
        let modes: &[TargetMode] = if task == Task::Parallelogram { &[TargetMode::Diagonal, TargetMode::Edge] } else { &[TargetMode::Diagonal] };
        for &mode in modes {
            let mut spec = SyntheticSpec::new(task, 10, seed);
            spec.target_mode = mode;
            records.extend(generate_bundled(&spec)?);
        }
        let vocab = records_vocab(&records)?;
        let path = dir.join(format!("{task:?}.tsv").to_lowercase());
        write_records(&path, &records, &vocab)?;
        let r = &records[0];
        println!("{task:?}: {} records, vocab {} -> {}", records.len(), vocab.len(), path.display());
        println!("  context: {}", r.context.join(" "));
        println!("  target:  {:?}", r.distribution());
        if !r.forbidden.is_empty() {
            println!("  forbidden: {:?}", r.forbidden);
        }
    }
    Ok(())
}
