//! Synthesizes the default dataset, runs the three training phases at desk
//! scale and scores the held-out split.
//!
//! cargo run --release --example full_pipeline [seed]

use std::time::Instant;

use asgk::data::{synth_dataset, synth_textbook, Partition, SynthSpec};
use asgk::pipeline::{evaluate_split, run_all, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let spec = SynthSpec { seed, ..SynthSpec::default() };
    let ds = synth_dataset(&spec)?;
    let book = synth_textbook(&spec);
    let cfg = TrainConfig { seed, ..TrainConfig::desk() };

    let start = Instant::now();
    let run = run_all(&cfg, &ds, &book)?;
    for log in &run.logs {
        println!("{}", serde_json::to_string(log)?);
    }
    let (preds, report) = evaluate_split(&run.model, &ds, Partition::Test)?;
    for (id, r) in preds.ids.iter().zip(&preds.reports).take(3) {
        println!("{id}\t{r}");
    }
    print!("{}", report.table());
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
