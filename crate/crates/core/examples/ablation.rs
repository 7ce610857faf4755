//! The four signal variants (baseline, +IA, +EA, +IA+EA) over a few seeds,
//! scored on the validation split.
//!
//! cargo run --release --example ablation [n_seeds]

use std::time::Instant;

use asgk::data::{synth_dataset, synth_textbook, Partition, SynthSpec};
use asgk::pipeline::{evaluate_split, run_all, TrainConfig};

const VARIANTS: [(&str, bool, bool); 4] = [("baseline", false, false), ("+IA", true, false), ("+EA", false, true), ("+IA+EA", true, true)];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map_or(Ok(3), |s| s.parse())?;
    let mut sums = [(0.0, 0.0); 4];
    for seed in 0..seeds {
        let spec = SynthSpec { seed, ..SynthSpec::default() };
        let ds = synth_dataset(&spec)?;
        let book = synth_textbook(&spec);
        for (k, (name, internal, external)) in VARIANTS.iter().enumerate() {
            let start = Instant::now();
            let cfg = TrainConfig {
                seed,
                use_internal: *internal,
                use_external: *external,
                ..TrainConfig::desk()
            };
            let run = run_all(&cfg, &ds, &book)?;
            let (_, report) = evaluate_split(&run.model, &ds, Partition::Val)?;
            let auc = report.auc_mean.unwrap_or(f64::NAN);
            sums[k].0 += report.cider_d;
            sums[k].1 += auc;
            println!(
                "seed {seed} {name:<9} cider {:.4} auc {auc:.4} bleu4 {:.4} ({:.0}s)",
                report.cider_d,
                report.bleu[3],
                start.elapsed().as_secs_f64()
            );
        }
    }
    println!("{:<9} {:>8} {:>8}", "variant", "cider", "auc");
    for ((name, _, _), (c, a)) in VARIANTS.iter().zip(sums) {
        println!("{name:<9} {:>8.4} {:>8.4}", c / seeds as f64, a / seeds as f64);
    }
    Ok(())
}
