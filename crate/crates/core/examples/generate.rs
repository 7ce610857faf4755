//! Trains a small model end to end, then describes a few test images:
//! the generated report next to the reference and the active tags.
//!
//! cargo run --release --example generate

use asgk::data::{synth_dataset, synth_textbook, Partition, SynthSpec};
use asgk::pipeline::{run_all, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec { n_samples: 80, image_size: 48, ..SynthSpec::default() };
    let ds = synth_dataset(&spec)?;
    let book = synth_textbook(&spec);
    let cfg = TrainConfig {
        image_size: 48,
        pretrain_epochs: 2,
        backbone_epochs: 4,
        train_epochs: 4,
        ..TrainConfig::desk()
    };
    let model = run_all(&cfg, &ds, &book)?.model;

    for s in ds.part(Partition::Test).take(4) {
        let (report, graph) = model.describe(&s.image)?;
        let active: Vec<&str> = graph
            .node_probs
            .data()
            .iter()
            .zip(&model.tag_names)
            .filter(|(p, _)| **p > 0.5)
            .map(|(_, name)| name.as_str())
            .collect();
        println!("{}\n  got {report}\n  ref {}\n  tags {active:?}", s.id, s.report);
    }
    Ok(())
}
