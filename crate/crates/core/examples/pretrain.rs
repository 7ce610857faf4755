//! Sentence-autoencoding pretraining on the synthetic textbook, then a
//! checkpoint round trip through bytes.
//!
//! cargo run --release --example pretrain [epochs]

use asgk::data::{synth_dataset, synth_textbook, SynthSpec};
use asgk::pipeline::{run_pretrain, Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map_or(Ok(3), |s| s.parse())?;
    let spec = SynthSpec { n_samples: 40, image_size: 32, ..SynthSpec::default() };
    let ds = synth_dataset(&spec)?;
    let book = synth_textbook(&spec);
    let cfg = TrainConfig { image_size: 32, pretrain_epochs: epochs, ..TrainConfig::desk() };

    let (ckpt, logs) = run_pretrain(&cfg, &ds, &book)?;
    for log in &logs {
        println!("epoch {} lm {:.4} moved {:?}", log.epoch, log.losses["lm"], log.moved);
    }
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    println!("{} tensors, {} bytes, round trip equal: {}", ckpt.records.len(), bytes.len(), back.to_bytes() == bytes);
    Ok(())
}
