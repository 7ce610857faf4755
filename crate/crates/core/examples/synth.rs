//! Writes a small synthetic dataset to disk and prints what it contains.
//!
//! cargo run --release --example synth [out_dir]

use asgk::data::{synth_dataset, synth_textbook, write_dataset, Partition, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_out".into());
    let spec = SynthSpec { n_samples: 60, ..SynthSpec::default() };
    let ds = synth_dataset(&spec)?;
    let book = synth_textbook(&spec);
    write_dataset(out.as_ref(), &ds, &book)?;

    println!("wrote {} samples and {} textbook lines to {out}", ds.samples.len(), book.len());
    for (name, count) in ds.tag_names.iter().zip(ds.tag_histogram()) {
        println!("{name:<22} {count}");
    }
    for s in ds.part(Partition::Train).take(3) {
        println!("{} {:?}\n  {}", s.id, s.region_truth, s.report);
    }
    Ok(())
}
