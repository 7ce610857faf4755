//! Max connected region extraction on a hand-made heat map with two blobs.
//!
//! cargo run --release --example region [tau]

use asgk::vision::{extract_region, HeatMap, RegionConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tau: f64 = std::env::args().nth(1).map_or(Ok(0.5), |s| s.parse())?;
    let size = 16;
    let blob = |r: usize, c: usize, cr: f64, cc: f64, rad: f64| {
        let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
        (-d2 / (2.0 * rad * rad)).exp()
    };
    let values = (0..size * size)
        .map(|i| {
            let (r, c) = (i / size, i % size);
            blob(r, c, 4.0, 4.0, 1.5).max(blob(r, c, 10.0, 11.0, 2.5))
        })
        .collect();
    let heat = HeatMap::square(size, values)?;
    let region = extract_region(&heat, &RegionConfig { tau, ..RegionConfig::default() });

    for r in 0..size {
        let line: String = (0..size)
            .map(|c| match (region.mask[r * size + c], heat.get(r, c) > tau) {
                (true, _) => '#',
                (false, true) => '+',
                _ => '.',
            })
            .collect();
        println!("{line}");
    }
    println!("bbox {:?} area {} fallback {}", region.bbox, region.area, region.fallback);
    Ok(())
}
