//! An untrained tag-graph encoder on a random visual feature: node
//! probabilities, row-stochastic edges and the strongest links.
//!
//! cargo run --release --example tag_graph

use asgk::graph::{GraphConfig, GraphEncoder};
use asgk::tensor::{ParamStore, SeededRng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = SeededRng::new(1);
    let mut store = ParamStore::new();
    let cfg = GraphConfig { n_tags: 6, input_dim: 16, dim: 8, heads: 2, ..GraphConfig::default() };
    let enc = GraphEncoder::new(&mut store, &mut rng, "graph", cfg.clone())?;
    let f = rng.uniform_tensor(&[1, cfg.input_dim], -1.0, 1.0);
    let graph = enc.forward(&store, &f)?;

    let n = cfg.n_tags;
    let e = graph.edges.data();
    println!("node probs {:.3?}", graph.node_probs.data());
    println!("tag probs  {:.3?}", graph.tag_probs.data());
    for i in 0..n {
        let row = &e[i * n..(i + 1) * n];
        let (j, w) = row.iter().enumerate().filter(|&(j, _)| j != i).fold((0, f64::MIN), |b, (j, &w)| if w > b.1 { (j, w) } else { b });
        println!("node {i}: row sum {:.12} strongest link -> {j} ({w:.3})", row.iter().sum::<f64>());
    }
    Ok(())
}
