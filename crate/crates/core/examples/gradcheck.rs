//! Compares autodiff gradients with central differences on a focal-loss head
//! and a small attention-like chain.
//!
//! cargo run --release --example gradcheck

use asgk::graph::{focal_loss, FocalConfig};
use asgk::tensor::gradcheck::finite_diff_check;
use asgk::tensor::SeededRng;
use asgk::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = SeededRng::new(7);
    let y = [1.0, 0.0, 0.0, 1.0, 0.0];
    let logits = rng.uniform_tensor(&[1, 5], -2.0, 2.0);
    let focal = finite_diff_check(
        |x| focal_loss(&x[0].sigmoid()?, &y, &FocalConfig { alpha: 0.25, gamma: 2.0 }),
        &[logits],
        1e-5,
    )?;
    println!("focal loss        max rel err {focal:.2e}");

    let q = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
    let k = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
    let v = rng.uniform_tensor(&[5, 2], -1.0, 1.0);
    let attn = finite_diff_check(|x| x[0].matmul_nt(&x[1])?.scale(0.5)?.softmax(1)?.matmul(&x[2])?.tanh()?.sum(), &[q, k, v], 1e-5)?;
    println!("softmax attention max rel err {attn:.2e}");

    let t = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4])?;
    let ln = finite_diff_check(
        |x| {
            let g = Tensor::new(&[3], vec![1.0, 0.5, 2.0])?;
            let b = Tensor::new(&[3], vec![0.1, 0.0, -0.1])?;
            x[0].layer_norm(&g, &b)?.powf(2.0)?.sum()
        },
        &[t],
        1e-5,
    )?;
    println!("layer norm        max rel err {ln:.2e}");
    Ok(())
}
