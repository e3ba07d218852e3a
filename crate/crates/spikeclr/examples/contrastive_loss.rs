//! NT-Xent on toy embeddings: tight positive pairs score a low loss,
//! scrambled pairs score near the ln(2N-1) chance floor, and temperature
//! controls how sharply the softmax separates them.
//!
//!     cargo run --example contrastive_loss

use rand::Rng;
use spikeclr::autodiff::{Tape, Tensor};
use spikeclr::contrastive::{cosine_sim_matrix, nt_xent, nt_xent_tape};
use spikeclr::rng::stream_rng;

fn pairs(n: usize, noise: f64, seed: u64) -> Tensor {
    let dim = 8;
    let mut rng = stream_rng(seed, "toy", &[n as u64]);
    let mut data = Vec::with_capacity(2 * n * dim);
    for _ in 0..n {
        let anchor: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        for _ in 0..2 {
            data.extend(anchor.iter().map(|v| v + noise * (rng.random::<f64>() - 0.5)));
        }
    }
    // rows (2i, 2i+1) hold the two views of sample i
    Tensor::new(vec![2 * n, dim], data).unwrap()
}

fn main() -> spikeclr::Result<()> {
    let n = 16;
    let chance = (2.0 * n as f64 - 1.0).ln();
    println!("batch of {n} pairs, uniform-similarity loss would be ln(2N-1) = {chance:.4}\n");

    for (label, noise) in [("aligned views ", 0.05), ("noisy views   ", 0.8), ("unrelated rows", 10.0)] {
        let z = pairs(n, noise, 1);
        println!("{label} nt_xent = {:.4}", nt_xent(&z, 0.5)?);
    }

    println!("\ntemperature sweep on the noisy batch:");
    let z = pairs(n, 0.8, 1);
    for tau in [0.1, 0.5, 1.0, 5.0] {
        println!("  tau {tau:<4} loss {:.4}", nt_xent(&z, tau)?);
    }

    // the tape version is the one training differentiates through
    let mut tape = Tape::new();
    let zid = tape.leaf(pairs(n, 0.8, 1));
    let loss = nt_xent_tape(&mut tape, zid, 0.5)?;
    let mut grads = tape.backward(loss)?;
    let g = grads.take(zid).expect("embeddings get a gradient");
    println!(
        "\ntape loss {:.6} matches plain {:.6}; grad max |g| {:.4}",
        tape.value(loss).item()?,
        nt_xent(&pairs(n, 0.8, 1), 0.5)?,
        g.max_abs()
    );

    let sim = cosine_sim_matrix(&pairs(2, 0.05, 1))?;
    println!("\ncosine similarities of 2 tight pairs (views adjacent):");
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:+.2}", sim.data()[i * 4 + j])).collect();
        println!("  [{}]", row.join(", "));
    }
    Ok(())
}
