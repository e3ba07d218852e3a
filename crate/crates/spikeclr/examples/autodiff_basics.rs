//! The reverse-mode tape: build a small expression, pull gradients back
//! through it, and cross-check one of them against finite differences.
//!
//!     cargo run --example autodiff_basics

use spikeclr::autodiff::{Tape, Tensor};

fn loss_value(w_data: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let w = tape.leaf(Tensor::new(vec![3, 2], w_data.to_vec()).unwrap());
    let h = tape.matmul(x, w).unwrap();
    let a = tape.relu(h);
    let n = tape.l2_normalize_rows(a).unwrap();
    let loss = tape.mean_all(n);
    tape.value(loss).item().unwrap()
}

fn main() -> spikeclr::Result<()> {
    let w0 = vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.9];

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?);
    let w = tape.leaf(Tensor::new(vec![3, 2], w0.clone())?);
    let h = tape.matmul(x, w)?;
    let a = tape.relu(h);
    let n = tape.l2_normalize_rows(a)?;
    let loss = tape.mean_all(n);
    println!("loss = {:.6}", tape.value(loss).item()?);
    println!("tape recorded {} nodes", tape.len());

    let mut grads = tape.backward(loss)?;
    let gw = grads.take(w).expect("w participates in the loss");
    println!("\ndL/dW:");
    for row in 0..3 {
        println!("  [{:+.6}, {:+.6}]", gw.data()[row * 2], gw.data()[row * 2 + 1]);
    }

    // nudge one coordinate and compare against the tape
    let eps = 1e-6;
    let mut wp = w0.clone();
    let mut wm = w0.clone();
    wp[2] += eps;
    wm[2] -= eps;
    let fd = (loss_value(&wp) - loss_value(&wm)) / (2.0 * eps);
    let ad = gw.data()[2];
    println!("\ncoordinate (1,0): tape {ad:+.9}, finite diff {fd:+.9}");
    assert!((ad - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
    println!("agreement within 1e-6");
    Ok(())
}
