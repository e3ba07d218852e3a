//! A single leaky integrate-and-fire neuron driven by a step current:
//! membrane charges, crosses threshold, spikes, resets, repeats.
//!
//!     cargo run --example lif_dynamics

use spikeclr::autodiff::Tensor;
use spikeclr::snn::{lif_step, LifConfig, LifState, ResetForm};

fn trace(cfg: &LifConfig, label: &str) -> spikeclr::Result<()> {
    println!("{label}: beta={} v_th={} ({:?})", cfg.beta, cfg.v_th, cfg.reset);
    let mut state = LifState::zeros(&[1]);
    let mut spikes = 0;
    for step in 0..24 {
        // current switches on at step 4
        let i = if step < 4 { 0.0 } else { 0.35 };
        let input = Tensor::from_vec(vec![i]);
        let (s, next) = lif_step(&input, &state, cfg)?;
        let u = next.u.data()[0];
        let fired = s.data()[0] == 1.0;
        spikes += fired as usize;
        let bar = "#".repeat((u.max(0.0) * 20.0).round() as usize);
        println!("  t={step:>2} u={u:+.3} |{bar:<24}| {}", if fired { "spike" } else { "" });
        state = next;
    }
    println!("  {spikes} spikes\n");
    Ok(())
}

fn main() -> spikeclr::Result<()> {
    let base = LifConfig::default();
    trace(&base, "zero-then-decay reset")?;
    trace(
        &LifConfig {
            reset: ResetForm::Subtract,
            ..base
        },
        "subtract reset",
    )?;

    // a leakier membrane needs more drive to reach threshold
    trace(
        &LifConfig {
            beta: 0.6,
            ..base
        },
        "leaky (beta 0.6)",
    )?;
    Ok(())
}
