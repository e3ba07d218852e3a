//! Does contrastive pretraining buy anything? Freeze the encoder, fit a
//! linear classifier on k labeled examples per class, and compare against
//! the same probe on a randomly initialized encoder.
//!
//!     cargo run --release --example few_shot_probe

use spikeclr::config::Config;
use spikeclr::event::synth_moving_shapes;
use spikeclr::rng::derive_seed;
use spikeclr::snn::build_backbone;
use spikeclr::train::{pretrain, run_probe};

fn main() -> spikeclr::Result<()> {
    let mut cfg = Config::default();
    cfg.data.classes = 3;
    cfg.data.samples_per_class = 20;
    cfg.data.height = 12;
    cfg.data.width = 12;
    cfg.data.t_bins = 4;
    cfg.model.proj_dim = 16;
    cfg.pretrain.epochs = 12;
    cfg.pretrain.batch_size = 16;
    cfg.downstream.epochs = 20;
    cfg.eval.k = spikeclr::config::KOrFull::K(5);
    cfg.eval.splits = 3;
    cfg.eval.test_per_class = 15;

    let train = synth_moving_shapes(
        cfg.data.classes,
        cfg.data.samples_per_class,
        (cfg.data.width, cfg.data.height),
        cfg.data.duration_us,
        derive_seed(cfg.seed, "data", &[0]),
    )?;
    let test = synth_moving_shapes(
        cfg.data.classes,
        cfg.eval.test_per_class,
        (cfg.data.width, cfg.data.height),
        cfg.data.duration_us,
        derive_seed(cfg.seed, "data", &[1]),
    )?;

    println!("pretraining ({} epochs)...", cfg.pretrain.epochs);
    let out = pretrain(&train, &cfg)?;
    let curve = &out.report.loss_curve;
    println!("loss {:.3} -> {:.3}\n", curve[0], curve.last().unwrap());

    let (_, with_pretrain) = run_probe(&out.backbone, &train.name, &train, &test, &cfg)?;
    let random = build_backbone(
        cfg.model.backbone,
        cfg.data.height as usize,
        cfg.data.width as usize,
        cfg.model.lif,
        derive_seed(cfg.seed, "model", &[0]),
    )?;
    let (_, from_scratch) = run_probe(&random, "none", &train, &test, &cfg)?;

    println!(
        "5-shot linear probe over {} splits ({} classes, chance {:.3}):",
        cfg.eval.splits,
        cfg.data.classes,
        1.0 / cfg.data.classes as f64
    );
    println!(
        "  pretrained encoder  {:.3} +- {:.3}",
        with_pretrain.mean_acc, with_pretrain.std_acc
    );
    println!(
        "  random encoder      {:.3} +- {:.3}",
        from_scratch.mean_acc, from_scratch.std_acc
    );
    Ok(())
}
