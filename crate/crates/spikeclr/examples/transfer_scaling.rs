//! Two measurements on top of one pretraining recipe: fine-tuning the
//! encoder on shape classes it never saw, and how few-shot accuracy moves
//! as the amount of unlabeled pretraining data grows.
//!
//!     cargo run --release --example transfer_scaling

use spikeclr::config::Config;
use spikeclr::event::{synth_moving_shapes, synth_moving_shapes_with_offset};
use spikeclr::rng::derive_seed;
use spikeclr::train::{run_data_quantity, run_transfer};

fn main() -> spikeclr::Result<()> {
    let mut cfg = Config::default();
    cfg.data.classes = 3;
    cfg.data.samples_per_class = 16;
    cfg.data.height = 12;
    cfg.data.width = 12;
    cfg.data.t_bins = 4;
    cfg.model.proj_dim = 16;
    cfg.pretrain.epochs = 8;
    cfg.pretrain.batch_size = 16;
    cfg.downstream.epochs = 12;
    cfg.eval.k = spikeclr::config::KOrFull::K(5);
    cfg.eval.splits = 2;
    cfg.eval.test_per_class = 10;
    cfg.eval.fractions = vec![0.25, 1.0];

    let dims = (cfg.data.width, cfg.data.height);
    let dur = cfg.data.duration_us;
    let source = synth_moving_shapes(3, 16, dims, dur, derive_seed(cfg.seed, "data", &[0]))?;
    // classes 5..8 instead of 0..3: genuinely unseen shapes
    let target_train = synth_moving_shapes_with_offset(3, 5, 16, dims, dur, derive_seed(cfg.seed, "data", &[2]))?;
    let target_test = synth_moving_shapes_with_offset(3, 5, 10, dims, dur, derive_seed(cfg.seed, "data", &[3]))?;

    println!("transfer: pretrain on {}, fine-tune on {}", source.name, target_train.name);
    let t = run_transfer(&source, &target_train, &target_test, &cfg)?;
    println!(
        "  pretrain loss {:.3} -> {:.3}",
        t.pretrain.report.loss_curve[0],
        t.pretrain.report.loss_curve.last().unwrap()
    );
    println!(
        "  {}-shot fine-tune on unseen classes: {:.3} +- {:.3}\n",
        t.summary.k, t.summary.mean_acc, t.summary.std_acc
    );

    println!("data quantity: same recipe, nested fractions of the pretraining set");
    let train = synth_moving_shapes(3, 16, dims, dur, derive_seed(cfg.seed, "data", &[0]))?;
    let test = synth_moving_shapes(3, 10, dims, dur, derive_seed(cfg.seed, "data", &[1]))?;
    for run in run_data_quantity(&train, &test, &cfg)? {
        println!(
            "  {:>4.0}% of data ({:>2} samples): fine-tune acc {:.3} +- {:.3}",
            run.fraction * 100.0,
            run.pretrain_samples,
            run.summary.mean_acc,
            run.summary.std_acc
        );
    }
    Ok(())
}
