//! Contrastive pretraining on a small synthetic dataset, end to end:
//! the loss should fall well below its starting value within a few epochs.
//!
//!     cargo run --release --example pretrain_small

use spikeclr::config::Config;
use spikeclr::event::synth_moving_shapes;
use spikeclr::train::pretrain;

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

    let ds = synth_moving_shapes(
        cfg.data.classes,
        cfg.data.samples_per_class,
        (cfg.data.width, cfg.data.height),
        cfg.data.duration_us,
        21,
    )?;
    println!("pretraining on {} ({} samples)", ds.name, ds.len());

    let out = pretrain(&ds, &cfg)?;
    let r = &out.report;
    println!(
        "{} params, {} LIF sites in the backbone\n",
        r.trained_params,
        out.backbone.lif_site_count()
    );
    let first = r.loss_curve[0];
    for (epoch, loss) in r.loss_curve.iter().enumerate() {
        let bar = "#".repeat((loss / first * 40.0).round() as usize);
        println!("epoch {epoch:>2}  loss {loss:.4}  {bar}");
    }
    let last = *r.loss_curve.last().unwrap();
    println!(
        "\nloss {first:.4} -> {last:.4} ({:.1}% drop) in {:.1}s, {} dead embedding rows",
        (1.0 - last / first) * 100.0,
        r.wall_clock_s,
        r.dead_embedding_rows
    );
    Ok(())
}
