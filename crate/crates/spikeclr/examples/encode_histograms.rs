//! Turn an event stream into the two dense representations the models eat:
//! binned polarity histograms and a bilinearly-weighted voxel grid.
//!
//!     cargo run --example encode_histograms

use spikeclr::event::synth_moving_shapes;
use spikeclr::repr::{downsample, encode_histogram, encode_voxel_grid, normalize_slices};

fn main() -> spikeclr::Result<()> {
    let ds = synth_moving_shapes(2, 1, (16, 16), 2000, 11)?;
    let stream = &ds.samples[0].0;
    println!("stream: {} events over {}us", stream.len(), stream.duration_us);

    let raw = encode_histogram(stream, 4, false)?;
    println!(
        "\nhistogram [T={}, 2, {}, {}], raw counts",
        raw.t_bins(),
        raw.height(),
        raw.width()
    );
    // every event lands in exactly one cell, so mass equals event count
    println!("  total mass {} (= event count)", raw.tensor().sum());
    for t in 0..raw.t_bins() {
        let slice: f64 = raw.step(t).data().iter().sum();
        println!("  bin {t}: {slice} events");
    }

    let mut norm = raw.clone();
    normalize_slices(&mut norm);
    let max_after = norm.tensor().data().iter().fold(0.0f64, |m, &v| m.max(v));
    println!("per-slice normalization brings the max to {max_after}");

    // voxel grids split each event across the two nearest bin centers
    let voxel = encode_voxel_grid(stream, 4)?;
    println!(
        "\nvoxel grid mass {:.12} (bilinear weights still sum to 1 per event)",
        voxel.tensor().sum()
    );

    // 2x pooling sums counts, so a 16x16 recording can feed an 8x8 model
    let small = downsample(&raw, 2)?;
    println!(
        "\ndownsample x2: [{}, 2, {}, {}] mass {}",
        small.t_bins(),
        small.height(),
        small.width(),
        small.tensor().sum()
    );
    Ok(())
}
