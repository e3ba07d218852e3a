//! The three augmentation families, applied one at a time, then composed
//! into the correlated view pairs contrastive pretraining trains on.
//!
//!     cargo run --example augment_views

use spikeclr::augment::{aug_polarity, aug_spatial, aug_temporal, make_view_pair, AugmentPolicy};
use spikeclr::event::synth_moving_shapes;
use spikeclr::repr::encode_histogram;
use spikeclr::rng::stream_rng;

fn main() -> spikeclr::Result<()> {
    let ds = synth_moving_shapes(2, 1, (16, 16), 2000, 3)?;
    let stream = &ds.samples[0].0;
    let policy = AugmentPolicy::default();
    let base = encode_histogram(stream, 4, true)?;
    let mass = |s: &spikeclr::repr::FrameSequence| s.tensor().sum();
    println!("base histogram mass {:.4}", mass(&base));

    let mut rng = stream_rng(42, "demo", &[0]);

    // crop+resize, flip, cyclic roll; the resize rescales intensities
    let spatial = aug_spatial(&base, &mut rng, &policy)?;
    println!("spatial   mass {:.4} (crop region stretched back to full size)", mass(&spatial));

    // gain and per-channel shift followed by a clip; mass changes
    let polarity = aug_polarity(&base, &mut rng, &policy)?;
    println!("polarity  mass {:.4} (intensities rescaled)", mass(&polarity));

    // a window crop on the raw stream, before any binning
    let cropped = aug_temporal(stream, &mut rng, &policy)?;
    println!(
        "temporal  {} of {} events kept, duration {}us -> {}us",
        cropped.len(),
        stream.len(),
        stream.duration_us,
        cropped.duration_us
    );

    // two independent draws of the full pipeline = one training pair
    let pair = make_view_pair(stream, &policy, 4, &mut rng, 0)?;
    println!(
        "\nview pair: a mass {:.4}, b mass {:.4}, same source {}",
        mass(&pair.view_a),
        mass(&pair.view_b),
        pair.source_index
    );

    // the draws are seeded; the same stream rng gives the same views
    let mut r1 = stream_rng(42, "demo", &[1]);
    let mut r2 = stream_rng(42, "demo", &[1]);
    let p1 = make_view_pair(stream, &policy, 4, &mut r1, 0)?;
    let p2 = make_view_pair(stream, &policy, 4, &mut r2, 0)?;
    assert_eq!(p1.view_a.tensor().data(), p2.view_a.tensor().data());
    println!("same seed, same views: reproducible");
    Ok(())
}
