//! Generate a synthetic moving-shape dataset, round-trip it through the
//! on-disk format, and print a crude render of one recording.
//!
//!     cargo run --example synth_dataset

use spikeclr::event::{read_dataset_dir, synth_moving_shapes, write_dataset_dir, Polarity};
use spikeclr::repr::encode_histogram;

fn main() -> spikeclr::Result<()> {
    let ds = synth_moving_shapes(3, 10, (16, 16), 2000, 7)?;
    println!(
        "generated {}: {} samples, {} classes, sensor {:?}",
        ds.name,
        ds.len(),
        ds.num_classes,
        ds.sensor()
    );

    let dir = std::env::temp_dir().join("spikeclr_synth_demo");
    let _ = std::fs::remove_dir_all(&dir);
    write_dataset_dir(&ds, &dir, false)?;
    let back = read_dataset_dir(&dir)?;
    assert_eq!(ds.samples, back.samples);
    println!("round-tripped through {} unchanged", dir.display());

    let (stream, class) = &ds.samples[0];
    let pos = stream.events().iter().filter(|e| e.p == Polarity::Pos).count();
    println!(
        "\nsample 0 (class {class}): {} events over {}us ({} pos / {} neg)",
        stream.len(),
        stream.duration_us,
        pos,
        stream.len() - pos
    );
    for e in stream.events().iter().take(5) {
        println!("  t={:>5}us  ({:>2},{:>2})  {:?}", e.t, e.x, e.y, e.p);
    }

    // collapse to one time bin and sketch where the events landed
    let hist = encode_histogram(stream, 1, false)?;
    println!("\nevent counts, both polarities (. = empty):");
    for y in 0..hist.height() {
        let mut row = String::new();
        for x in 0..hist.width() {
            let n = hist.get(0, 0, y, x) + hist.get(0, 1, y, x);
            row.push(match n as usize {
                0 => '.',
                1..=2 => '+',
                _ => '#',
            });
        }
        println!("  {row}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
