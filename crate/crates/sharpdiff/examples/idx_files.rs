//! Reads MNIST-style IDX files, or writes and re-reads a tiny one.
//!
//! `cargo run --example idx_files -- IMAGES LABELS`

use std::path::Path;

use sharpdiff::harness::idx;

fn main() -> sharpdiff::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [images, labels] = args.as_slice() {
        let set = idx::load_mnist_idx(Path::new(images), Path::new(labels))?;
        println!("{} images of {}x{}", set.labels.len(), set.rows, set.cols);
        return Ok(());
    }
    let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 14) as u8).collect();
    let bytes = idx::encode_images(3, 3, &pixels)?;
    let (n, rows, cols, back) = idx::parse_images(&bytes)?;
    println!("{} bytes -> {n} images of {rows}x{cols}, round trip {}", bytes.len(), back == pixels);
    let labels = idx::parse_labels(&idx::encode_labels(&[3, 9]))?;
    println!("labels {labels:?}");
    Ok(())
}
