//! Checkpoint and volume serialization: a seeded model is written as a
//! manifest-plus-blob pair, read back, and compared tensor by tensor; a
//! rewrite of the loaded state reproduces the original bytes exactly.
//!
//!     cargo run --example checkpoint_roundtrip

use std::fs;

use vtunet::io::{read_checkpoint, write_checkpoint};
use vtunet::network::{ModelConfig, VTUNetParams};

fn main() -> vtunet::Result<()> {
    let dir = std::env::temp_dir().join("vtunet_checkpoint_roundtrip");
    fs::create_dir_all(&dir).map_err(vtunet::Error::from)?;
    let path = dir.join("tiny.ckpt");

    let config = ModelConfig::tiny();
    let params = VTUNetParams::init_seeded(&config, 7)?;
    write_checkpoint(&path, &params, 7)?;
    let manifest = fs::read_to_string(&path).map_err(vtunet::Error::from)?;
    println!("manifest ({} lines):", manifest.lines().count());
    for line in manifest.lines().take(8) {
        println!("  {line}");
    }
    println!("  …");

    let (loaded, seed) = read_checkpoint(&path)?;
    println!("\nloaded: seed {seed}, config matches: {}", loaded.config == config);
    let mut max_diff = 0.0f64;
    for ((name, a), (_, b)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert_eq!(d, 0.0, "tensor {name} changed in the round trip");
        max_diff = max_diff.max(d);
    }
    println!("largest tensor deviation after one round trip: {max_diff}");

    // The manifest names its sibling blob, so an exact byte comparison needs
    // the same file name — use a second directory.
    let dir_b = dir.join("rewrite");
    fs::create_dir_all(&dir_b).map_err(vtunet::Error::from)?;
    let rewrite = dir_b.join("tiny.ckpt");
    write_checkpoint(&rewrite, &loaded, seed)?;
    let read = |p: &std::path::Path| fs::read(p).map_err(vtunet::Error::from);
    let same = read(&path)? == read(&rewrite)?
        && read(&path.with_extension("ckpt.blob"))? == read(&rewrite.with_extension("ckpt.blob"))?;
    println!("rewrite is byte-identical: {same}");
    Ok(())
}
