//! Stage-by-stage geometry of a forward pass: encoder grids, the
//! bottleneck, decoder grids, and the final logits, traced on a real run of
//! the tiny preset and predicted analytically for the base preset.
//!
//!     cargo run --example forward_shapes

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtunet::cli::default_volume_dims;
use vtunet::network::{forward_traced, validate_geometry, ModelConfig, VTUNetParams};
use vtunet::tensor::Tensor;

fn main() -> vtunet::Result<()> {
    let config = ModelConfig::tiny();
    let dims = default_volume_dims(&config);
    let params = VTUNetParams::init_seeded(&config, 0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = [dims.0, dims.1, dims.2, config.in_channels];
    let n = shape.iter().product();
    let volume = Tensor::from_vec(
        (0..n).map(|_| rng.gen::<f64>() - 0.5).collect(),
        &shape,
    )?;

    let (logits, trace) = forward_traced(&volume, &params)?;
    println!(
        "tiny preset, input {}×{}×{}×{}:",
        dims.0, dims.1, dims.2, config.in_channels
    );
    for (s, (d, c)) in trace.stage_dims.iter().zip(trace.stage_channels).enumerate() {
        let tag = if s == 3 { " (bottleneck)" } else { "" };
        println!("  encoder stage {s}: grid {d:?} × {c} channels{tag}");
    }
    for (i, d) in trace.decoder_dims.iter().enumerate() {
        println!("  decoder stage {}: grid {d:?}", 2 - i);
    }
    println!("  logits: {:?}", logits.shape());
    let finite = logits.data().iter().all(|v| v.is_finite());
    println!("  all logits finite: {finite}");

    // The same geometry walk without running the network, at base scale.
    let base = ModelConfig::base();
    let stages = validate_geometry(&base, (16, 64, 64))?;
    println!("\nbase preset, input 16×64×64×{} (geometry only):", base.in_channels);
    for (s, d) in stages.iter().enumerate() {
        println!("  encoder stage {s}: grid {d:?} × {} channels", base.stage_channels(s));
    }
    Ok(())
}
