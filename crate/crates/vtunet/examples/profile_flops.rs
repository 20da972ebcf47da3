//! Parameter and multiply-add accounting: per-group counts, the per-layer
//! forward walk with its closed-form cross-check, and the effect of patch
//! merging on the quadratic attention term.
//!
//!     cargo run --example profile_flops

use vtunet::cli::default_volume_dims;
use vtunet::network::ModelConfig;
use vtunet::profile::{
    count_flops_instrumented, count_params, sa_flops_global, sa_flops_global_quadratic,
    sa_flops_windowed,
};

fn main() -> vtunet::Result<()> {
    let config = ModelConfig::tiny();
    let dims = default_volume_dims(&config);

    let params = count_params(&config)?;
    println!("tiny preset parameters by group:");
    for (group, count) in &params.groups {
        println!("  {group:<8} {count:>8}");
    }
    println!("  {:<8} {:>8}", "total", params.total);

    let flops = count_flops_instrumented(&config, dims)?;
    println!(
        "\nforward walk on {}×{}×{}: {} multiply-adds over {} layers",
        dims.0,
        dims.1,
        dims.2,
        flops.total(),
        flops.rows.len()
    );
    for row in flops.rows.iter().take(6) {
        println!(
            "  {:<22} τ={:<4} C={:<3} proj={:<8} attn={}",
            row.layer, row.tau, row.c, row.proj_macs, row.attn_macs
        );
    }
    println!("  … ({} more rows; see `vtunet profile` for the full CSV)", flops.rows.len() - 6);

    // Windowing pays 2κT²C instead of 2τ²C; each merge quarters τ, cutting
    // the global quadratic term sixteenfold at fixed width.
    println!("\nglobal vs windowed attention cost at τ=4096, C=48:");
    println!("  global:   {:>12}", sa_flops_global(4096, 48));
    println!("  window 64: {:>11}", sa_flops_windowed(4096, 48, 64)?.exact);
    for (tau, c) in [(4096usize, 48usize), (1024, 96)] {
        let (before, after) = (
            sa_flops_global_quadratic(tau, c),
            sa_flops_global_quadratic(tau / 4, c),
        );
        println!(
            "  merge τ={tau}→{}: quadratic term {before} → {after} (×1/{})",
            tau / 4,
            before / after
        );
    }
    Ok(())
}
