//! Window partition arithmetic on a token grid: regular vs naive-shifted
//! window counts, the straddling segments a shifted layer would need, and
//! the mask that makes the cyclic-shift trick equivalent to them.
//!
//!     cargo run --example window_geometry

use vtunet::windowing::{
    build_shift_mask, count_windows, naive_shifted_segments, CountMode, WindowConfig,
};

fn main() -> vtunet::Result<()> {
    let dims = (8, 8, 8);
    let cfg = WindowConfig::shifted(4, 4);
    println!("token grid {dims:?}, window {:?}, shift {:?}", cfg.window, cfg.shift);
    println!(
        "  regular partition:      {:>3} windows",
        count_windows(dims, cfg, CountMode::Regular)?
    );
    println!(
        "  naive shifted partition: {:>2} windows",
        count_windows(dims, cfg, CountMode::ShiftedNaive)?
    );

    println!("\nstraddling segments per axis (start, end):");
    for (axis, (dim, win, shift)) in [
        (0, (dims.0, cfg.window.0, cfg.shift.0)),
        (1, (dims.1, cfg.window.1, cfg.shift.1)),
        (2, (dims.2, cfg.window.2, cfg.shift.2)),
    ] {
        println!("  axis {axis}: {:?}", naive_shifted_segments(dim, win, shift));
    }

    // The mask groups each window's tokens by straddling fragment; pairs in
    // different fragments are suppressed, so one masked pass over the
    // regular tiling reproduces all 27 naive windows.
    let mask = build_shift_mask(dims, cfg)?;
    let t = cfg.window_tokens();
    let blocked: usize = mask.mask.data().iter().filter(|&&v| v < 0.0).count();
    println!(
        "\nshift mask: {} windows × {t}×{t} pairs, {blocked} suppressed ({:.1}%)",
        mask.mask.shape()[0],
        100.0 * blocked as f64 / mask.mask.numel() as f64
    );
    Ok(())
}
