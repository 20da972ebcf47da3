//! Overfits the tiny preset to one seeded synthetic phantom with plain
//! gradient descent — the standard sanity check that the architecture,
//! loss, and gradients fit together. Prints every twentieth loss.
//!
//!     cargo run --example overfit_phantom

use vtunet::cli::cmd_overfit;

fn main() -> vtunet::Result<()> {
    let outcome = cmd_overfit("tiny", 0, 200, 1e-2)?;
    println!("step,loss");
    for (step, loss) in outcome.losses.iter().enumerate() {
        if step % 20 == 0 || step == outcome.losses.len() - 1 {
            println!("{step},{loss}");
        }
    }
    println!("\n{}", outcome.status_line());
    Ok(())
}
