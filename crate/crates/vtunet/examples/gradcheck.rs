//! Finite-difference verification of the end-to-end loss gradient: the
//! analytic gradient from one reverse pass is compared against central
//! differences on sampled coordinates in every parameter group.
//!
//!     cargo run --example gradcheck

use vtunet::cli::{cmd_gradcheck, GRADCHECK_TOL};

fn main() -> vtunet::Result<()> {
    let report = cmd_gradcheck("tiny", 0, false)?;
    print!("{}", report.to_csv());
    println!(
        "\nmax relative error {:e} (tolerance {GRADCHECK_TOL:e}) — {}",
        report.max_rel_err(),
        if report.passes() { "PASS" } else { "FAIL" }
    );
    Ok(())
}
