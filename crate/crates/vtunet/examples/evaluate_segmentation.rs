//! Segmentation scoring: DSC and HD95 per nested region (whole tumor,
//! tumor core, enhancing tumor) between a synthetic ground truth and a
//! perturbed prediction, in the same CSV layout `vtunet evaluate` emits.
//!
//!     cargo run --example evaluate_segmentation

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtunet::metrics::{
    compose_regions, dsc, eval_csv_header, eval_csv_row, hd95, LabelVolume, Mask3,
};

/// Nested ellipsoids: enhancing core inside tumor core inside edema.
fn phantom(dims: (usize, usize, usize)) -> LabelVolume {
    let (d, h, w) = dims;
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let rho = (u(z, d).powi(2) + u(y, h).powi(2) + u(x, w).powi(2)).sqrt();
                labels.push(if rho < 0.35 {
                    2 // enhancing tumor
                } else if rho < 0.6 {
                    3 // necrotic core
                } else if rho < 0.85 {
                    1 // edema
                } else {
                    0
                });
            }
        }
    }
    LabelVolume::new(dims, labels, [1.0, 1.0, 1.0]).unwrap()
}

/// Flips a fraction of voxels to a random label — an imperfect "prediction".
fn perturb(gt: &LabelVolume, flip: f64, seed: u64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = gt
        .labels
        .iter()
        .map(|&l| if rng.gen::<f64>() < flip { rng.gen_range(0..4) } else { l })
        .collect();
    LabelVolume::new(gt.dims, labels, gt.spacing).unwrap()
}

fn main() -> vtunet::Result<()> {
    let gt = phantom((12, 12, 12));
    let pred = perturb(&gt, 0.05, 3);
    let (rg, rp) = (compose_regions(&gt)?, compose_regions(&pred)?);

    println!("{}", eval_csv_header());
    let regions: [(&str, &Mask3, &Mask3); 3] =
        [("WT", &rp.wt, &rg.wt), ("ET", &rp.et, &rg.et), ("TC", &rp.tc, &rg.tc)];
    for (name, p, g) in regions {
        let d = dsc(p, g)?;
        let h = hd95(p, g, gt.spacing).ok();
        println!("{}", eval_csv_row("phantom", name, d, h));
    }
    Ok(())
}
