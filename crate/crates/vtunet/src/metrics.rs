//! Segmentation evaluation: Dice similarity coefficient, 95th-percentile
//! Hausdorff distance over surface voxels, and tumor region composition.

use crate::error::{Error, Result};

/// A dense voxel label map with physical voxel spacing.
#[derive(Clone, Debug)]
pub struct LabelVolume {
    pub dims: (usize, usize, usize),
    /// Row-major (depth, row, column) voxel labels.
    pub labels: Vec<u8>,
    /// Physical extent of one voxel along each axis, in consistent units.
    pub spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(dims: (usize, usize, usize), labels: Vec<u8>, spacing: [f64; 3]) -> Result<Self> {
        let count = dims.0 * dims.1 * dims.2;
        if labels.len() != count {
            return Err(Error::ShapeMismatch {
                op: "label_volume",
                lhs: vec![labels.len()],
                rhs: vec![count],
            });
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!(
                "voxel spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(LabelVolume {
            dims,
            labels,
            spacing,
        })
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }
}

/// A binary voxel mask over a (D, H, W) grid.
#[derive(Clone, Debug)]
pub struct Mask3 {
    pub dims: (usize, usize, usize),
    pub data: Vec<bool>,
}

impl Mask3 {
    pub fn new(dims: (usize, usize, usize), data: Vec<bool>) -> Result<Self> {
        let count = dims.0 * dims.1 * dims.2;
        if data.len() != count {
            return Err(Error::ShapeMismatch {
                op: "mask3",
                lhs: vec![data.len()],
                rhs: vec![count],
            });
        }
        Ok(Mask3 { dims, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// The three nested evaluation regions: enhancing tumor, tumor core, whole
/// tumor.
#[derive(Clone, Debug)]
pub struct RegionMasks {
    pub et: Mask3,
    pub tc: Mask3,
    pub wt: Mask3,
}

/// Label semantics: 0 background, 1 edema, 2 enhancing tumor, 3
/// non-enhancing/necrotic tumor.
pub const LABEL_CLASSES: usize = 4;

/// Builds ET = {2}, TC = {2, 3}, WT = {1, 2, 3} from a label map.
pub fn compose_regions(labels: &LabelVolume) -> Result<RegionMasks> {
    let mut et = vec![false; labels.voxels()];
    let mut tc = vec![false; labels.voxels()];
    let mut wt = vec![false; labels.voxels()];
    for (i, &l) in labels.labels.iter().enumerate() {
        match l {
            0 => {}
            1 => wt[i] = true,
            2 => {
                et[i] = true;
                tc[i] = true;
                wt[i] = true;
            }
            3 => {
                tc[i] = true;
                wt[i] = true;
            }
            other => {
                return Err(Error::IndexOutOfRange {
                    op: "compose_regions",
                    index: other as usize,
                    rows: LABEL_CLASSES,
                })
            }
        }
    }
    Ok(RegionMasks {
        et: Mask3::new(labels.dims, et)?,
        tc: Mask3::new(labels.dims, tc)?,
        wt: Mask3::new(labels.dims, wt)?,
    })
}

/// Dice similarity coefficient `2|P∩G| / (|P| + |G|)`.
///
/// Both masks empty is perfect agreement (1.0); exactly one empty is total
/// disagreement (0.0).
pub fn dsc(pred: &Mask3, gt: &Mask3) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::ShapeMismatch {
            op: "dsc",
            lhs: vec![pred.dims.0, pred.dims.1, pred.dims.2],
            rhs: vec![gt.dims.0, gt.dims.1, gt.dims.2],
        });
    }
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|&(&p, &g)| p && g)
        .count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Indices of mask voxels with at least one 6-neighbor outside the mask
/// (grid boundary counts as outside).
fn surface_voxels(mask: &Mask3) -> Vec<(usize, usize, usize)> {
    let (d, h, w) = mask.dims;
    let at = |z: usize, y: usize, x: usize| mask.data[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let exposed = (z == 0 || !at(z - 1, y, x))
                    || (z + 1 == d || !at(z + 1, y, x))
                    || (y == 0 || !at(z, y - 1, x))
                    || (y + 1 == h || !at(z, y + 1, x))
                    || (x == 0 || !at(z, y, x - 1))
                    || (x + 1 == w || !at(z, y, x + 1));
                if exposed {
                    out.push((z, y, x));
                }
            }
        }
    }
    out
}

/// One pass of the separable lower-envelope distance transform: for every
/// sample position `xs[i]` returns `min_j (xs[i] − xs[j])² + f[j]`.
fn edt1d(f: &[f64], xs: &[f64], out: &mut [f64]) {
    let n = f.len();
    // v: indices of parabolas in the lower envelope; z: boundaries between
    // their domains.
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let r = v[k];
            let s = ((f[q] + xs[q] * xs[q]) - (f[r] + xs[r] * xs[r])) / (2.0 * (xs[q] - xs[r]));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        while z[k + 1] < xs[i] {
            k += 1;
        }
        let r = v[k];
        let dx = xs[i] - xs[r];
        *o = dx * dx + f[r];
    }
}

/// Squared physical distance from every voxel to the nearest seed voxel,
/// via three separable envelope passes (exact for the Euclidean metric).
fn squared_distance_field(
    dims: (usize, usize, usize),
    seeds: &[(usize, usize, usize)],
    spacing: [f64; 3],
) -> Vec<f64> {
    let (d, h, w) = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for &(z, y, x) in seeds {
        g[(z * h + y) * w + x] = 0.0;
    }
    // Axis W (stride 1).
    let xs_w: Vec<f64> = (0..w).map(|i| i as f64 * spacing[2]).collect();
    let mut line = vec![0.0f64; w.max(h).max(d)];
    let mut out = vec![0.0f64; w.max(h).max(d)];
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            line[..w].copy_from_slice(&g[base..base + w]);
            edt1d(&line[..w], &xs_w, &mut out[..w]);
            g[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // Axis H (stride w).
    let xs_h: Vec<f64> = (0..h).map(|i| i as f64 * spacing[1]).collect();
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = g[(z * h + y) * w + x];
            }
            edt1d(&line[..h], &xs_h, &mut out[..h]);
            for y in 0..h {
                g[(z * h + y) * w + x] = out[y];
            }
        }
    }
    // Axis D (stride h·w).
    let xs_d: Vec<f64> = (0..d).map(|i| i as f64 * spacing[0]).collect();
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = g[(z * h + y) * w + x];
            }
            edt1d(&line[..d], &xs_d, &mut out[..d]);
            for z in 0..d {
                g[(z * h + y) * w + x] = out[z];
            }
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics; `sorted`
/// must be ascending and nonempty, `q` in [0, 1].
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// 95th percentile of the pooled symmetric surface-to-surface distances
/// between two masks, in the physical units implied by `spacing`.
///
/// Surfaces are mask voxels with a 6-neighbor outside the mask. Distances
/// are pooled from both directions before taking the percentile, so the
/// result is symmetric in its arguments. An empty mask has no surface, so
/// the metric is undefined and reported as an error.
pub fn hd95(pred: &Mask3, gt: &Mask3, spacing: [f64; 3]) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::ShapeMismatch {
            op: "hd95",
            lhs: vec![pred.dims.0, pred.dims.1, pred.dims.2],
            rhs: vec![gt.dims.0, gt.dims.1, gt.dims.2],
        });
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Config(format!(
            "voxel spacing must be positive and finite, got {spacing:?}"
        )));
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::UndefinedMetric(
            "hd95 requires two nonempty masks".into(),
        ));
    }
    let field_g = squared_distance_field(pred.dims, &sg, spacing);
    let field_p = squared_distance_field(pred.dims, &sp, spacing);
    let (_, h, w) = pred.dims;
    let mut pooled: Vec<f64> = Vec::with_capacity(sp.len() + sg.len());
    for &(z, y, x) in &sp {
        pooled.push(field_g[(z * h + y) * w + x].sqrt());
    }
    for &(z, y, x) in &sg {
        pooled.push(field_p[(z * h + y) * w + x].sqrt());
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(percentile(&pooled, 0.95))
}

/// Header for the per-case evaluation CSV.
pub fn eval_csv_header() -> &'static str {
    "case,region,dsc,hd95"
}

/// One evaluation CSV row; an undefined HD95 renders as an empty field.
pub fn eval_csv_row(case_id: &str, region: &str, dsc: f64, hd95: Option<f64>) -> String {
    match hd95 {
        Some(h) => format!("{case_id},{region},{dsc},{h}"),
        None => format!("{case_id},{region},{dsc},"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(dims: (usize, usize, usize), on: &[(usize, usize, usize)]) -> Mask3 {
        let mut data = vec![false; dims.0 * dims.1 * dims.2];
        for &(z, y, x) in on {
            data[(z * dims.1 + y) * dims.2 + x] = true;
        }
        Mask3::new(dims, data).unwrap()
    }

    // ── region composition ────────────────────────────────────────────────

    #[test]
    fn background_volume_gives_empty_regions() {
        let lv = LabelVolume::new((2, 2, 2), vec![0; 8], [1.0; 3]).unwrap();
        let r = compose_regions(&lv).unwrap();
        assert!(r.et.is_empty() && r.tc.is_empty() && r.wt.is_empty());
    }

    #[test]
    fn single_enhancing_voxel_is_in_all_regions() {
        let mut labels = vec![0u8; 8];
        labels[3] = 2;
        let lv = LabelVolume::new((2, 2, 2), labels, [1.0; 3]).unwrap();
        let r = compose_regions(&lv).unwrap();
        assert!(r.et.data[3] && r.tc.data[3] && r.wt.data[3]);
        assert_eq!((r.et.count(), r.tc.count(), r.wt.count()), (1, 1, 1));
    }

    #[test]
    fn one_voxel_per_class_counts_nest() {
        let lv = LabelVolume::new((1, 2, 2), vec![0, 1, 2, 3], [1.0; 3]).unwrap();
        let r = compose_regions(&lv).unwrap();
        assert_eq!((r.et.count(), r.tc.count(), r.wt.count()), (1, 2, 3));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let lv = LabelVolume::new((1, 1, 2), vec![0, 7], [1.0; 3]).unwrap();
        let err = compose_regions(&lv).unwrap_err();
        assert_eq!(err.category(), "index");
    }

    #[test]
    fn regions_nest_on_random_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let dims = (
                rng.gen_range(1..5usize),
                rng.gen_range(1..6usize),
                rng.gen_range(1..6usize),
            );
            let n = dims.0 * dims.1 * dims.2;
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
            let lv = LabelVolume::new(dims, labels, [1.0; 3]).unwrap();
            let r = compose_regions(&lv).unwrap();
            for i in 0..n {
                assert!(!r.et.data[i] || r.tc.data[i], "ET ⊆ TC violated");
                assert!(!r.tc.data[i] || r.wt.data[i], "TC ⊆ WT violated");
            }
        }
    }

    // ── dsc ───────────────────────────────────────────────────────────────

    #[test]
    fn dsc_hand_cases() {
        let dims = (1, 2, 4);
        let a = mask_from(dims, &[(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)]);
        let b = mask_from(dims, &[(0, 0, 2), (0, 0, 3), (0, 1, 0), (0, 1, 1)]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5); // overlap 2 of 4+4
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let disjoint = mask_from(dims, &[(0, 1, 2)]);
        assert_eq!(dsc(&a, &disjoint).unwrap(), 0.0);
    }

    #[test]
    fn dsc_empty_mask_conventions() {
        let dims = (1, 1, 3);
        let empty = mask_from(dims, &[]);
        let one = mask_from(dims, &[(0, 0, 1)]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&empty, &one).unwrap(), 0.0);
        assert_eq!(dsc(&one, &empty).unwrap(), 0.0);
    }

    #[test]
    fn dsc_is_symmetric_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dims = (3, 4, 4);
        let n = 48;
        for _ in 0..20 {
            let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let ma = Mask3::new(dims, a.clone()).unwrap();
            let mb = Mask3::new(dims, b.clone()).unwrap();
            assert_eq!(dsc(&ma, &mb).unwrap(), dsc(&mb, &ma).unwrap());
            // Growing the intersection at fixed sizes: flip one pred-only
            // voxel onto a gt-only voxel, if both exist.
            let pred_only = (0..n).find(|&i| a[i] && !b[i]);
            let gt_only = (0..n).find(|&i| !a[i] && b[i]);
            if let (Some(p), Some(g)) = (pred_only, gt_only) {
                let mut a2 = a.clone();
                a2[p] = false;
                a2[g] = true;
                let ma2 = Mask3::new(dims, a2).unwrap();
                assert!(dsc(&ma2, &mb).unwrap() >= dsc(&ma, &mb).unwrap());
            }
        }
    }

    #[test]
    fn dsc_rejects_dim_mismatch() {
        let a = mask_from((1, 1, 2), &[]);
        let b = mask_from((1, 2, 1), &[]);
        assert_eq!(dsc(&a, &b).unwrap_err().category(), "shape");
    }

    // ── hd95 ──────────────────────────────────────────────────────────────

    #[test]
    fn identical_masks_have_zero_hd95() {
        let m = mask_from((2, 3, 3), &[(0, 1, 1), (1, 1, 1), (0, 1, 2)]);
        assert_eq!(hd95(&m, &m, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn single_voxels_three_apart_measure_three() {
        let dims = (1, 1, 5);
        let a = mask_from(dims, &[(0, 0, 0)]);
        let b = mask_from(dims, &[(0, 0, 3)]);
        assert!((hd95(&a, &b, [1.0; 3]).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hd95_is_symmetric() {
        let dims = (3, 4, 4);
        let a = mask_from(dims, &[(0, 0, 0), (1, 2, 3), (2, 1, 1)]);
        let b = mask_from(dims, &[(0, 3, 3), (2, 0, 2)]);
        let ab = hd95(&a, &b, [1.0, 0.7, 1.3]).unwrap();
        let ba = hd95(&b, &a, [1.0, 0.7, 1.3]).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn spacing_scales_the_metric_linearly() {
        let dims = (2, 3, 4);
        let a = mask_from(dims, &[(0, 0, 0), (1, 2, 3)]);
        let b = mask_from(dims, &[(0, 2, 1), (1, 0, 2)]);
        let one = hd95(&a, &b, [1.0; 3]).unwrap();
        let scaled = hd95(&a, &b, [2.5, 2.5, 2.5]).unwrap();
        assert!((scaled - 2.5 * one).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_an_undefined_metric() {
        let dims = (1, 2, 2);
        let empty = mask_from(dims, &[]);
        let one = mask_from(dims, &[(0, 0, 0)]);
        let err = hd95(&empty, &one, [1.0; 3]).unwrap_err();
        assert_eq!(err.category(), "metric");
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v: Vec<f64> = (0..21).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&v, 0.0), 0.0);
        // Two elements: midpoint convention.
        assert!((percentile(&[3.0, 5.0], 0.95) - 4.9).abs() < 1e-12);
        // The two-voxel hand case stays exact.
        assert_eq!(percentile(&[3.0, 3.0], 0.95), 3.0);
    }

    // ── production EDT vs brute force ─────────────────────────────────────

    /// All-pairs directed/pooled HD95, straight from the definition.
    fn hd95_brute(pred: &Mask3, gt: &Mask3, spacing: [f64; 3]) -> Option<f64> {
        let sp = surface_voxels(pred);
        let sg = surface_voxels(gt);
        if sp.is_empty() || sg.is_empty() {
            return None;
        }
        let dist = |a: (usize, usize, usize), b: (usize, usize, usize)| -> f64 {
            let dz = (a.0 as f64 - b.0 as f64) * spacing[0];
            let dy = (a.1 as f64 - b.1 as f64) * spacing[1];
            let dx = (a.2 as f64 - b.2 as f64) * spacing[2];
            (dz * dz + dy * dy + dx * dx).sqrt()
        };
        let mut pooled = Vec::new();
        for &p in &sp {
            pooled.push(
                sg.iter()
                    .map(|&g| dist(p, g))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        for &g in &sg {
            pooled.push(
                sp.iter()
                    .map(|&p| dist(g, p))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(percentile(&pooled, 0.95))
    }

    #[test]
    fn production_hd95_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut compared = 0;
        while compared < 200 {
            let dims = (
                rng.gen_range(1..=12usize),
                rng.gen_range(1..=12usize),
                rng.gen_range(1..=12usize),
            );
            let n = dims.0 * dims.1 * dims.2;
            let density = rng.gen_range(0.05..0.5);
            let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
            let ma = Mask3::new(dims, a).unwrap();
            let mb = Mask3::new(dims, b).unwrap();
            let spacing = [
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
            ];
            let brute = hd95_brute(&ma, &mb, spacing);
            let fast = hd95(&ma, &mb, spacing);
            match brute {
                None => assert!(fast.is_err()),
                Some(want) => {
                    let got = fast.unwrap();
                    assert!(
                        (got - want).abs() < 1e-9,
                        "dims {dims:?}: {got} vs {want}"
                    );
                    compared += 1;
                }
            }
        }
    }

    #[test]
    fn interior_voxels_are_not_surface() {
        // A solid 3×3×3 cube: the center voxel is enclosed, the other 26
        // touch the outside.
        let dims = (5, 5, 5);
        let mut on = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    on.push((z, y, x));
                }
            }
        }
        let m = mask_from(dims, &on);
        let surf = surface_voxels(&m);
        assert_eq!(surf.len(), 26);
        assert!(!surf.contains(&(2, 2, 2)));
    }

    #[test]
    fn csv_row_formats_undefined_hd95_as_empty() {
        assert_eq!(eval_csv_header(), "case,region,dsc,hd95");
        assert_eq!(
            eval_csv_row("case0", "ET", 0.5, Some(2.0)),
            "case0,ET,0.5,2"
        );
        assert_eq!(eval_csv_row("case0", "WT", 1.0, None), "case0,WT,1,");
    }
}
