//! 3D token-lattice geometry: patch partition, window partition/reversal,
//! cyclic shifts, shift attention masks, and window counting.
//!
//! Everything here is a permutation (or labelling) of token rows, expressed
//! through `gather_rows` so the operations stay differentiable. Token order
//! is fixed crate-wide as depth-major row-major: index = (x·h + y)·w + z for
//! position (x, y, z) on a (d, h, w) lattice.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive logit surrogate for −∞ in attention masks.
pub const MASK_NEG: f64 = -1e9;

/// A (d, h, w) lattice of C-dimensional tokens.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub dims: (usize, usize, usize),
    pub channels: usize,
    /// `[d·h·w, C]`, row-major with d outermost and w innermost.
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(dims: (usize, usize, usize), channels: usize, tokens: Tensor) -> Result<Self> {
        let count = dims.0 * dims.1 * dims.2;
        if tokens.shape() != [count, channels] {
            return Err(Error::ShapeMismatch {
                op: "token_grid",
                lhs: tokens.shape().to_vec(),
                rhs: vec![count, channels],
            });
        }
        Ok(TokenGrid {
            dims,
            channels,
            tokens,
        })
    }

    pub fn token_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }
}

/// Window extents and the cyclic-shift offsets that accompany them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: (usize, usize, usize),
    pub shift: (usize, usize, usize),
}

impl WindowConfig {
    /// Regular partition with window (P, M, M) and no shift.
    pub fn regular(p: usize, m: usize) -> Self {
        WindowConfig {
            window: (p, m, m),
            shift: (0, 0, 0),
        }
    }

    /// Shifted partition: shift (P/2, M/2, M/2).
    pub fn shifted(p: usize, m: usize) -> Self {
        WindowConfig {
            window: (p, m, m),
            shift: (p / 2, m / 2, m / 2),
        }
    }

    /// Clamp to a token grid: where the grid is smaller than the window on an
    /// axis, the window shrinks to the grid extent and the shift drops to 0.
    pub fn clamped(self, dims: (usize, usize, usize)) -> Self {
        let clamp = |win: usize, shift: usize, dim: usize| -> (usize, usize) {
            if dim < win {
                (dim, 0)
            } else {
                (win, shift)
            }
        };
        let (w0, s0) = clamp(self.window.0, self.shift.0, dims.0);
        let (w1, s1) = clamp(self.window.1, self.shift.1, dims.1);
        let (w2, s2) = clamp(self.window.2, self.shift.2, dims.2);
        WindowConfig {
            window: (w0, w1, w2),
            shift: (s0, s1, s2),
        }
    }

    pub fn is_shifted(&self) -> bool {
        self.shift != (0, 0, 0)
    }

    /// Tokens per window, T = P·M·M.
    pub fn window_tokens(&self) -> usize {
        self.window.0 * self.window.1 * self.window.2
    }

    /// Checks window sanity and that `dims` tile exactly.
    pub fn validate_for(&self, dims: (usize, usize, usize)) -> Result<()> {
        let axes = [
            (dims.0, self.window.0, self.shift.0),
            (dims.1, self.window.1, self.shift.1),
            (dims.2, self.window.2, self.shift.2),
        ];
        for (i, &(dim, win, shift)) in axes.iter().enumerate() {
            if win == 0 || shift >= win {
                return Err(Error::Config(format!(
                    "axis {i}: window {win} with shift {shift} (need 1 <= window, shift < window)"
                )));
            }
            if dim % win != 0 {
                return Err(Error::Geometry(format!(
                    "axis {i}: grid extent {dim} not divisible by window {win}"
                )));
            }
        }
        Ok(())
    }
}

/// How to count windows: the efficient regular tiling, or the naive
/// straddling partition a shifted layer would need without masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    Regular,
    ShiftedNaive,
}

/// Number of windows covering `dims` under `cfg`.
///
/// Regular mode is ∏ dims/window. The naive shifted partition adds one
/// straddling window per axis that actually shifts (8 → 27 in the canonical
/// 8³/4³/2³ case); axes with zero shift contribute their regular count.
pub fn count_windows(
    dims: (usize, usize, usize),
    cfg: WindowConfig,
    mode: CountMode,
) -> Result<usize> {
    cfg.validate_for(dims)?;
    let axes = [
        (dims.0, cfg.window.0, cfg.shift.0),
        (dims.1, cfg.window.1, cfg.shift.1),
        (dims.2, cfg.window.2, cfg.shift.2),
    ];
    Ok(axes
        .iter()
        .map(|&(dim, win, shift)| match mode {
            CountMode::Regular => dim / win,
            CountMode::ShiftedNaive => dim / win + usize::from(shift > 0),
        })
        .product())
}

/// Axis segments of the naive shifted partition: `[0,s)`, full windows, then
/// the trailing `[dim−(win−s), dim)` remainder. With `s == 0` this is the
/// regular tiling. Reference path for the mask-equivalence oracle.
pub fn naive_shifted_segments(dim: usize, win: usize, shift: usize) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = 0;
    if shift > 0 {
        segs.push((0, shift));
        start = shift;
    }
    while start + win <= dim {
        segs.push((start, start + win));
        start += win;
    }
    if start < dim {
        segs.push((start, dim));
    }
    segs
}

/// Splits a `[D, H, W, Cin]` volume into non-overlapping (P, M, M) patches,
/// flattening each patch depth-major, then row, then column, then channel.
/// The result is a (D/P, H/M, W/M) grid of P·M·M·Cin-channel tokens.
pub fn patch_partition(volume: &Tensor, p: usize, m: usize) -> Result<TokenGrid> {
    let shape = volume.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "patch_partition",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (dd, hh, ww, cin) = (shape[0], shape[1], shape[2], shape[3]);
    if p == 0 || m == 0 || dd % p != 0 || hh % m != 0 || ww % m != 0 {
        return Err(Error::Config(format!(
            "volume {dd}x{hh}x{ww} not divisible by patch ({p}, {m}, {m})"
        )));
    }
    let dims = (dd / p, hh / m, ww / m);
    let mut idx = Vec::with_capacity(dd * hh * ww);
    for gd in 0..dims.0 {
        for gh in 0..dims.1 {
            for gw in 0..dims.2 {
                for a in 0..p {
                    for b in 0..m {
                        for c in 0..m {
                            idx.push(((gd * p + a) * hh + gh * m + b) * ww + gw * m + c);
                        }
                    }
                }
            }
        }
    }
    let channels = p * m * m * cin;
    let tokens = volume
        .reshape(&[dd * hh * ww, cin])?
        .gather_rows(&idx)?
        .reshape(&[dims.0 * dims.1 * dims.2, channels])?;
    TokenGrid::new(dims, channels, tokens)
}

/// Row indices of each window's tokens, in window-major order.
fn window_order(dims: (usize, usize, usize), cfg: WindowConfig) -> Vec<usize> {
    let (d, h, w) = dims;
    let (wp, wm1, wm2) = cfg.window;
    let mut idx = Vec::with_capacity(d * h * w);
    for wd in 0..d / wp {
        for wh in 0..h / wm1 {
            for ww in 0..w / wm2 {
                for a in 0..wp {
                    for b in 0..wm1 {
                        for c in 0..wm2 {
                            idx.push(((wd * wp + a) * h + wh * wm1 + b) * w + ww * wm2 + c);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Rearranges a grid into `[κ, T, C]` windows (regular tiling; apply
/// [`cyclic_shift`] first for the shifted variant).
pub fn window_partition(grid: &TokenGrid, cfg: WindowConfig) -> Result<Tensor> {
    cfg.validate_for(grid.dims)?;
    let kappa = count_windows(grid.dims, cfg, CountMode::Regular)?;
    let t = cfg.window_tokens();
    let idx = window_order(grid.dims, cfg);
    grid.tokens
        .gather_rows(&idx)?
        .reshape(&[kappa, t, grid.channels])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(
    windows: &Tensor,
    dims: (usize, usize, usize),
    cfg: WindowConfig,
) -> Result<TokenGrid> {
    cfg.validate_for(dims)?;
    let kappa = count_windows(dims, cfg, CountMode::Regular)?;
    let t = cfg.window_tokens();
    let count = dims.0 * dims.1 * dims.2;
    let channels = match windows.shape() {
        [k, tt, c] if *k == kappa && *tt == t => *c,
        other => {
            return Err(Error::ShapeMismatch {
                op: "window_reverse",
                lhs: other.to_vec(),
                rhs: vec![kappa, t, 0],
            })
        }
    };
    // window_order maps window-major position -> grid row; invert it.
    let order = window_order(dims, cfg);
    let mut inv = vec![0usize; count];
    for (win_pos, &grid_row) in order.iter().enumerate() {
        inv[grid_row] = win_pos;
    }
    let tokens = windows.reshape(&[kappa * t, channels])?.gather_rows(&inv)?;
    TokenGrid::new(dims, channels, tokens)
}

/// Toroidal roll: the token at position p moves to p + offsets (mod dims).
pub fn cyclic_shift(grid: &TokenGrid, offsets: (i64, i64, i64)) -> Result<TokenGrid> {
    let (d, h, w) = grid.dims;
    for (i, (&o, &dim)) in [offsets.0, offsets.1, offsets.2]
        .iter()
        .zip([d, h, w].iter())
        .enumerate()
    {
        if o.unsigned_abs() as usize >= dim {
            return Err(Error::Geometry(format!(
                "axis {i}: |shift {o}| must be smaller than extent {dim}"
            )));
        }
    }
    if offsets == (0, 0, 0) {
        return Ok(grid.clone());
    }
    let back = |pos: usize, off: i64, dim: usize| -> usize {
        (pos as i64 - off).rem_euclid(dim as i64) as usize
    };
    let mut idx = Vec::with_capacity(grid.token_count());
    for x in 0..d {
        for y in 0..h {
            for z in 0..w {
                let src = (
                    back(x, offsets.0, d),
                    back(y, offsets.1, h),
                    back(z, offsets.2, w),
                );
                idx.push((src.0 * h + src.1) * w + src.2);
            }
        }
    }
    let tokens = grid.tokens.gather_rows(&idx)?;
    TokenGrid::new(grid.dims, grid.channels, tokens)
}

/// Additive attention mask for one windowing configuration: `[κ, T, T]` with
/// 0 where two tokens share a pre-shift region and −1e9 elsewhere.
#[derive(Clone)]
pub struct AttentionMask {
    pub mask: Tensor,
}

/// Builds the shifted-window attention mask.
///
/// Region labels are assigned per axis on the rolled lattice with the slice
/// scheme `[0, dim−win) → 0, [dim−win, dim−shift) → 1, [dim−shift, dim) → 2`;
/// a window's tokens may attend to each other exactly when all three axis
/// labels agree (same fragment of the naive straddling partition). A zero
/// shift yields the all-zero mask.
pub fn build_shift_mask(dims: (usize, usize, usize), cfg: WindowConfig) -> Result<AttentionMask> {
    cfg.validate_for(dims)?;
    let kappa = count_windows(dims, cfg, CountMode::Regular)?;
    let t = cfg.window_tokens();
    let label = |pos: usize, dim: usize, win: usize, shift: usize| -> usize {
        if shift == 0 {
            0
        } else if pos < dim - win {
            0
        } else if pos < dim - shift {
            1
        } else {
            2
        }
    };
    // Combined region id per grid position, then windowed with the same
    // ordering as window_partition.
    let (d, h, w) = dims;
    let mut region = vec![0usize; d * h * w];
    for x in 0..d {
        for y in 0..h {
            for z in 0..w {
                let rx = label(x, d, cfg.window.0, cfg.shift.0);
                let ry = label(y, h, cfg.window.1, cfg.shift.1);
                let rz = label(z, w, cfg.window.2, cfg.shift.2);
                region[(x * h + y) * w + z] = (rx * 3 + ry) * 3 + rz;
            }
        }
    }
    let order = window_order(dims, cfg);
    let mut mask = vec![0.0; kappa * t * t];
    for win in 0..kappa {
        let labels = &order[win * t..][..t];
        for i in 0..t {
            for j in 0..t {
                if region[labels[i]] != region[labels[j]] {
                    mask[(win * t + i) * t + j] = MASK_NEG;
                }
            }
        }
    }
    Ok(AttentionMask {
        mask: Tensor::from_vec(mask, &[kappa, t, t])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(
        rng: &mut ChaCha8Rng,
        dims: (usize, usize, usize),
        channels: usize,
    ) -> TokenGrid {
        let n = dims.0 * dims.1 * dims.2 * channels;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        TokenGrid::new(
            dims,
            channels,
            Tensor::from_vec(data, &[dims.0 * dims.1 * dims.2, channels]).unwrap(),
        )
        .unwrap()
    }

    // ── patch partition ───────────────────────────────────────────────────

    #[test]
    fn patch_partition_8cubed_gives_8_tokens_of_64() {
        let volume = Tensor::zeros(&[8, 8, 8, 1]);
        let grid = patch_partition(&volume, 4, 4).unwrap();
        assert_eq!(grid.dims, (2, 2, 2));
        assert_eq!(grid.channels, 64);
        assert_eq!(grid.tokens.shape(), &[8, 64]);
    }

    #[test]
    fn patch_partition_typical_volume_has_1024_tokens() {
        let volume = Tensor::zeros(&[16, 64, 64, 1]);
        let grid = patch_partition(&volume, 4, 4).unwrap();
        assert_eq!(grid.dims, (4, 16, 16));
        assert_eq!(grid.token_count(), 1024);
    }

    #[test]
    fn patch_partition_flattening_order_is_depth_row_column_channel() {
        // Voxel value = its flat index, so the first token must read out the
        // (a, b, c) loop over the first 2x2x2 patch.
        let data: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let volume = Tensor::from_vec(data, &[4, 4, 4, 1]).unwrap();
        let grid = patch_partition(&volume, 2, 2).unwrap();
        assert_eq!(
            &grid.tokens.data()[..8],
            &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]
        );
    }

    #[test]
    fn patch_partition_constant_volume_gives_identical_tokens() {
        let volume = Tensor::full(&[8, 8, 8, 2], 0.7).unwrap();
        let grid = patch_partition(&volume, 4, 4).unwrap();
        let first = grid.tokens.data()[..grid.channels].to_vec();
        for t in 0..grid.token_count() {
            assert_eq!(&grid.tokens.data()[t * grid.channels..][..grid.channels], &first[..]);
        }
    }

    #[test]
    fn patch_partition_rejects_non_divisible() {
        let volume = Tensor::zeros(&[6, 8, 8, 1]);
        assert!(matches!(
            patch_partition(&volume, 4, 4).unwrap_err(),
            Error::Config(_)
        ));
    }

    // ── window counting ───────────────────────────────────────────────────

    #[test]
    fn eight_regular_and_27_naive_windows() {
        let dims = (8, 8, 8);
        let cfg = WindowConfig::shifted(4, 4);
        assert_eq!(count_windows(dims, cfg, CountMode::Regular).unwrap(), 8);
        assert_eq!(count_windows(dims, cfg, CountMode::ShiftedNaive).unwrap(), 27);
    }

    #[test]
    fn single_window_when_window_equals_grid() {
        let cfg = WindowConfig::regular(4, 4);
        assert_eq!(count_windows((4, 4, 4), cfg, CountMode::Regular).unwrap(), 1);
    }

    #[test]
    fn zero_shift_axes_do_not_straddle() {
        let cfg = WindowConfig {
            window: (4, 4, 4),
            shift: (2, 0, 0),
        };
        assert_eq!(
            count_windows((8, 8, 8), cfg, CountMode::ShiftedNaive).unwrap(),
            3 * 2 * 2
        );
    }

    #[test]
    fn count_windows_times_window_tokens_is_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let wins = (
                rng.gen_range(1..4usize),
                rng.gen_range(1..4usize),
                rng.gen_range(1..4usize),
            );
            let dims = (
                wins.0 * rng.gen_range(1..4usize),
                wins.1 * rng.gen_range(1..4usize),
                wins.2 * rng.gen_range(1..4usize),
            );
            let cfg = WindowConfig {
                window: wins,
                shift: (0, 0, 0),
            };
            let kappa = count_windows(dims, cfg, CountMode::Regular).unwrap();
            assert_eq!(kappa * cfg.window_tokens(), dims.0 * dims.1 * dims.2);
        }
    }

    #[test]
    fn naive_segments_match_figure_arithmetic() {
        assert_eq!(naive_shifted_segments(8, 4, 2), vec![(0, 2), (2, 6), (6, 8)]);
        assert_eq!(naive_shifted_segments(4, 4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(naive_shifted_segments(8, 4, 0), vec![(0, 4), (4, 8)]);
    }

    // ── clamping ──────────────────────────────────────────────────────────

    #[test]
    fn clamping_shrinks_window_and_zeroes_shift() {
        let cfg = WindowConfig::shifted(4, 4).clamped((4, 2, 2));
        assert_eq!(cfg.window, (4, 2, 2));
        assert_eq!(cfg.shift, (2, 0, 0));
        // Equal extents are not clamped; the shift survives.
        let cfg = WindowConfig::shifted(4, 4).clamped((4, 4, 8));
        assert_eq!(cfg.window, (4, 4, 4));
        assert_eq!(cfg.shift, (2, 2, 2));
    }

    // ── partition round-trips ─────────────────────────────────────────────

    #[test]
    fn window_partition_shape_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = random_grid(&mut rng, (8, 8, 8), 3);
        let cfg = WindowConfig::regular(4, 4);
        let windows = window_partition(&grid, cfg).unwrap();
        assert_eq!(windows.shape(), &[8, 64, 3]);
        let back = window_reverse(&windows, grid.dims, cfg).unwrap();
        assert_eq!(back.tokens.data(), grid.tokens.data());
    }

    #[test]
    fn window_roundtrip_on_anisotropic_clamped_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for dims in [(4, 2, 2), (2, 4, 6), (1, 1, 4), (4, 1, 1)] {
            let grid = random_grid(&mut rng, dims, 2);
            let cfg = WindowConfig::shifted(2, 2).clamped(dims);
            let windows = window_partition(&grid, cfg).unwrap();
            let back = window_reverse(&windows, dims, cfg).unwrap();
            assert_eq!(back.tokens.data(), grid.tokens.data());
        }
    }

    #[test]
    fn global_window_is_one_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = random_grid(&mut rng, (2, 3, 4), 2);
        let cfg = WindowConfig {
            window: (2, 3, 4),
            shift: (0, 0, 0),
        };
        let windows = window_partition(&grid, cfg).unwrap();
        assert_eq!(windows.shape(), &[1, 24, 2]);
        assert_eq!(windows.data(), grid.tokens.data());
    }

    // ── cyclic shift ──────────────────────────────────────────────────────

    #[test]
    fn cyclic_shift_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = random_grid(&mut rng, (4, 4, 4), 2);
        let out = cyclic_shift(&grid, (0, 0, 0)).unwrap();
        assert_eq!(out.tokens.data(), grid.tokens.data());
    }

    #[test]
    fn cyclic_shift_composes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = random_grid(&mut rng, (4, 6, 8), 3);
        let there = cyclic_shift(&grid, (2, 3, 5)).unwrap();
        let back = cyclic_shift(&there, (-2, -3, -5)).unwrap();
        assert_eq!(back.tokens.data(), grid.tokens.data());
    }

    #[test]
    fn cyclic_shift_moves_marker() {
        let mut data = vec![0.0; 4 * 4 * 4];
        data[0] = 1.0; // marker at (0, 0, 0)
        let grid = TokenGrid::new(
            (4, 4, 4),
            1,
            Tensor::from_vec(data, &[64, 1]).unwrap(),
        )
        .unwrap();
        let out = cyclic_shift(&grid, (2, 2, 2)).unwrap();
        let target = (2 * 4 + 2) * 4 + 2;
        for (i, &v) in out.tokens.data().iter().enumerate() {
            assert_eq!(v, if i == target { 1.0 } else { 0.0 }, "index {i}");
        }
    }

    #[test]
    fn cyclic_shift_rejects_full_turn() {
        let grid = TokenGrid::new((2, 2, 2), 1, Tensor::zeros(&[8, 1])).unwrap();
        assert!(cyclic_shift(&grid, (2, 0, 0)).is_err());
    }

    // ── shift mask ────────────────────────────────────────────────────────

    #[test]
    fn zero_shift_mask_is_all_zero() {
        let cfg = WindowConfig::regular(4, 4);
        let mask = build_shift_mask((8, 8, 8), cfg).unwrap();
        assert!(mask.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canonical_shift_mask_structure() {
        let cfg = WindowConfig::shifted(4, 4);
        let mask = build_shift_mask((8, 8, 8), cfg).unwrap();
        assert_eq!(mask.mask.shape(), &[8, 64, 64]);
        let t = 64;
        let m = mask.mask.data();
        for win in 0..8 {
            for i in 0..t {
                // Diagonal always open, mask symmetric.
                assert_eq!(m[(win * t + i) * t + i], 0.0);
                for j in 0..t {
                    assert_eq!(m[(win * t + i) * t + j], m[(win * t + j) * t + i]);
                }
            }
        }
        // First window is interior: fully unmasked. The last window mixes
        // both label classes on every axis: 2^3 = 8 distinct fragments.
        assert!(m[..t * t].iter().all(|&v| v == 0.0));
        let last = &m[7 * t * t..];
        let open = last.iter().filter(|&&v| v == 0.0).count();
        // 8 fragments of 8 tokens each (2x2x2 halves of the 4^3 window).
        assert_eq!(open, 8 * 8 * 8);
    }

    #[test]
    fn mask_open_pairs_count_matches_fragment_sizes() {
        // For each window, the number of unmasked (i, j) pairs must equal
        // sum of fragment sizes squared, derived from the naive segments.
        let dims = (4, 4, 8);
        let cfg = WindowConfig::shifted(2, 2).clamped(dims);
        let mask = build_shift_mask(dims, cfg).unwrap();
        let t = cfg.window_tokens();
        let kappa = count_windows(dims, cfg, CountMode::Regular).unwrap();
        let open_total: usize = mask.mask.data().iter().filter(|&&v| v == 0.0).count();
        // Reconstruct expected count: every naive fragment of size f placed
        // inside some rolled window contributes f².
        let segs = |dim: usize, win: usize, s: usize| naive_shifted_segments(dim, win, s);
        let mut expected = 0usize;
        for (a0, a1) in segs(dims.0, cfg.window.0, cfg.shift.0) {
            for (b0, b1) in segs(dims.1, cfg.window.1, cfg.shift.1) {
                for (c0, c1) in segs(dims.2, cfg.window.2, cfg.shift.2) {
                    let f = (a1 - a0) * (b1 - b0) * (c1 - c0);
                    expected += f * f;
                }
            }
        }
        assert_eq!(open_total, expected);
        assert_eq!(mask.mask.shape(), &[kappa, t, t]);
    }
}
