//! Windowed multi-head attention with relative positional bias, and the
//! two-sublayer encoder block built from it.
//!
//! The shifted variant is realized efficiently as cyclic shift + additive
//! mask over the regular window tiling; its equivalence to the naive
//! straddling-window partition is proven by the oracle tests at the bottom.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::windowing::{
    build_shift_mask, count_windows, cyclic_shift, window_partition, window_reverse,
    AttentionMask, CountMode, TokenGrid, WindowConfig,
};

/// Layer-norm epsilon used everywhere in the crate (recorded in checkpoint
/// manifests).
pub const LN_EPS: f64 = 1e-5;

// ── relative position bias ─────────────────────────────────────────────────

/// Number of distinct 3D offsets between two positions of a (P, M1, M2)
/// window: (2P−1)(2M1−1)(2M2−1).
pub fn bias_table_len(window: (usize, usize, usize)) -> usize {
    (2 * window.0 - 1) * (2 * window.1 - 1) * (2 * window.2 - 1)
}

/// Flat `[T·T]` map from (query, key) token pair to bias-table row, indexed
/// by the 3D offset between their in-window positions.
pub fn relative_index(window: (usize, usize, usize)) -> Vec<usize> {
    relative_index_within(window, window).expect("window is within itself")
}

/// Like [`relative_index`], but for attention over a (possibly clamped)
/// `attend` window whose offsets index into a table laid out for the full
/// `table` window. Every offset of a sub-window is a valid offset of the
/// full window, so clamped stages can share the config-sized table.
pub fn relative_index_within(
    table: (usize, usize, usize),
    attend: (usize, usize, usize),
) -> Result<Vec<usize>> {
    if attend.0 > table.0 || attend.1 > table.1 || attend.2 > table.2 {
        return Err(Error::Config(format!(
            "attend window {attend:?} exceeds bias-table window {table:?}"
        )));
    }
    let (p, m1, m2) = table;
    let (a0, a1, a2) = attend;
    let t = a0 * a1 * a2;
    let pos = |i: usize| -> (i64, i64, i64) {
        let a = i / (a1 * a2);
        let b = (i / a2) % a1;
        let c = i % a2;
        (a as i64, b as i64, c as i64)
    };
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let (ai, bi, ci) = pos(i);
            let (aj, bj, cj) = pos(j);
            let da = (ai - aj + p as i64 - 1) as usize;
            let db = (bi - bj + m1 as i64 - 1) as usize;
            let dc = (ci - cj + m2 as i64 - 1) as usize;
            idx.push((da * (2 * m1 - 1) + db) * (2 * m2 - 1) + dc);
        }
    }
    Ok(idx)
}

// ── parameter bundles ──────────────────────────────────────────────────────

/// Two-layer MLP with GELU in between, biases on both layers.
#[derive(Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub fn mlp(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    x.linear(&p.w1, Some(&p.b1))?
        .gelu()?
        .linear(&p.w2, Some(&p.b2))
}

/// One windowed multi-head self-attention sublayer's parameters.
///
/// The bias table is laid out for `window` (the configured window); when a
/// small grid clamps the runtime window, the sub-window's offsets still
/// index into the same table, so parameter shapes depend only on the model
/// configuration, never on the input geometry.
#[derive(Clone)]
pub struct MSAParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    /// Relative mode: `[bias_table_len(window), heads]`, one row per 3D
    /// offset. Dense ablation mode: `[T·T, heads]`, one row per token pair.
    pub bias_table: Tensor,
    pub window: (usize, usize, usize),
    dense: bool,
}

impl MSAParams {
    pub fn new(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
        heads: usize,
        bias_table: Tensor,
        window: (usize, usize, usize),
    ) -> Result<Self> {
        Self::with_mode(w_q, w_k, w_v, w_o, heads, bias_table, window, false)
    }

    /// Ablation variant: the bias table holds one independent row per
    /// (query, key) pair instead of sharing rows across equal offsets.
    pub fn new_dense(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
        heads: usize,
        bias_table: Tensor,
        window: (usize, usize, usize),
    ) -> Result<Self> {
        Self::with_mode(w_q, w_k, w_v, w_o, heads, bias_table, window, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_mode(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
        heads: usize,
        bias_table: Tensor,
        window: (usize, usize, usize),
        dense: bool,
    ) -> Result<Self> {
        let c = match w_q.shape() {
            [cin, cout] if cin == cout => *cin,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "msa_params",
                    lhs: other.to_vec(),
                    rhs: vec![0, 0],
                })
            }
        };
        for w in [&w_k, &w_v, &w_o] {
            if w.shape() != [c, c] {
                return Err(Error::ShapeMismatch {
                    op: "msa_params",
                    lhs: w.shape().to_vec(),
                    rhs: vec![c, c],
                });
            }
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "channels {c} not divisible by heads {heads}"
            )));
        }
        let t = window.0 * window.1 * window.2;
        let len = if dense { t * t } else { bias_table_len(window) };
        if bias_table.shape() != [len, heads] {
            return Err(Error::ShapeMismatch {
                op: "msa_params",
                lhs: bias_table.shape().to_vec(),
                rhs: vec![len, heads],
            });
        }
        Ok(MSAParams {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            bias_table,
            window,
            dense,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn is_dense(&self) -> bool {
        self.dense
    }

    /// Bias matrix per head for an `attend` window (the runtime window,
    /// possibly clamped): `[heads, T, T]`, differentiable through the table
    /// gather.
    pub fn gather_bias(&self, attend: (usize, usize, usize)) -> Result<Tensor> {
        let t = attend.0 * attend.1 * attend.2;
        let idx = if self.dense {
            if attend != self.window {
                return Err(Error::Config(format!(
                    "dense bias tables cannot serve a clamped window \
                     ({attend:?} vs {:?})",
                    self.window
                )));
            }
            (0..t * t).collect()
        } else {
            relative_index_within(self.window, attend)?
        };
        self.bias_table
            .gather_rows(&idx)?
            .transpose_last2()?
            .reshape(&[self.heads, t, t])
    }

    fn check_cfg(&self, channels: usize, cfg: WindowConfig) -> Result<()> {
        if channels != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "window_msa",
                lhs: vec![channels],
                rhs: vec![self.channels()],
            });
        }
        if cfg.window.0 > self.window.0
            || cfg.window.1 > self.window.1
            || cfg.window.2 > self.window.2
        {
            return Err(Error::Config(format!(
                "window {:?} exceeds the {:?} these parameters were built for",
                cfg.window, self.window
            )));
        }
        Ok(())
    }
}

/// Keys and values exported by an encoder sublayer for decoder
/// cross-attention, as `[tokens, C]` tensors in grid order.
#[derive(Clone)]
pub struct KvPair {
    pub k: Tensor,
    pub v: Tensor,
}

// ── attention primitives ───────────────────────────────────────────────────

/// Core attention: `SoftMax(QKᵀ/√C_h + B + mask)V` over the last two dims.
///
/// `q`, `k`, `v` share a `[.., T, C_h]` shape; the scale uses the per-head
/// width (the last extent). `bias` and `mask` may be any shapes that
/// broadcast onto the `[.., T, T]` logits.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let ch = *q.shape().last().unwrap();
    let mut logits = q
        .matmul(&k.transpose_last2()?)?
        .scale(1.0 / (ch as f64).sqrt())?;
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    if let Some(m) = mask {
        logits = logits.add(m)?;
    }
    logits.softmax_last()?.matmul(v)
}

/// Permute a `[a, b, c, d]` tensor to `[a, c, b, d]` (differentiable).
fn permute_0213(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "permute_0213",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut idx = Vec::with_capacity(a * b * c);
    for i in 0..a {
        for k in 0..c {
            for j in 0..b {
                idx.push((i * b + j) * c + k);
            }
        }
    }
    x.reshape(&[a * b * c, d])?
        .gather_rows(&idx)?
        .reshape(&[a, c, b, d])
}

/// `[κ, T, C] → [κ, h, T, C/h]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let s = x.shape();
    let (kappa, t, c) = (s[0], s[1], s[2]);
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    permute_0213(&x.reshape(&[kappa, t, heads, c / heads])?)
}

/// `[κ, h, T, C/h] → [κ, T, C]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let merged = permute_0213(x)?;
    merged.reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Windowed multi-head attention over pre-projected `[tokens, C]` streams.
///
/// Handles the cyclic shift (when `cfg.shift` is nonzero the three streams
/// are rolled by −shift, attended under `mask`, and rolled back), window
/// partitioning, head split/merge, and per-head bias. No output projection.
pub fn windowed_attention(
    q_src: &Tensor,
    k_src: &Tensor,
    v_src: &Tensor,
    dims: (usize, usize, usize),
    cfg: WindowConfig,
    heads: usize,
    bias: &Tensor,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    let channels = match q_src.shape() {
        [n, c] if *n == dims.0 * dims.1 * dims.2 => *c,
        other => {
            return Err(Error::ShapeMismatch {
                op: "windowed_attention",
                lhs: other.to_vec(),
                rhs: vec![dims.0 * dims.1 * dims.2, 0],
            })
        }
    };
    let kappa = count_windows(dims, cfg, CountMode::Regular)?;
    let t = cfg.window_tokens();
    let roll = (
        -(cfg.shift.0 as i64),
        -(cfg.shift.1 as i64),
        -(cfg.shift.2 as i64),
    );
    let partition = |src: &Tensor| -> Result<Tensor> {
        let grid = TokenGrid::new(dims, channels, src.clone())?;
        let grid = if cfg.is_shifted() {
            cyclic_shift(&grid, roll)?
        } else {
            grid
        };
        split_heads(&window_partition(&grid, cfg)?, heads)
    };
    let qw = partition(q_src)?;
    let kw = partition(k_src)?;
    let vw = partition(v_src)?;
    let mask_t = match mask {
        Some(m) => Some(m.mask.reshape(&[kappa, 1, t, t])?),
        None => None,
    };
    let attn = scaled_dot_attention(&qw, &kw, &vw, Some(bias), mask_t.as_ref())?;
    let windows = merge_heads(&attn)?;
    let grid = window_reverse(&windows, dims, cfg)?;
    let grid = if cfg.is_shifted() {
        cyclic_shift(&grid, (cfg.shift.0 as i64, cfg.shift.1 as i64, cfg.shift.2 as i64))?
    } else {
        grid
    };
    Ok(grid.tokens)
}

/// One VT-(S)W-MSA sublayer body: project Q/K/V, windowed attention, output
/// projection. The input grid is expected to be already layer-normalised;
/// returns the sublayer output along with the K/V export the decoder's
/// cross-attention consumes.
pub fn window_msa_exporting(
    grid: &TokenGrid,
    params: &MSAParams,
    cfg: WindowConfig,
) -> Result<(TokenGrid, KvPair)> {
    let cfg = cfg.clamped(grid.dims);
    params.check_cfg(grid.channels, cfg)?;
    let q = grid.tokens.linear(&params.w_q, None)?;
    let k = grid.tokens.linear(&params.w_k, None)?;
    let v = grid.tokens.linear(&params.w_v, None)?;
    let bias = params.gather_bias(cfg.window)?;
    let mask = if cfg.is_shifted() {
        Some(build_shift_mask(grid.dims, cfg)?)
    } else {
        None
    };
    let core = windowed_attention(&q, &k, &v, grid.dims, cfg, params.heads, &bias, mask.as_ref())?;
    let out = core.linear(&params.w_o, None)?;
    Ok((
        TokenGrid::new(grid.dims, grid.channels, out)?,
        KvPair { k, v },
    ))
}

/// [`window_msa_exporting`] without the export.
pub fn window_msa(grid: &TokenGrid, params: &MSAParams, cfg: WindowConfig) -> Result<TokenGrid> {
    Ok(window_msa_exporting(grid, params, cfg)?.0)
}

// ── encoder block ──────────────────────────────────────────────────────────

/// Parameters of one attention sublayer inside an encoder block.
#[derive(Clone)]
pub struct EncoderSublayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub msa: MSAParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp: MlpParams,
}

/// One encoder unit: a regular-window sublayer followed by a shifted-window
/// sublayer, each with its own pre-LN MSA and pre-LN MLP residual stages.
#[derive(Clone)]
pub struct EncoderBlockParams {
    pub regular: EncoderSublayerParams,
    pub shifted: EncoderSublayerParams,
}

fn encoder_sublayer_exporting(
    grid: &TokenGrid,
    params: &EncoderSublayerParams,
    cfg: WindowConfig,
) -> Result<(TokenGrid, KvPair)> {
    let normed = grid
        .tokens
        .layer_norm(&params.ln1_gamma, &params.ln1_beta, LN_EPS)?;
    let (msa_out, kv) = window_msa_exporting(
        &TokenGrid::new(grid.dims, grid.channels, normed)?,
        &params.msa,
        cfg,
    )?;
    let z = msa_out.tokens.add(&grid.tokens)?;
    let z2 = mlp(
        &z.layer_norm(&params.ln2_gamma, &params.ln2_beta, LN_EPS)?,
        &params.mlp,
    )?
    .add(&z)?;
    Ok((TokenGrid::new(grid.dims, grid.channels, z2)?, kv))
}

/// Runs one full encoder block and exports each sublayer's K/V pair
/// (regular first, shifted second) for decoder cross-attention.
///
/// Only `cfg.window` is consulted: the block always runs the regular
/// sublayer followed by the half-window-shifted sublayer, clamping both
/// against the grid extents.
pub fn vt_encoder_block_exporting(
    grid: &TokenGrid,
    params: &EncoderBlockParams,
    cfg: WindowConfig,
) -> Result<(TokenGrid, KvPair, KvPair)> {
    let reg = WindowConfig {
        window: cfg.window,
        shift: (0, 0, 0),
    }
    .clamped(grid.dims);
    let shf = WindowConfig {
        window: cfg.window,
        shift: (cfg.window.0 / 2, cfg.window.1 / 2, cfg.window.2 / 2),
    }
    .clamped(grid.dims);
    let (mid, kv_reg) = encoder_sublayer_exporting(grid, &params.regular, reg)?;
    let (out, kv_shf) = encoder_sublayer_exporting(&mid, &params.shifted, shf)?;
    Ok((out, kv_reg, kv_shf))
}

/// One full encoder block without the K/V exports.
pub fn vt_encoder_block(
    grid: &TokenGrid,
    params: &EncoderBlockParams,
    cfg: WindowConfig,
) -> Result<TokenGrid> {
    Ok(vt_encoder_block_exporting(grid, params, cfg)?.0)
}
