//! Full model assembly: patch embedding, the four-stage windowed-attention
//! encoder with in-plane patch merging, the mirrored decoder with parallel
//! self/cross attention and fused skip connections, the classifier head,
//! and the training loss.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bias_table_len, mlp, relative_index_within, vt_encoder_block_exporting, windowed_attention,
    EncoderBlockParams, EncoderSublayerParams, KvPair, MSAParams, MlpParams, LN_EPS,
};
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;
use crate::windowing::{
    build_shift_mask, patch_partition, TokenGrid, WindowConfig,
};

pub const STAGES: usize = 4;

// ── configuration ──────────────────────────────────────────────────────────

/// Architecture hyperparameters. Parameter shapes are a pure function of
/// this struct; input geometry never affects them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Base channel width; stage s runs at `c·2^s`.
    pub c: usize,
    /// Patch/window extent along depth.
    pub p: usize,
    /// Patch/window extent in-plane.
    pub m: usize,
    /// Segmentation class count.
    pub k: usize,
    /// Input modality count.
    pub in_channels: usize,
    /// Encoder/decoder block count per stage.
    pub depths: [usize; STAGES],
    /// Attention heads per stage.
    pub heads: [usize; STAGES],
    /// MLP hidden width as a multiple of the stage width.
    pub mlp_ratio: f64,
    /// Fusion coefficient: `z = α·ẑ_c + (1−α)·ẑ_s + F(ẑ_s)`.
    pub alpha: f64,
    /// Whether the decoder fusion path F (positional encoding + LN + MLP)
    /// exists; disabling it removes those parameters.
    pub fpe_enabled: bool,
    /// Ablation: per-pair dense bias tables instead of shared
    /// relative-offset rows.
    pub dense_bias: bool,
}

impl ModelConfig {
    /// Desk-scale configuration used by the gradient-check and overfit
    /// harnesses.
    pub fn tiny() -> Self {
        ModelConfig {
            c: 8,
            p: 2,
            m: 2,
            k: 3,
            in_channels: 2,
            depths: [1, 1, 1, 1],
            heads: [2, 4, 8, 8],
            mlp_ratio: 4.0,
            alpha: 0.5,
            fpe_enabled: true,
            dense_bias: false,
        }
    }

    /// The small variant (C = 48).
    pub fn small() -> Self {
        ModelConfig { c: 48, ..Self::base() }
    }

    /// The base variant (C = 72, P = M = 4, four modalities, four classes).
    pub fn base() -> Self {
        ModelConfig {
            c: 72,
            p: 4,
            m: 4,
            k: 4,
            in_channels: 4,
            depths: [2, 2, 2, 2],
            heads: [3, 6, 12, 24],
            mlp_ratio: 4.0,
            alpha: 0.5,
            fpe_enabled: true,
            dense_bias: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            _ => None,
        }
    }

    /// Every key understood by [`ModelConfig::from_manifest_str`], which is
    /// also exactly the set emitted by [`ModelConfig::to_manifest_string`].
    /// Checkpoint manifests embed these lines among their own keys, so the
    /// loader uses this list to pull the config subset back out.
    pub const MANIFEST_KEYS: [&'static str; 11] = [
        "c",
        "p",
        "m",
        "k",
        "in_channels",
        "depths",
        "heads",
        "mlp_ratio",
        "alpha",
        "fpe_enabled",
        "dense_bias",
    ];

    pub fn stage_channels(&self, s: usize) -> usize {
        self.c << s
    }

    pub fn stage_hidden(&self, s: usize) -> usize {
        (self.mlp_ratio * self.stage_channels(s) as f64).round() as usize
    }

    /// The configured (unshifted) window.
    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            window: (self.p, self.m, self.m),
            shift: (0, 0, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 6 {
            return Err(Error::Config(format!(
                "base width {} too small (the positional encoding needs at least 6 channels)",
                self.c
            )));
        }
        if self.p == 0 || self.m == 0 || self.k == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "p, m, k, in_channels must all be at least 1".into(),
            ));
        }
        for s in 0..STAGES {
            if self.depths[s] == 0 {
                return Err(Error::Config(format!("stage {s} has zero depth")));
            }
            if self.heads[s] == 0 || self.stage_channels(s) % self.heads[s] != 0 {
                return Err(Error::Config(format!(
                    "stage {s} width {} not divisible by heads {}",
                    self.stage_channels(s),
                    self.heads[s]
                )));
            }
            let hidden = self.mlp_ratio * self.stage_channels(s) as f64;
            if !(hidden.is_finite() && hidden > 0.0 && hidden.fract() == 0.0) {
                return Err(Error::Config(format!(
                    "mlp_ratio {} gives a non-integral hidden width at stage {s}",
                    self.mlp_ratio
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Key/value rendering used in checkpoint manifests and config files.
    pub fn to_manifest_string(&self) -> String {
        let join = |xs: &[usize; STAGES]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "c={}\np={}\nm={}\nk={}\nin_channels={}\ndepths={}\nheads={}\n\
             mlp_ratio={}\nalpha={}\nfpe_enabled={}\ndense_bias={}\n",
            self.c,
            self.p,
            self.m,
            self.k,
            self.in_channels,
            join(&self.depths),
            join(&self.heads),
            self.mlp_ratio,
            self.alpha,
            self.fpe_enabled,
            self.dense_bias,
        )
    }

    /// Parses the `key=value` form produced by
    /// [`ModelConfig::to_manifest_string`]. Blank lines and `#` comments are
    /// skipped; unknown, duplicate, or missing keys are errors.
    pub fn from_manifest_str(text: &str) -> Result<Self> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            if seen.insert(key, value.trim()).is_some() {
                return Err(Error::Config(format!("duplicate config key {key}")));
            }
        }
        fn get<'a>(seen: &HashMap<&str, &'a str>, key: &str) -> Result<&'a str> {
            seen.get(key)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing config key {key}")))
        }
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {v:?}")))
        }
        fn parse_list(key: &str, v: &str) -> Result<[usize; STAGES]> {
            let parts: Vec<usize> = v
                .split(',')
                .map(|p| parse(key, p.trim()))
                .collect::<Result<_>>()?;
            parts.try_into().map_err(|_| {
                Error::Config(format!("config key {key}: expected {STAGES} entries"))
            })
        }
        for key in seen.keys() {
            if !Self::MANIFEST_KEYS.contains(key) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
        }
        let config = ModelConfig {
            c: parse("c", get(&seen, "c")?)?,
            p: parse("p", get(&seen, "p")?)?,
            m: parse("m", get(&seen, "m")?)?,
            k: parse("k", get(&seen, "k")?)?,
            in_channels: parse("in_channels", get(&seen, "in_channels")?)?,
            depths: parse_list("depths", get(&seen, "depths")?)?,
            heads: parse_list("heads", get(&seen, "heads")?)?,
            mlp_ratio: parse("mlp_ratio", get(&seen, "mlp_ratio")?)?,
            alpha: parse("alpha", get(&seen, "alpha")?)?,
            fpe_enabled: parse("fpe_enabled", get(&seen, "fpe_enabled")?)?,
            dense_bias: parse("dense_bias", get(&seen, "dense_bias")?)?,
        };
        config.validate()?;
        Ok(config)
    }
}

// ── Fourier positional encoding ────────────────────────────────────────────

/// Deterministic, parameter-free positional encoding over a token grid.
///
/// Channels split into three near-equal groups for the depth/row/column
/// axes; within a group, even channels carry `sin(pos·ω_i)` and odd
/// channels `cos(pos·ω_i)` at geometric frequencies `ω_i = 10000^(−2i/g)`.
/// Untracked (constant with respect to every parameter).
pub fn fpe3d(dims: (usize, usize, usize), c: usize) -> Result<Tensor> {
    if c < 6 {
        return Err(Error::Config(format!(
            "positional encoding needs at least 6 channels, got {c}"
        )));
    }
    let base = c / 3;
    let rem = c % 3;
    let groups = [
        base + usize::from(rem > 0),
        base + usize::from(rem > 1),
        base,
    ];
    let n = dims.0 * dims.1 * dims.2;
    let mut data = Vec::with_capacity(n * c);
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                for (axis, &g) in [z, y, x].iter().zip(&groups) {
                    let pos = *axis as f64;
                    for ch in 0..g {
                        let pair = (ch / 2) as f64;
                        let omega = 10000f64.powf(-2.0 * pair / g as f64);
                        data.push(if ch % 2 == 0 {
                            (pos * omega).sin()
                        } else {
                            (pos * omega).cos()
                        });
                    }
                }
            }
        }
    }
    Tensor::from_vec(data, &[n, c])
}

// ── resolution changes ─────────────────────────────────────────────────────

/// Per-token affine map onto width `w.shape()[1]`, geometry unchanged.
pub fn linear_embedding(grid: &TokenGrid, w: &Tensor, b: &Tensor) -> Result<TokenGrid> {
    let tokens = grid.tokens.linear(w, Some(b))?;
    let c = tokens.shape()[1];
    TokenGrid::new(grid.dims, c, tokens)
}

/// Concatenates each in-plane 2×2 token group (order (0,0), (0,1), (1,0),
/// (1,1)) and reduces 4C → 2C with `w`; depth extent is unchanged.
pub fn patch_merging(grid: &TokenGrid, w: &Tensor) -> Result<TokenGrid> {
    let (d, h, ww) = grid.dims;
    if h % 2 != 0 || ww % 2 != 0 {
        return Err(Error::Geometry(format!(
            "patch merging needs even in-plane extents, got {}×{}",
            h, ww
        )));
    }
    let c = grid.channels;
    if w.shape() != [4 * c, 2 * c] {
        return Err(Error::ShapeMismatch {
            op: "patch_merging",
            lhs: w.shape().to_vec(),
            rhs: vec![4 * c, 2 * c],
        });
    }
    let mut idx = Vec::with_capacity(d * h * ww);
    for z in 0..d {
        for y in 0..h / 2 {
            for x in 0..ww / 2 {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    idx.push((z * h + 2 * y + dy) * ww + 2 * x + dx);
                }
            }
        }
    }
    let gathered = grid
        .tokens
        .gather_rows(&idx)?
        .reshape(&[d * (h / 2) * (ww / 2), 4 * c])?;
    let merged = gathered.matmul(w)?;
    TokenGrid::new((d, h / 2, ww / 2), 2 * c, merged)
}

/// Up-projects each token with `up: [C, C_up]` and distributes the result
/// over an `fd×fh×fw` block of finer-lattice tokens, each taking its own
/// `C_up/(fd·fh·fw)`-channel chunk.
pub fn patch_expanding(
    grid: &TokenGrid,
    factors: (usize, usize, usize),
    up: &Tensor,
) -> Result<TokenGrid> {
    let (fd, fh, fw) = factors;
    let blow = fd * fh * fw;
    if blow == 0 {
        return Err(Error::Config("expansion factors must be positive".into()));
    }
    let c = grid.channels;
    let c_up = match up.shape() {
        [cin, cup] if *cin == c && cup % blow == 0 => *cup,
        other => {
            return Err(Error::ShapeMismatch {
                op: "patch_expanding",
                lhs: other.to_vec(),
                rhs: vec![c, blow],
            })
        }
    };
    let c_out = c_up / blow;
    let (d, h, w) = grid.dims;
    let dims_out = (d * fd, h * fh, w * fw);
    let projected = grid
        .tokens
        .linear(up, None)?
        .reshape(&[grid.token_count() * blow, c_out])?;
    let mut idx = Vec::with_capacity(dims_out.0 * dims_out.1 * dims_out.2);
    for z in 0..dims_out.0 {
        for y in 0..dims_out.1 {
            for x in 0..dims_out.2 {
                let src = ((z / fd) * h + y / fh) * w + x / fw;
                let chunk = ((z % fd) * fh + y % fh) * fw + x % fw;
                idx.push(src * blow + chunk);
            }
        }
    }
    let tokens = projected.gather_rows(&idx)?;
    TokenGrid::new(dims_out, c_out, tokens)
}

// ── fusion ─────────────────────────────────────────────────────────────────

/// LN + MLP applied to the positionally-encoded self-attention branch.
#[derive(Clone)]
pub struct FusionParams {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub mlp: MlpParams,
}

/// `z = α·ẑ_c + (1−α)·ẑ_s [+ MLP(LN(ẑ_s + FPE))]`.
///
/// With the fusion path absent and α = 0.5 this is symmetric under swapping
/// the branches; the positional term breaks that symmetry.
pub fn fuse(
    z_c: &TokenGrid,
    z_s: &TokenGrid,
    alpha: f64,
    fusion: Option<(&FusionParams, &Tensor)>,
) -> Result<TokenGrid> {
    if z_c.dims != z_s.dims || z_c.channels != z_s.channels {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: z_c.tokens.shape().to_vec(),
            rhs: z_s.tokens.shape().to_vec(),
        });
    }
    let mut out = z_c
        .tokens
        .scale(alpha)?
        .add(&z_s.tokens.scale(1.0 - alpha)?)?;
    if let Some((params, fpe)) = fusion {
        let encoded = z_s.tokens.add(fpe)?;
        let f = mlp(
            &encoded.layer_norm(&params.ln_gamma, &params.ln_beta, LN_EPS)?,
            &params.mlp,
        )?;
        out = out.add(&f)?;
    }
    TokenGrid::new(z_c.dims, z_c.channels, out)
}

// ── decoder block ──────────────────────────────────────────────────────────

/// One decoder attention sublayer: a self-attention branch and a
/// cross-attention branch over the encoder's exported K/V, sharing a single
/// query projection, merged by [`fuse`].
#[derive(Clone)]
pub struct DecoderSublayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// The shared query projection used by both branches.
    pub w_q: Tensor,
    pub sa_w_k: Tensor,
    pub sa_w_v: Tensor,
    pub heads: usize,
    pub window: (usize, usize, usize),
    pub dense: bool,
    pub sa_bias: Tensor,
    pub ca_bias: Tensor,
    pub fusion: Option<FusionParams>,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp: MlpParams,
}

/// Regular-window then shifted-window decoder sublayers; the pairing with
/// encoder exports is criss-cross (regular consumes regular, shifted
/// consumes shifted).
#[derive(Clone)]
pub struct DecoderBlockParams {
    pub regular: DecoderSublayerParams,
    pub shifted: DecoderSublayerParams,
}

fn gather_decoder_bias(
    table: &Tensor,
    table_window: (usize, usize, usize),
    attend: (usize, usize, usize),
    heads: usize,
    dense: bool,
) -> Result<Tensor> {
    let t = attend.0 * attend.1 * attend.2;
    let idx = if dense {
        if attend != table_window {
            return Err(Error::Config(format!(
                "dense bias tables cannot serve a clamped window ({attend:?} vs {table_window:?})"
            )));
        }
        (0..t * t).collect()
    } else {
        relative_index_within(table_window, attend)?
    };
    table
        .gather_rows(&idx)?
        .transpose_last2()?
        .reshape(&[heads, t, t])
}

fn decoder_sublayer(
    grid: &TokenGrid,
    params: &DecoderSublayerParams,
    cfg: WindowConfig,
    enc: &KvPair,
    alpha: f64,
    fpe: Option<&Tensor>,
) -> Result<TokenGrid> {
    let cfg = cfg.clamped(grid.dims);
    for kv in [&enc.k, &enc.v] {
        if kv.shape() != grid.tokens.shape() {
            return Err(Error::ShapeMismatch {
                op: "vt_decoder_block",
                lhs: kv.shape().to_vec(),
                rhs: grid.tokens.shape().to_vec(),
            });
        }
    }
    let normed = grid
        .tokens
        .layer_norm(&params.ln1_gamma, &params.ln1_beta, LN_EPS)?;
    let q = normed.linear(&params.w_q, None)?;
    let k_sa = normed.linear(&params.sa_w_k, None)?;
    let v_sa = normed.linear(&params.sa_w_v, None)?;
    let sa_bias =
        gather_decoder_bias(&params.sa_bias, params.window, cfg.window, params.heads, params.dense)?;
    let ca_bias =
        gather_decoder_bias(&params.ca_bias, params.window, cfg.window, params.heads, params.dense)?;
    let mask = if cfg.is_shifted() {
        Some(build_shift_mask(grid.dims, cfg)?)
    } else {
        None
    };
    let z_s = windowed_attention(
        &q, &k_sa, &v_sa, grid.dims, cfg, params.heads, &sa_bias, mask.as_ref(),
    )?;
    let z_c = windowed_attention(
        &q, &enc.k, &enc.v, grid.dims, cfg, params.heads, &ca_bias, mask.as_ref(),
    )?;
    let fused = fuse(
        &TokenGrid::new(grid.dims, grid.channels, z_c)?,
        &TokenGrid::new(grid.dims, grid.channels, z_s)?,
        alpha,
        match (&params.fusion, fpe) {
            (Some(f), Some(enc)) => Some((f, enc)),
            (Some(_), None) => {
                return Err(Error::Config(
                    "fusion parameters present but no positional encoding supplied".into(),
                ))
            }
            _ => None,
        },
    )?;
    let z1 = fused.tokens.add(&grid.tokens)?;
    let out = mlp(
        &z1.layer_norm(&params.ln2_gamma, &params.ln2_beta, LN_EPS)?,
        &params.mlp,
    )?
    .add(&z1)?;
    TokenGrid::new(grid.dims, grid.channels, out)
}

/// One decoder block: regular-window sublayer (consuming the encoder's
/// regular-window K/V) then shifted-window sublayer (consuming the shifted
/// K/V), each fusing its self- and cross-attention branches.
///
/// As in the encoder block, only `cfg.window` is consulted.
pub fn vt_decoder_block(
    grid: &TokenGrid,
    params: &DecoderBlockParams,
    cfg: WindowConfig,
    enc_regular: &KvPair,
    enc_shifted: &KvPair,
    alpha: f64,
) -> Result<TokenGrid> {
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
    let needs_fpe = params.regular.fusion.is_some() || params.shifted.fusion.is_some();
    let fpe = if needs_fpe {
        Some(fpe3d(grid.dims, grid.channels)?)
    } else {
        None
    };
    let mid = decoder_sublayer(grid, &params.regular, reg, enc_regular, alpha, fpe.as_ref())?;
    decoder_sublayer(&mid, &params.shifted, shf, enc_shifted, alpha, fpe.as_ref())
}

// ── parameter assembly ─────────────────────────────────────────────────────

/// How a parameter tensor is initialized by [`VTUNetParams::init_seeded`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Centered uniform with scale `1/√fan_in`.
    Uniform { fan_in: usize },
    Zero,
    One,
}

/// One encoder stage: its blocks, and the in-plane merge that follows it
/// (absent on the bottleneck stage).
pub struct EncoderStageParams {
    pub blocks: Vec<EncoderBlockParams>,
    pub merge: Option<Tensor>,
}

/// One decoder stage: the expansion that produces its grid, then its
/// blocks.
pub struct DecoderStageParams {
    pub expand: Tensor,
    pub blocks: Vec<DecoderBlockParams>,
}

/// The complete parameter set of one model instance. Every tensor is
/// addressable by a stable dotted path via [`VTUNetParams::named_tensors`].
pub struct VTUNetParams {
    pub config: ModelConfig,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    /// Stages 0..3; stage 3 is the bottleneck (no merge).
    pub enc: Vec<EncoderStageParams>,
    /// Decoder stages in execution order: stage 2, then 1, then 0.
    pub dec: Vec<DecoderStageParams>,
    pub final_expand: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl VTUNetParams {
    /// Builds the full parameter set by requesting every tensor from
    /// `fetch` in canonical order. All construction paths (seeded init,
    /// checkpoint load, SGD update) funnel through here, so the canonical
    /// order and shapes cannot drift apart.
    pub fn from_fetch(
        config: &ModelConfig,
        mut fetch: impl FnMut(&str, &[usize], Init) -> Result<Tensor>,
    ) -> Result<VTUNetParams> {
        config.validate()?;
        let window = (config.p, config.m, config.m);
        let table_rows = if config.dense_bias {
            let t = config.p * config.m * config.m;
            t * t
        } else {
            bias_table_len(window)
        };
        let mut get = |name: String, shape: Vec<usize>, init: Init| -> Result<Tensor> {
            let t = fetch(&name, &shape, init)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "params",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            Ok(t)
        };

        let embed_in = config.p * config.m * config.m * config.in_channels;
        let embed_w = get(
            "embed.w".into(),
            vec![embed_in, config.c],
            Init::Uniform { fan_in: embed_in },
        )?;
        let embed_b = get("embed.b".into(), vec![config.c], Init::Zero)?;

        let mlp_params = |prefix: &str, c: usize, hidden: usize, get: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<Tensor>| -> Result<MlpParams> {
            Ok(MlpParams {
                w1: get(format!("{prefix}.w1"), vec![c, hidden], Init::Uniform { fan_in: c })?,
                b1: get(format!("{prefix}.b1"), vec![hidden], Init::Zero)?,
                w2: get(format!("{prefix}.w2"), vec![hidden, c], Init::Uniform { fan_in: hidden })?,
                b2: get(format!("{prefix}.b2"), vec![c], Init::Zero)?,
            })
        };

        let mut enc = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let c = config.stage_channels(s);
            let hidden = config.stage_hidden(s);
            let heads = config.heads[s];
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for b in 0..config.depths[s] {
                let mut sublayer = |side: &str| -> Result<EncoderSublayerParams> {
                    let pre = format!("enc{s}.blk{b}.{side}");
                    let ln1_gamma = get(format!("{pre}.ln1.gamma"), vec![c], Init::One)?;
                    let ln1_beta = get(format!("{pre}.ln1.beta"), vec![c], Init::Zero)?;
                    let u = Init::Uniform { fan_in: c };
                    let w_q = get(format!("{pre}.msa.w_q"), vec![c, c], u)?;
                    let w_k = get(format!("{pre}.msa.w_k"), vec![c, c], u)?;
                    let w_v = get(format!("{pre}.msa.w_v"), vec![c, c], u)?;
                    let w_o = get(format!("{pre}.msa.w_o"), vec![c, c], u)?;
                    let table = get(
                        format!("{pre}.msa.bias_table"),
                        vec![table_rows, heads],
                        Init::Zero,
                    )?;
                    let msa = if config.dense_bias {
                        MSAParams::new_dense(w_q, w_k, w_v, w_o, heads, table, window)?
                    } else {
                        MSAParams::new(w_q, w_k, w_v, w_o, heads, table, window)?
                    };
                    Ok(EncoderSublayerParams {
                        ln1_gamma,
                        ln1_beta,
                        msa,
                        ln2_gamma: get(format!("{pre}.ln2.gamma"), vec![c], Init::One)?,
                        ln2_beta: get(format!("{pre}.ln2.beta"), vec![c], Init::Zero)?,
                        mlp: mlp_params(&format!("{pre}.mlp"), c, hidden, &mut get)?,
                    })
                };
                blocks.push(EncoderBlockParams {
                    regular: sublayer("regular")?,
                    shifted: sublayer("shifted")?,
                });
            }
            let merge = if s + 1 < STAGES {
                Some(get(
                    format!("enc{s}.merge.w"),
                    vec![4 * c, 2 * c],
                    Init::Uniform { fan_in: 4 * c },
                )?)
            } else {
                None
            };
            enc.push(EncoderStageParams { blocks, merge });
        }

        let mut dec = Vec::with_capacity(STAGES - 1);
        for s in (0..STAGES - 1).rev() {
            let c = config.stage_channels(s);
            let c_src = config.stage_channels(s + 1);
            let hidden = config.stage_hidden(s);
            let heads = config.heads[s];
            let expand = get(
                format!("dec{s}.expand.w"),
                vec![c_src, 2 * c_src],
                Init::Uniform { fan_in: c_src },
            )?;
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for b in 0..config.depths[s] {
                let mut sublayer = |side: &str| -> Result<DecoderSublayerParams> {
                    let pre = format!("dec{s}.blk{b}.{side}");
                    let u = Init::Uniform { fan_in: c };
                    Ok(DecoderSublayerParams {
                        ln1_gamma: get(format!("{pre}.ln1.gamma"), vec![c], Init::One)?,
                        ln1_beta: get(format!("{pre}.ln1.beta"), vec![c], Init::Zero)?,
                        w_q: get(format!("{pre}.w_q"), vec![c, c], u)?,
                        sa_w_k: get(format!("{pre}.sa.w_k"), vec![c, c], u)?,
                        sa_w_v: get(format!("{pre}.sa.w_v"), vec![c, c], u)?,
                        heads,
                        window,
                        dense: config.dense_bias,
                        sa_bias: get(
                            format!("{pre}.sa.bias_table"),
                            vec![table_rows, heads],
                            Init::Zero,
                        )?,
                        ca_bias: get(
                            format!("{pre}.ca.bias_table"),
                            vec![table_rows, heads],
                            Init::Zero,
                        )?,
                        fusion: if config.fpe_enabled {
                            Some(FusionParams {
                                ln_gamma: get(format!("{pre}.fuse.ln.gamma"), vec![c], Init::One)?,
                                ln_beta: get(format!("{pre}.fuse.ln.beta"), vec![c], Init::Zero)?,
                                mlp: mlp_params(&format!("{pre}.fuse.mlp"), c, c, &mut get)?,
                            })
                        } else {
                            None
                        },
                        ln2_gamma: get(format!("{pre}.ln2.gamma"), vec![c], Init::One)?,
                        ln2_beta: get(format!("{pre}.ln2.beta"), vec![c], Init::Zero)?,
                        mlp: mlp_params(&format!("{pre}.mlp"), c, hidden, &mut get)?,
                    })
                };
                blocks.push(DecoderBlockParams {
                    regular: sublayer("regular")?,
                    shifted: sublayer("shifted")?,
                });
            }
            dec.push(DecoderStageParams { expand, blocks });
        }

        let final_up = config.p * config.m * config.m * config.c;
        let final_expand = get(
            "final.expand.w".into(),
            vec![config.c, final_up],
            Init::Uniform { fan_in: config.c },
        )?;
        let head_w = get(
            "head.w".into(),
            vec![config.c, config.k],
            Init::Uniform { fan_in: config.c },
        )?;
        let head_b = get("head.b".into(), vec![config.k], Init::Zero)?;

        Ok(VTUNetParams {
            config: config.clone(),
            embed_w,
            embed_b,
            enc,
            dec,
            final_expand,
            head_w,
            head_b,
        })
    }

    /// Canonical (name, shape) listing — a pure function of the config.
    pub fn param_spec(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let mut spec = Vec::new();
        Self::from_fetch(config, |name, shape, _| {
            spec.push((name.to_string(), shape.to_vec()));
            Ok(Tensor::zeros(shape))
        })?;
        Ok(spec)
    }

    /// Total scalar parameter count for a config.
    pub fn count(config: &ModelConfig) -> Result<usize> {
        Ok(Self::param_spec(config)?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    /// Seeded random initialization: projections centered-uniform at
    /// `1/√fan_in`, bias tables and biases zero, LN at identity.
    pub fn init_seeded(config: &ModelConfig, seed: u64) -> Result<VTUNetParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fetch(config, |_, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform { fan_in } => {
                    let s = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-s..s)).collect()
                }
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
            };
            Tensor::from_vec(data, shape)
        })
    }

    /// Every parameter as (dotted path, tensor), in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        let mut push = |name: String, t: &Tensor| out.push((name, t.clone()));
        push("embed.w".into(), &self.embed_w);
        push("embed.b".into(), &self.embed_b);
        let mlp_entries = |prefix: String, m: &MlpParams, push: &mut dyn FnMut(String, &Tensor)| {
            push(format!("{prefix}.w1"), &m.w1);
            push(format!("{prefix}.b1"), &m.b1);
            push(format!("{prefix}.w2"), &m.w2);
            push(format!("{prefix}.b2"), &m.b2);
        };
        for (s, stage) in self.enc.iter().enumerate() {
            for (b, blk) in stage.blocks.iter().enumerate() {
                for (side, sub) in [("regular", &blk.regular), ("shifted", &blk.shifted)] {
                    let pre = format!("enc{s}.blk{b}.{side}");
                    push(format!("{pre}.ln1.gamma"), &sub.ln1_gamma);
                    push(format!("{pre}.ln1.beta"), &sub.ln1_beta);
                    push(format!("{pre}.msa.w_q"), &sub.msa.w_q);
                    push(format!("{pre}.msa.w_k"), &sub.msa.w_k);
                    push(format!("{pre}.msa.w_v"), &sub.msa.w_v);
                    push(format!("{pre}.msa.w_o"), &sub.msa.w_o);
                    push(format!("{pre}.msa.bias_table"), &sub.msa.bias_table);
                    push(format!("{pre}.ln2.gamma"), &sub.ln2_gamma);
                    push(format!("{pre}.ln2.beta"), &sub.ln2_beta);
                    mlp_entries(format!("{pre}.mlp"), &sub.mlp, &mut push);
                }
            }
            if let Some(m) = &stage.merge {
                push(format!("enc{s}.merge.w"), m);
            }
        }
        for (i, stage) in self.dec.iter().enumerate() {
            let s = STAGES - 2 - i;
            push(format!("dec{s}.expand.w"), &stage.expand);
            for (b, blk) in stage.blocks.iter().enumerate() {
                for (side, sub) in [("regular", &blk.regular), ("shifted", &blk.shifted)] {
                    let pre = format!("dec{s}.blk{b}.{side}");
                    push(format!("{pre}.ln1.gamma"), &sub.ln1_gamma);
                    push(format!("{pre}.ln1.beta"), &sub.ln1_beta);
                    push(format!("{pre}.w_q"), &sub.w_q);
                    push(format!("{pre}.sa.w_k"), &sub.sa_w_k);
                    push(format!("{pre}.sa.w_v"), &sub.sa_w_v);
                    push(format!("{pre}.sa.bias_table"), &sub.sa_bias);
                    push(format!("{pre}.ca.bias_table"), &sub.ca_bias);
                    if let Some(f) = &sub.fusion {
                        push(format!("{pre}.fuse.ln.gamma"), &f.ln_gamma);
                        push(format!("{pre}.fuse.ln.beta"), &f.ln_beta);
                        mlp_entries(format!("{pre}.fuse.mlp"), &f.mlp, &mut push);
                    }
                    push(format!("{pre}.ln2.gamma"), &sub.ln2_gamma);
                    push(format!("{pre}.ln2.beta"), &sub.ln2_beta);
                    mlp_entries(format!("{pre}.mlp"), &sub.mlp, &mut push);
                }
            }
        }
        push("final.expand.w".into(), &self.final_expand);
        push("head.w".into(), &self.head_w);
        push("head.b".into(), &self.head_b);
        out
    }

    /// Rebuilds the parameter set with every tensor passed through `f`
    /// (e.g. a gradient-descent update or a move onto a tape).
    pub fn map_tensors(
        &self,
        mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>,
    ) -> Result<VTUNetParams> {
        let mut by_name: HashMap<String, Tensor> = self.named_tensors().into_iter().collect();
        Self::from_fetch(&self.config, |name, _, _| {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            f(name, &t)
        })
    }
}

// ── forward ────────────────────────────────────────────────────────────────

/// Classifier head: per-voxel affine map from C channels to K logits.
pub fn classifier_head(grid: &TokenGrid, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = match w.shape() {
        [cin, k] if *cin == grid.channels => *k,
        other => {
            return Err(Error::ShapeMismatch {
                op: "classifier_head",
                lhs: other.to_vec(),
                rhs: vec![grid.channels, 0],
            })
        }
    };
    grid.tokens
        .linear(w, Some(b))?
        .reshape(&[grid.dims.0, grid.dims.1, grid.dims.2, k])
}

/// Geometry record of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForwardTrace {
    /// Encoder token-grid dims per stage (stage 3 = bottleneck).
    pub stage_dims: [(usize, usize, usize); STAGES],
    pub stage_channels: [usize; STAGES],
    /// Decoder grid dims in execution order (stages 2, 1, 0).
    pub decoder_dims: [(usize, usize, usize); STAGES - 1],
}

impl ForwardTrace {
    pub fn bottleneck_dims(&self) -> (usize, usize, usize) {
        self.stage_dims[STAGES - 1]
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels[STAGES - 1]
    }
}

/// Validates the entire stage geometry of an input volume against a config
/// before any compute: patch divisibility, three rounds of in-plane
/// halving, and window divisibility (after clamping) at every stage.
pub fn validate_geometry(
    config: &ModelConfig,
    vol_dims: (usize, usize, usize),
) -> Result<[(usize, usize, usize); STAGES]> {
    let (d, h, w) = vol_dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::Geometry("empty volume".into()));
    }
    if d % config.p != 0 || h % config.m != 0 || w % config.m != 0 {
        return Err(Error::Geometry(format!(
            "volume {d}×{h}×{w} not divisible by patch extents ({}, {}, {})",
            config.p, config.m, config.m
        )));
    }
    let mut dims = (d / config.p, h / config.m, w / config.m);
    let mut all = [(0, 0, 0); STAGES];
    for (s, slot) in all.iter_mut().enumerate() {
        let cfg = config.window().clamped(dims);
        for (extent, win) in [
            (dims.0, cfg.window.0),
            (dims.1, cfg.window.1),
            (dims.2, cfg.window.2),
        ] {
            if extent % win != 0 {
                return Err(Error::Geometry(format!(
                    "stage {s} grid {dims:?} not divisible by window {:?}",
                    cfg.window
                )));
            }
        }
        *slot = dims;
        if s + 1 < STAGES {
            if dims.1 % 2 != 0 || dims.2 % 2 != 0 {
                return Err(Error::Geometry(format!(
                    "stage {s} grid {dims:?} cannot be merged in-plane (odd extent)"
                )));
            }
            dims = (dims.0, dims.1 / 2, dims.2 / 2);
        }
    }
    Ok(all)
}

/// Full forward pass returning per-voxel logits `[D, H, W, K]` and the
/// geometry trace.
pub fn forward_traced(volume: &Tensor, params: &VTUNetParams) -> Result<(Tensor, ForwardTrace)> {
    let config = &params.config;
    let vol_dims = match volume.shape() {
        [d, h, w, cin] if *cin == config.in_channels => (*d, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: other.to_vec(),
                rhs: vec![0, 0, 0, config.in_channels],
            })
        }
    };
    let stage_dims = validate_geometry(config, vol_dims)?;
    let cfg = config.window();

    // Embedding.
    let patches = patch_partition(volume, config.p, config.m)?;
    let mut grid = linear_embedding(&patches, &params.embed_w, &params.embed_b)?;

    // Encoder: run each stage's blocks, exporting K/V from the last block,
    // then merge in-plane (except after the bottleneck).
    let mut exports: Vec<(KvPair, KvPair)> = Vec::with_capacity(STAGES - 1);
    for (s, stage) in params.enc.iter().enumerate() {
        debug_assert_eq!(grid.dims, stage_dims[s]);
        let last = stage.blocks.len() - 1;
        for (b, blk) in stage.blocks.iter().enumerate() {
            if b == last {
                let (out, kv_reg, kv_shf) = vt_encoder_block_exporting(&grid, blk, cfg)?;
                grid = out;
                if s + 1 < STAGES {
                    exports.push((kv_reg, kv_shf));
                }
            } else {
                let (out, _, _) = vt_encoder_block_exporting(&grid, blk, cfg)?;
                grid = out;
            }
        }
        if let Some(mw) = &stage.merge {
            grid = patch_merging(&grid, mw)?;
        }
    }

    // Decoder: expand, then run this stage's blocks against the encoder's
    // exported K/V (criss-cross pairing handled inside the block).
    let mut decoder_dims = [(0, 0, 0); STAGES - 1];
    for (i, stage) in params.dec.iter().enumerate() {
        let s = STAGES - 2 - i;
        grid = patch_expanding(&grid, (1, 2, 2), &stage.expand)?;
        decoder_dims[i] = grid.dims;
        let (kv_reg, kv_shf) = &exports[s];
        for blk in &stage.blocks {
            grid = vt_decoder_block(&grid, blk, cfg, kv_reg, kv_shf, config.alpha)?;
        }
    }

    // Final expansion back to voxel resolution, then classify.
    grid = patch_expanding(&grid, (config.p, config.m, config.m), &params.final_expand)?;
    let logits = classifier_head(&grid, &params.head_w, &params.head_b)?;

    let trace = ForwardTrace {
        stage_dims,
        stage_channels: std::array::from_fn(|s| config.stage_channels(s)),
        decoder_dims,
    };
    Ok((logits, trace))
}

/// Full forward pass: per-voxel logits `[D, H, W, K]`.
pub fn forward(volume: &Tensor, params: &VTUNetParams) -> Result<Tensor> {
    Ok(forward_traced(volume, params)?.0)
}

// ── loss ───────────────────────────────────────────────────────────────────

fn one_hot(labels: &LabelVolume, k: usize) -> Result<Tensor> {
    let n = labels.voxels();
    let mut data = vec![0.0; n * k];
    for (i, &l) in labels.labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(Error::IndexOutOfRange {
                op: "one_hot",
                index: l,
                rows: k,
            });
        }
        data[i * k + l] = 1.0;
    }
    Tensor::from_vec(data, &[n, k])
}

fn flatten_logits(logits: &Tensor, labels: &LabelVolume) -> Result<(Tensor, usize)> {
    let shape = logits.shape();
    if shape.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: shape.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let k = shape[shape.len() - 1];
    let n: usize = shape[..shape.len() - 1].iter().product();
    if n != labels.voxels() || k == 0 {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: vec![n, k],
            rhs: vec![labels.voxels(), k.max(1)],
        });
    }
    Ok((logits.reshape(&[n, k])?, k))
}

/// Soft-Dice loss: `1 − mean_k (2·Σpₖtₖ + ε)/(Σpₖ + Σtₖ + ε)` over softmax
/// probabilities, smoothing ε = 1e-5, averaged over all K classes.
pub fn dice_loss(logits: &Tensor, labels: &LabelVolume) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (flat, k) = flatten_logits(logits, labels)?;
    let t = one_hot(labels, k)?;
    let p = flat.softmax_last()?;
    let inter = p.mul(&t)?.sum_axis0()?;
    let denom = p.sum_axis0()?.add(&t.sum_axis0()?)?;
    let dice = inter
        .scale(2.0)?
        .add_scalar(EPS)?
        .div(&denom.add_scalar(EPS)?)?;
    dice.mean_all()?.scale(-1.0)?.add_scalar(1.0)
}

/// Voxel-wise cross-entropy under a softmax, averaged over voxels.
pub fn ce_loss(logits: &Tensor, labels: &LabelVolume) -> Result<Tensor> {
    let (flat, k) = flatten_logits(logits, labels)?;
    let t = one_hot(labels, k)?;
    let max = flat.max_last_detached()?;
    let shifted = flat.sub(&max)?;
    let lse = shifted.exp()?.sum_last()?.log()?.add(&max)?;
    let picked = flat.mul(&t)?.sum_last()?;
    lse.sub(&picked)?.mean_all()
}

/// The training objective: the mean of the soft-Dice and cross-entropy
/// terms.
pub fn dice_ce_loss(logits: &Tensor, labels: &LabelVolume) -> Result<Tensor> {
    dice_loss(logits, labels)?
        .add(&ce_loss(logits, labels)?)?
        .scale(0.5)
}

/// Per-voxel argmax class labels from `[.., K]` logits.
pub fn predict_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let shape = logits.shape();
    let k = *shape.last().ok_or(Error::ShapeMismatch {
        op: "predict_labels",
        lhs: vec![],
        rhs: vec![0, 0],
    })?;
    if k == 0 || k > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("class count {k} not supported")));
    }
    Ok(logits
        .argmax_last()?
        .into_iter()
        .map(|c| c as u8)
        .collect())
}
