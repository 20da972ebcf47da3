//! Synthetic k-space acquisition artefacts: motion, ghosting, and spike
//! (herringbone) corruption of MRI volumes, plus the small radix-2 FFT
//! engine they run on.
//!
//! All three constructions keep the spectrum Hermitian, so outputs stay
//! real; at intensity zero each returns its input unchanged, bit for bit.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── complex volumes and the FFT ────────────────────────────────────────────

/// A 3D complex lattice stored as interleaved (re, im) pairs in
/// depth-major row-major order.
#[derive(Clone, Debug)]
pub struct ComplexVolume {
    pub dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl ComplexVolume {
    pub fn from_real(dims: (usize, usize, usize), values: &[f64]) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if values.len() != n {
            return Err(Error::ShapeMismatch {
                op: "complex_volume",
                lhs: vec![values.len()],
                rhs: vec![n],
            });
        }
        let mut data = vec![0.0; 2 * n];
        for (i, &v) in values.iter().enumerate() {
            data[2 * i] = v;
        }
        Ok(ComplexVolume { dims, data })
    }

    pub fn voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn re(&self, i: usize) -> f64 {
        self.data[2 * i]
    }

    pub fn im(&self, i: usize) -> f64 {
        self.data[2 * i + 1]
    }

    pub fn scale_at(&mut self, i: usize, factor: f64) {
        self.data[2 * i] *= factor;
        self.data[2 * i + 1] *= factor;
    }

    pub fn mul_at(&mut self, i: usize, re: f64, im: f64) {
        let (a, b) = (self.data[2 * i], self.data[2 * i + 1]);
        self.data[2 * i] = a * re - b * im;
        self.data[2 * i + 1] = a * im + b * re;
    }

    pub fn add_at(&mut self, i: usize, re: f64, im: f64) {
        self.data[2 * i] += re;
        self.data[2 * i + 1] += im;
    }

    /// L2 norm over all complex entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Extracts the real parts, verifying the imaginary residual is
    /// negligible relative to the real signal — a violated Hermitian
    /// symmetry shows up here rather than as silent corruption.
    pub fn into_real(self) -> Result<Vec<f64>> {
        let mut linf = 0.0f64;
        let mut resid = 0.0f64;
        for pair in self.data.chunks_exact(2) {
            linf = linf.max(pair[0].abs());
            resid = resid.max(pair[1].abs());
        }
        if resid > 1e-8 * (1.0 + linf) {
            return Err(Error::Numeric {
                op: "into_real",
                detail: format!("imaginary residual {resid:.3e} too large"),
            });
        }
        Ok(self.data.chunks_exact(2).map(|p| p[0]).collect())
    }
}

fn require_power_of_two(dims: (usize, usize, usize)) -> Result<()> {
    for n in [dims.0, dims.1, dims.2] {
        if n == 0 || n & (n - 1) != 0 {
            return Err(Error::Geometry(format!(
                "extents must be powers of two, got {dims:?}"
            )));
        }
    }
    Ok(())
}

/// In-place radix-2 transform of one line, orthonormal scaling (1/√n each
/// direction). Twiddles are computed per butterfly from the angle, not by
/// recurrence, to keep rounding flat across long lines.
fn fft_line(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let step = sign * TAU / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let ang = step * k as f64;
                let (wr, wi) = (ang.cos(), ang.sin());
                let (a, b) = (start + k, start + k + len / 2);
                let (tr, ti) = (re[b] * wr - im[b] * wi, re[b] * wi + im[b] * wr);
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
    let scale = 1.0 / (n as f64).sqrt();
    for v in re.iter_mut() {
        *v *= scale;
    }
    for v in im.iter_mut() {
        *v *= scale;
    }
}

fn fft_axis(vol: &mut ComplexVolume, axis: usize, inverse: bool) {
    let (d, h, w) = vol.dims;
    let n = [d, h, w][axis];
    // Elements of one line sit `stride` apart; lines tile the volume as
    // `outer` blocks of `stride` interleaved line starts.
    let stride = [h * w, w, 1][axis];
    let outer = d * h * w / (n * stride);
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for o in 0..outer {
        for i in 0..stride {
            let base = o * n * stride + i;
            for k in 0..n {
                re[k] = vol.data[2 * (base + k * stride)];
                im[k] = vol.data[2 * (base + k * stride) + 1];
            }
            fft_line(&mut re, &mut im, inverse);
            for k in 0..n {
                vol.data[2 * (base + k * stride)] = re[k];
                vol.data[2 * (base + k * stride) + 1] = im[k];
            }
        }
    }
}

fn fft3_inner(v: &ComplexVolume, inverse: bool) -> Result<ComplexVolume> {
    require_power_of_two(v.dims)?;
    let mut out = v.clone();
    for axis in 0..3 {
        fft_axis(&mut out, axis, inverse);
    }
    Ok(out)
}

/// Separable 3D discrete Fourier transform, orthonormal scaling. Extents
/// must be powers of two.
pub fn fft3(v: &ComplexVolume) -> Result<ComplexVolume> {
    fft3_inner(v, false)
}

/// Inverse of [`fft3`].
pub fn ifft3(v: &ComplexVolume) -> Result<ComplexVolume> {
    fft3_inner(v, true)
}

// ── artefact specifications ────────────────────────────────────────────────

/// Which corruption to apply, with its mechanism-specific knobs.
#[derive(Clone, Debug, PartialEq)]
pub enum ArtefactKind {
    /// Averages the spectra of rigidly translated copies of the volume.
    Motion {
        /// Number of translated copies averaged.
        movements: usize,
        /// Per-axis translation bound in voxels at intensity 1.
        max_translation: f64,
    },
    /// Attenuates every `ghosts`-th k-space plane along `axis` (DC kept),
    /// producing replicas at spatial period extent/ghosts.
    Ghosting { ghosts: usize, axis: usize },
    /// Adds conjugate-symmetric high-energy outliers at seeded k-space
    /// positions (herringbone stripes).
    Spike { spikes: usize },
}

impl ArtefactKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArtefactKind::Motion { .. } => "motion",
            ArtefactKind::Ghosting { .. } => "ghosting",
            ArtefactKind::Spike { .. } => "spike",
        }
    }
}

/// A complete, serializable corruption recipe. Intensity 0 is the identity
/// for every kind, exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtefactSpec {
    pub kind: ArtefactKind,
    pub intensity: f64,
}

impl ArtefactSpec {
    /// Spec for a kind name with that kind's default mechanism knobs.
    pub fn from_kind_name(name: &str, intensity: f64) -> Result<Self> {
        let kind = match name {
            "motion" => ArtefactKind::Motion {
                movements: 4,
                max_translation: 2.0,
            },
            "ghosting" => ArtefactKind::Ghosting { ghosts: 4, axis: 1 },
            "spike" => ArtefactKind::Spike { spikes: 1 },
            other => {
                return Err(Error::Config(format!(
                    "unknown artefact kind {other:?} (expected motion, ghosting, or spike)"
                )))
            }
        };
        let spec = ArtefactSpec { kind, intensity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity.is_finite() && self.intensity >= 0.0) {
            return Err(Error::Config(format!(
                "artefact intensity must be finite and nonnegative, got {}",
                self.intensity
            )));
        }
        match self.kind {
            ArtefactKind::Motion {
                movements,
                max_translation,
            } => {
                if movements == 0 {
                    return Err(Error::Config("motion needs at least one movement".into()));
                }
                if !(max_translation.is_finite() && max_translation >= 0.0) {
                    return Err(Error::Config(format!(
                        "max_translation must be finite and nonnegative, got {max_translation}"
                    )));
                }
            }
            ArtefactKind::Ghosting { ghosts, axis } => {
                if ghosts == 0 {
                    return Err(Error::Config("ghost stride must be at least 1".into()));
                }
                if axis > 2 {
                    return Err(Error::Config(format!("ghost axis {axis} out of range")));
                }
            }
            ArtefactKind::Spike { spikes } => {
                if spikes == 0 {
                    return Err(Error::Config("spike count must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Key/value rendering for run manifests.
    pub fn to_manifest_string(&self) -> String {
        let mut out = format!("kind={}\nintensity={}\n", self.kind.name(), self.intensity);
        match self.kind {
            ArtefactKind::Motion {
                movements,
                max_translation,
            } => {
                out.push_str(&format!(
                    "movements={movements}\nmax_translation={max_translation}\n"
                ));
            }
            ArtefactKind::Ghosting { ghosts, axis } => {
                out.push_str(&format!("ghosts={ghosts}\naxis={axis}\n"));
            }
            ArtefactKind::Spike { spikes } => {
                out.push_str(&format!("spikes={spikes}\n"));
            }
        }
        out
    }

    /// Parses the rendering of [`ArtefactSpec::to_manifest_string`].
    pub fn from_manifest_str(text: &str) -> Result<Self> {
        let mut pairs = std::collections::HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("artefact line {}: expected key=value", lineno + 1))
            })?;
            if pairs.insert(key.trim(), value.trim()).is_some() {
                return Err(Error::Config(format!("duplicate artefact key {key}")));
            }
        }
        fn get<'a>(
            pairs: &std::collections::HashMap<&str, &'a str>,
            key: &str,
        ) -> Result<&'a str> {
            pairs
                .get(key)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing artefact key {key}")))
        }
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("artefact key {key}: cannot parse {v:?}")))
        }
        let kind = match get(&pairs, "kind")? {
            "motion" => ArtefactKind::Motion {
                movements: parse("movements", get(&pairs, "movements")?)?,
                max_translation: parse("max_translation", get(&pairs, "max_translation")?)?,
            },
            "ghosting" => ArtefactKind::Ghosting {
                ghosts: parse("ghosts", get(&pairs, "ghosts")?)?,
                axis: parse("axis", get(&pairs, "axis")?)?,
            },
            "spike" => ArtefactKind::Spike {
                spikes: parse("spikes", get(&pairs, "spikes")?)?,
            },
            other => {
                return Err(Error::Config(format!("unknown artefact kind {other:?}")));
            }
        };
        let spec = ArtefactSpec {
            kind,
            intensity: parse("intensity", get(&pairs, "intensity")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ── application ────────────────────────────────────────────────────────────

/// Splits a `[D, H, W]` or `[D, H, W, C]` tensor into channels, passes each
/// through `f`, and reassembles. Multi-channel volumes share one artefact
/// realization (the same translations/spike positions hit every modality).
fn per_channel(
    vol: &Tensor,
    f: impl Fn(&[f64], (usize, usize, usize)) -> Result<Vec<f64>>,
) -> Result<Tensor> {
    match *vol.shape() {
        [d, h, w] => {
            let out = f(vol.data(), (d, h, w))?;
            Tensor::from_vec(out, &[d, h, w])
        }
        [d, h, w, c] => {
            let n = d * h * w;
            let data = vol.data();
            let mut out = vec![0.0; n * c];
            for ch in 0..c {
                let plane: Vec<f64> = (0..n).map(|i| data[i * c + ch]).collect();
                let corrupted = f(&plane, (d, h, w))?;
                for (i, v) in corrupted.into_iter().enumerate() {
                    out[i * c + ch] = v;
                }
            }
            Tensor::from_vec(out, &[d, h, w, c])
        }
        _ => Err(Error::ShapeMismatch {
            op: "artefact",
            lhs: vol.shape().to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

/// Per-axis spectral factor for a rigid translation by `t` voxels: a phase
/// ramp over signed frequencies. The Nyquist bin takes the real factor
/// cos(πt) so the ramp stays Hermitian and the output real.
fn translation_ramp(n: usize, t: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            if 2 * k == n {
                ((PI * t).cos(), 0.0)
            } else {
                let ks = if k <= n / 2 {
                    k as f64
                } else {
                    k as f64 - n as f64
                };
                let ang = -TAU * ks * t / n as f64;
                (ang.cos(), ang.sin())
            }
        })
        .collect()
}

/// Motion corruption: the k-space average of `movements` rigidly translated
/// copies of the volume (translations drawn from `seed`, scaled by
/// `intensity · max_translation`), returned to image space. The DC bin is
/// untouched, so the spatial mean survives.
pub fn add_motion(
    vol: &Tensor,
    movements: usize,
    max_translation: f64,
    intensity: f64,
    seed: u64,
) -> Result<Tensor> {
    ArtefactSpec {
        kind: ArtefactKind::Motion {
            movements,
            max_translation,
        },
        intensity,
    }
    .validate()?;
    if intensity == 0.0 {
        return Ok(vol.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<[f64; 3]> = (0..movements)
        .map(|_| {
            std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * max_translation * intensity)
        })
        .collect();
    per_channel(vol, |plane, dims| {
        let spectrum = fft3(&ComplexVolume::from_real(dims, plane)?)?;
        // Averaging translated copies multiplies the one shared spectrum by
        // the mean of the per-copy phase ramps.
        let ramps: Vec<[Vec<(f64, f64)>; 3]> = shifts
            .iter()
            .map(|t| {
                [
                    translation_ramp(dims.0, t[0]),
                    translation_ramp(dims.1, t[1]),
                    translation_ramp(dims.2, t[2]),
                ]
            })
            .collect();
        let mut out = spectrum;
        let mut i = 0;
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    let (mut ar, mut ai) = (0.0, 0.0);
                    for ramp in &ramps {
                        let (zr, zi) = ramp[0][z];
                        let (yr, yi) = ramp[1][y];
                        let (xr, xi) = ramp[2][x];
                        let (pr, pi) = (zr * yr - zi * yi, zr * yi + zi * yr);
                        ar += pr * xr - pi * xi;
                        ai += pr * xi + pi * xr;
                    }
                    let inv = 1.0 / movements as f64;
                    out.mul_at(i, ar * inv, ai * inv);
                    i += 1;
                }
            }
        }
        ifft3(&out)?.into_real()
    })
}

/// Ghosting corruption: every `ghosts`-th k-space plane along `axis`
/// (excluding DC) is attenuated by `1 − intensity`, which folds periodic
/// replicas into the image at spatial period extent/ghosts.
pub fn add_ghosting(vol: &Tensor, ghosts: usize, axis: usize, intensity: f64) -> Result<Tensor> {
    ArtefactSpec {
        kind: ArtefactKind::Ghosting { ghosts, axis },
        intensity,
    }
    .validate()?;
    if intensity == 0.0 {
        return Ok(vol.clone());
    }
    per_channel(vol, |plane, dims| {
        let extent = [dims.0, dims.1, dims.2][axis];
        // Conjugate bins pair k with extent−k; the attenuated set is closed
        // under that pairing only when the stride divides the extent.
        if extent % ghosts != 0 {
            return Err(Error::Geometry(format!(
                "ghost stride {ghosts} must divide extent {extent} along axis {axis}"
            )));
        }
        let mut spectrum = fft3(&ComplexVolume::from_real(dims, plane)?)?;
        let factor = 1.0 - intensity;
        let mut i = 0;
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    let k = [z, y, x][axis];
                    if k != 0 && k % ghosts == 0 {
                        spectrum.scale_at(i, factor);
                    }
                    i += 1;
                }
            }
        }
        ifft3(&spectrum)?.into_real()
    })
}

fn mirror(k: (usize, usize, usize), dims: (usize, usize, usize)) -> (usize, usize, usize) {
    (
        (dims.0 - k.0) % dims.0,
        (dims.1 - k.1) % dims.1,
        (dims.2 - k.2) % dims.2,
    )
}

/// Spike (herringbone) corruption: `spikes` conjugate-symmetric outlier
/// pairs of magnitude `intensity · ‖spectrum‖` are added at seeded non-DC,
/// non-self-conjugate k-space positions.
pub fn add_spike(vol: &Tensor, spikes: usize, intensity: f64, seed: u64) -> Result<Tensor> {
    ArtefactSpec {
        kind: ArtefactKind::Spike { spikes },
        intensity,
    }
    .validate()?;
    if intensity == 0.0 {
        return Ok(vol.clone());
    }
    let dims = match *vol.shape() {
        [d, h, w] | [d, h, w, _] => (d, h, w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "add_spike",
                lhs: vol.shape().to_vec(),
                rhs: vec![0, 0, 0],
            })
        }
    };
    require_power_of_two(dims)?;
    if dims.0.max(dims.1).max(dims.2) <= 2 {
        return Err(Error::Geometry(format!(
            "volume {dims:?} has no non-self-conjugate k-space positions for spikes"
        )));
    }
    // One realization shared by all channels: positions avoid DC,
    // self-conjugate bins, and previously placed pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut draws: Vec<((usize, usize, usize), f64)> = Vec::new();
    for _ in 0..spikes {
        let pos = loop {
            let cand = (
                rng.gen_range(0..dims.0),
                rng.gen_range(0..dims.1),
                rng.gen_range(0..dims.2),
            );
            let m = mirror(cand, dims);
            if m == cand || placed.contains(&cand) || placed.contains(&m) {
                continue;
            }
            break cand;
        };
        placed.push(pos);
        draws.push((pos, rng.gen_range(0.0..TAU)));
    }
    per_channel(vol, |plane, dims| {
        let mut spectrum = fft3(&ComplexVolume::from_real(dims, plane)?)?;
        let mag = intensity * spectrum.norm();
        for &(pos, phase) in &draws {
            let idx = (pos.0 * dims.1 + pos.1) * dims.2 + pos.2;
            let m = mirror(pos, dims);
            let midx = (m.0 * dims.1 + m.1) * dims.2 + m.2;
            let (re, im) = (mag * phase.cos(), mag * phase.sin());
            spectrum.add_at(idx, re, im);
            spectrum.add_at(midx, re, -im);
        }
        ifft3(&spectrum)?.into_real()
    })
}

/// Dispatches to the artefact named by `spec`. `seed` drives the motion
/// translations and spike placement; ghosting is fully deterministic.
pub fn apply_artefact(vol: &Tensor, spec: &ArtefactSpec, seed: u64) -> Result<Tensor> {
    match spec.kind {
        ArtefactKind::Motion {
            movements,
            max_translation,
        } => add_motion(vol, movements, max_translation, spec.intensity, seed),
        ArtefactKind::Ghosting { ghosts, axis } => {
            add_ghosting(vol, ghosts, axis, spec.intensity)
        }
        ArtefactKind::Spike { spikes } => add_spike(vol, spikes, spec.intensity, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_volume(seed: u64, dims: (usize, usize, usize)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, &[dims.0, dims.1, dims.2]).unwrap()
    }

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        let n = a.numel() as f64;
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n
    }

    /// O(N²) reference transform, orthonormal scaling.
    fn naive_dft(v: &ComplexVolume, inverse: bool) -> ComplexVolume {
        let (d, h, w) = v.dims;
        let n = v.voxels();
        let sign = if inverse { 1.0 } else { -1.0 };
        let scale = 1.0 / (n as f64).sqrt();
        let mut out = ComplexVolume::from_real(v.dims, &vec![0.0; n]).unwrap();
        let mut q = 0;
        for qz in 0..d {
            for qy in 0..h {
                for qx in 0..w {
                    let (mut ar, mut ai) = (0.0, 0.0);
                    let mut i = 0;
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                let ang = sign
                                    * TAU
                                    * ((qz * z) as f64 / d as f64
                                        + (qy * y) as f64 / h as f64
                                        + (qx * x) as f64 / w as f64);
                                let (c, s) = (ang.cos(), ang.sin());
                                ar += v.re(i) * c - v.im(i) * s;
                                ai += v.re(i) * s + v.im(i) * c;
                                i += 1;
                            }
                        }
                    }
                    out.data[2 * q] = ar * scale;
                    out.data[2 * q + 1] = ai * scale;
                    q += 1;
                }
            }
        }
        out
    }

    #[test]
    fn fft_round_trip_recovers_input() {
        let vol = rand_volume(1, (8, 4, 2));
        let cv = ComplexVolume::from_real((8, 4, 2), vol.data()).unwrap();
        let back = ifft3(&fft3(&cv).unwrap()).unwrap();
        let norm: f64 = vol.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, &want) in vol.data().iter().enumerate() {
            assert!((back.re(i) - want).abs() < 1e-6 * norm.max(1.0));
            assert!(back.im(i).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_impulse_spreads_to_a_flat_spectrum() {
        let dims = (4, 4, 4);
        let mut data = vec![0.0; 64];
        data[0] = 1.0;
        let spec = fft3(&ComplexVolume::from_real(dims, &data).unwrap()).unwrap();
        let want = 1.0 / 8.0; // 1/√64
        for i in 0..64 {
            let mag = (spec.re(i) * spec.re(i) + spec.im(i) * spec.im(i)).sqrt();
            assert!((mag - want).abs() < 1e-12, "bin {i} magnitude {mag}");
        }
    }

    #[test]
    fn fft_matches_the_naive_dft_oracle() {
        for (seed, dims) in [(2u64, (8usize, 8usize, 8usize)), (3, (4, 8, 2))] {
            let vol = rand_volume(seed, dims);
            let cv = ComplexVolume::from_real(dims, vol.data()).unwrap();
            for inverse in [false, true] {
                let fast = fft3_inner(&cv, inverse).unwrap();
                let slow = naive_dft(&cv, inverse);
                for i in 0..cv.voxels() {
                    assert!((fast.re(i) - slow.re(i)).abs() < 1e-8);
                    assert!((fast.im(i) - slow.im(i)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn fft_preserves_energy() {
        let vol = rand_volume(4, (4, 8, 4));
        let cv = ComplexVolume::from_real((4, 8, 4), vol.data()).unwrap();
        let spec = fft3(&cv).unwrap();
        assert!((cv.norm() - spec.norm()).abs() < 1e-9);
    }

    #[test]
    fn fft_rejects_non_power_of_two_extents() {
        let cv = ComplexVolume::from_real((3, 4, 4), &vec![0.0; 48]).unwrap();
        assert_eq!(fft3(&cv).unwrap_err().category(), "geometry");
        let cv = ComplexVolume::from_real((4, 4, 6), &vec![0.0; 96]).unwrap();
        assert_eq!(ifft3(&cv).unwrap_err().category(), "geometry");
    }

    #[test]
    fn zero_intensity_is_the_exact_identity_for_all_kinds() {
        let vol = rand_volume(5, (4, 4, 8));
        for name in ["motion", "ghosting", "spike"] {
            let spec = ArtefactSpec::from_kind_name(name, 0.0).unwrap();
            let out = apply_artefact(&vol, &spec, 9).unwrap();
            assert_eq!(out.data(), vol.data(), "{name} changed the volume");
        }
    }

    #[test]
    fn motion_preserves_the_spatial_mean() {
        let vol = rand_volume(6, (8, 8, 8));
        let out = add_motion(&vol, 4, 2.0, 0.4, 11).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!((mean(&vol) - mean(&out)).abs() < 1e-6);
        assert!(mse(&vol, &out) > 1e-6, "motion did nothing");
    }

    #[test]
    fn motion_mse_grows_with_intensity() {
        let vol = rand_volume(7, (8, 8, 8));
        let sweep: Vec<f64> = [0.0, 0.15, 0.3]
            .iter()
            .map(|&i| mse(&vol, &add_motion(&vol, 4, 2.0, i, 13).unwrap()))
            .collect();
        assert_eq!(sweep[0], 0.0);
        assert!(sweep[1] > 0.0);
        assert!(sweep[1] <= sweep[2], "sweep {sweep:?} not nondecreasing");
    }

    #[test]
    fn motion_is_seed_deterministic() {
        let vol = rand_volume(8, (4, 8, 4));
        let a = add_motion(&vol, 3, 1.5, 0.5, 21).unwrap();
        let b = add_motion(&vol, 3, 1.5, 0.5, 21).unwrap();
        let c = add_motion(&vol, 3, 1.5, 0.5, 22).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn ghosting_leaves_constant_volumes_alone() {
        let vol = Tensor::full(&[4, 4, 4], 2.5).unwrap();
        let out = add_ghosting(&vol, 2, 1, 0.7).unwrap();
        for (a, b) in out.data().iter().zip(vol.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ghosting_impulse_matches_the_analytic_comb() {
        // Impulse at the origin, stride-2 attenuation along the last axis
        // of extent 8: the difference is confined to the impulse's row and
        // equals −intensity/8 · (4·[x ≡ 0 mod 4] − 1) there.
        let mut data = vec![0.0; 32];
        data[0] = 1.0;
        let vol = Tensor::from_vec(data, &[2, 2, 8]).unwrap();
        let intensity = 0.5;
        let out = add_ghosting(&vol, 2, 2, intensity).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..8 {
                    let i = (z * 2 + y) * 8 + x;
                    let diff = out.data()[i] - vol.data()[i];
                    let want = if z == 0 && y == 0 {
                        let comb = if x % 4 == 0 { 4.0 } else { 0.0 };
                        -intensity / 8.0 * (comb - 1.0)
                    } else {
                        0.0
                    };
                    assert!(
                        (diff - want).abs() < 1e-12,
                        "voxel ({z},{y},{x}): diff {diff} want {want}"
                    );
                }
            }
        }
        // The replica structure: the difference is periodic along the axis
        // with period extent/ghosts = 4.
        for x in 0..4 {
            let d0 = out.data()[x] - vol.data()[x];
            let d1 = out.data()[x + 4] - vol.data()[x + 4];
            assert!((d0 - d1).abs() < 1e-12);
        }
    }

    #[test]
    fn ghosting_validates_axis_and_stride() {
        let vol = rand_volume(9, (4, 4, 8));
        assert_eq!(
            add_ghosting(&vol, 2, 3, 0.5).unwrap_err().category(),
            "config"
        );
        assert_eq!(
            add_ghosting(&vol, 3, 2, 0.5).unwrap_err().category(),
            "geometry"
        );
        assert_eq!(
            add_ghosting(&vol, 0, 1, 0.5).unwrap_err().category(),
            "config"
        );
    }

    #[test]
    fn single_spike_difference_is_one_conjugate_bin_pair() {
        let dims = (8, 8, 8);
        let vol = rand_volume(10, dims);
        let out = add_spike(&vol, 1, 0.4, 31).unwrap();
        let diff: Vec<f64> = out
            .data()
            .iter()
            .zip(vol.data())
            .map(|(a, b)| a - b)
            .collect();
        let spec = fft3(&ComplexVolume::from_real(dims, &diff).unwrap()).unwrap();
        let mut hot = Vec::new();
        for i in 0..spec.voxels() {
            let mag = (spec.re(i) * spec.re(i) + spec.im(i) * spec.im(i)).sqrt();
            if mag > 1e-9 {
                hot.push(i);
            }
        }
        assert_eq!(hot.len(), 2, "expected one conjugate pair, got {hot:?}");
        let unflatten = |i: usize| (i / 64, (i / 8) % 8, i % 8);
        let a = unflatten(hot[0]);
        assert_eq!(mirror(a, dims), unflatten(hot[1]));
    }

    #[test]
    fn spike_difference_scales_linearly_with_intensity() {
        let vol = rand_volume(11, (8, 4, 8));
        let l2 = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let d1 = l2(&add_spike(&vol, 2, 0.2, 41).unwrap(), &vol);
        let d2 = l2(&add_spike(&vol, 2, 0.4, 41).unwrap(), &vol);
        assert!(d1 > 0.0);
        assert!((d2 / d1 - 2.0).abs() < 1e-6, "ratio {}", d2 / d1);
    }

    #[test]
    fn spike_rejects_volumes_with_no_valid_positions() {
        let vol = rand_volume(12, (2, 2, 2));
        assert_eq!(
            add_spike(&vol, 1, 0.5, 1).unwrap_err().category(),
            "geometry"
        );
    }

    #[test]
    fn artefacts_apply_per_channel_on_rank_four_volumes() {
        let dims = (4, 4, 4);
        let a = rand_volume(13, dims);
        let b = rand_volume(14, dims);
        let n = 64;
        let mut interleaved = vec![0.0; n * 2];
        for i in 0..n {
            interleaved[i * 2] = a.data()[i];
            interleaved[i * 2 + 1] = b.data()[i];
        }
        let vol4 = Tensor::from_vec(interleaved, &[4, 4, 4, 2]).unwrap();
        let spec = ArtefactSpec::from_kind_name("ghosting", 0.6).unwrap();
        let out4 = apply_artefact(&vol4, &spec, 0).unwrap();
        let out_a = apply_artefact(&a, &spec, 0).unwrap();
        let out_b = apply_artefact(&b, &spec, 0).unwrap();
        for i in 0..n {
            assert_eq!(out4.data()[i * 2], out_a.data()[i]);
            assert_eq!(out4.data()[i * 2 + 1], out_b.data()[i]);
        }
    }

    #[test]
    fn spec_serialization_round_trips() {
        let specs = [
            ArtefactSpec {
                kind: ArtefactKind::Motion {
                    movements: 5,
                    max_translation: 1.25,
                },
                intensity: 0.3,
            },
            ArtefactSpec {
                kind: ArtefactKind::Ghosting { ghosts: 8, axis: 2 },
                intensity: 1.0,
            },
            ArtefactSpec {
                kind: ArtefactKind::Spike { spikes: 3 },
                intensity: 0.05,
            },
        ];
        for spec in specs {
            let text = spec.to_manifest_string();
            assert_eq!(ArtefactSpec::from_manifest_str(&text).unwrap(), spec);
        }
        assert_eq!(
            ArtefactSpec::from_manifest_str("kind=blur\nintensity=1\n")
                .unwrap_err()
                .category(),
            "config"
        );
        assert_eq!(
            ArtefactSpec::from_kind_name("motion", -0.5)
                .unwrap_err()
                .category(),
            "config"
        );
    }

    #[test]
    fn all_kinds_produce_finite_real_output_with_monotone_mse() {
        let vol = rand_volume(15, (8, 8, 8));
        for name in ["motion", "ghosting", "spike"] {
            let mut last = -1.0;
            for intensity in [0.0, 0.25, 0.5] {
                let spec = ArtefactSpec::from_kind_name(name, intensity).unwrap();
                let out = apply_artefact(&vol, &spec, 51).unwrap();
                assert!(out.data().iter().all(|v| v.is_finite()));
                let m = mse(&vol, &out);
                assert!(
                    m >= last,
                    "{name}: mse {m} fell below {last} at intensity {intensity}"
                );
                last = m;
            }
            assert!(last > 0.0, "{name} never changed the volume");
        }
    }
}
