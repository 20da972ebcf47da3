//! On-disk formats: volumes, checkpoints, and run manifests.
//!
//! Every format here is a plain-text `key=value` manifest with (where
//! payload exists) a sibling binary blob of raw little-endian IEEE-754
//! values. The split keeps headers greppable and diffable while the payload
//! stays byte-exact: writing a file, reading it back, and writing it again
//! reproduces the original bytes, which is what makes reproducibility
//! claims checkable with `cmp` instead of tolerances.
//!
//! Three formats live here:
//!
//! * **Volume files** — a manifest describing dims/channels/precision plus a
//!   blob in depth-major row-major order, channel fastest (the same layout
//!   the model consumes). Intensity volumes carry `f64` or `f32` values;
//!   label volumes carry small integers stored as `f64`.
//! * **Checkpoints** — a manifest embedding the full model configuration,
//!   the seed, and one `tensor=name;shape;offset` line per parameter, plus a
//!   blob holding every value in canonical parameter order. Loading
//!   validates every shape against the configuration before any value is
//!   accepted.
//! * **Run manifests** — a record of a command invocation (command, seed,
//!   paths, configuration, artefact spec, tool version) sufficient to
//!   reproduce the run bit-for-bit.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::artefacts::ArtefactSpec;
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::network::{ModelConfig, VTUNetParams};
use crate::tensor::Tensor;

// ── manifest plumbing ──────────────────────────────────────────────────────

const VOLUME_FORMAT: &str = "vtunet-volume-v1";
const CHECKPOINT_FORMAT: &str = "vtunet-checkpoint-v1";
const RUN_FORMAT: &str = "vtunet-run-v1";

fn format_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses manifest text into ordered `(key, value)` pairs. Blank lines and
/// `#` comments are skipped; keys may repeat (checkpoints use repeated
/// `tensor=` lines), so deduplication is left to the caller.
fn parse_manifest_lines(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            format_error(path, format!("line {}: expected key=value", lineno + 1))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Pulls out the single value for `key`, rejecting duplicates and absences
/// with an error that names the field.
fn take_unique(path: &Path, lines: &[(String, String)], key: &str) -> Result<String> {
    let mut found = None;
    for (k, v) in lines {
        if k == key {
            if found.is_some() {
                return Err(format_error(path, format!("duplicate key {key}")));
            }
            found = Some(v.clone());
        }
    }
    found.ok_or_else(|| format_error(path, format!("missing key {key}")))
}

fn parse_field<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| format_error(path, format!("key {key}: cannot parse {value:?}")))
}

/// The blob sits next to the manifest: `<manifest-name>.blob` in the same
/// directory. The manifest records the blob's file name so the pairing is
/// explicit in the header, but the resolved path always stays a sibling.
fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".blob");
    manifest_path.with_file_name(name)
}

fn blob_file_name(manifest_path: &Path) -> String {
    blob_path(manifest_path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Validates the recorded blob name and returns the sibling path it resolves
/// to. Only plain file names are accepted — a path with separators would
/// break the sibling convention.
fn resolve_blob(path: &Path, recorded: &str) -> Result<PathBuf> {
    if recorded.is_empty() || recorded.contains('/') || recorded.contains('\\') {
        return Err(format_error(
            path,
            format!("key blob: expected a sibling file name, got {recorded:?}"),
        ));
    }
    Ok(path.with_file_name(recorded))
}

// ── value precision ────────────────────────────────────────────────────────

/// Storage precision of a volume blob. Values are always `f64` in memory;
/// `F32` narrows on write and widens on read (an exact embedding, so
/// read-then-rewrite is byte-identical).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

// ── volumes ────────────────────────────────────────────────────────────────

/// An in-memory volume: `dims` voxels × `channels` values in depth-major
/// row-major order with the channel index fastest — the exact layout of a
/// rank-4 `[D, H, W, C]` tensor, so conversion is a reshape, not a shuffle.
///
/// `labels` distinguishes segmentation outputs (small integers stored as
/// floats) from intensity data; `precision` controls only on-disk width.
#[derive(Clone, Debug)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub channels: usize,
    pub spacing: [f64; 3],
    pub labels: bool,
    pub precision: Precision,
    pub data: Vec<f64>,
}

impl Volume {
    /// An intensity volume from raw values (finite, length `D·H·W·C`).
    pub fn intensity(
        dims: (usize, usize, usize),
        channels: usize,
        spacing: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Volume> {
        let v = Volume {
            dims,
            channels,
            spacing,
            labels: false,
            precision: Precision::F64,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    /// Wraps a segmentation as a single-channel label volume.
    pub fn from_labels(labels: &LabelVolume) -> Volume {
        Volume {
            dims: labels.dims,
            channels: 1,
            spacing: labels.spacing,
            labels: true,
            precision: Precision::F64,
            data: labels.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Reinterprets a rank-3 `[D, H, W]` or rank-4 `[D, H, W, C]` tensor as
    /// an intensity volume.
    pub fn from_tensor(t: &Tensor, spacing: [f64; 3]) -> Result<Volume> {
        let (dims, channels) = match *t.shape() {
            [d, h, w] => ((d, h, w), 1),
            [d, h, w, c] => ((d, h, w), c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "volume_from_tensor",
                    lhs: t.shape().to_vec(),
                    rhs: vec![0, 0, 0, 0],
                })
            }
        };
        Volume::intensity(dims, channels, spacing, t.data().to_vec())
    }

    pub fn voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.dims;
        if d == 0 || h == 0 || w == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "volume dims {:?} x {} channels must all be nonzero",
                self.dims, self.channels
            )));
        }
        if self.data.len() != self.voxels() * self.channels {
            return Err(Error::ShapeMismatch {
                op: "volume",
                lhs: vec![self.data.len()],
                rhs: vec![self.voxels() * self.channels],
            });
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Config(format!(
                "volume spacing {:?} must be finite and positive",
                self.spacing
            )));
        }
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "volume contains non-finite value {bad}"
            )));
        }
        Ok(())
    }

    /// The volume as a `[D, H, W, C]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (d, h, w) = self.dims;
        Tensor::from_vec(self.data.clone(), &[d, h, w, self.channels])
    }

    /// Converts a label volume back into a [`LabelVolume`]. Requires the
    /// label flag, a single channel, and integral values in `0..=255`.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        if !self.labels {
            return Err(Error::Config(
                "volume is not flagged as labels (kind=intensity)".to_string(),
            ));
        }
        if self.channels != 1 {
            return Err(Error::Config(format!(
                "label volume must have 1 channel, got {}",
                self.channels
            )));
        }
        let mut labels = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Config(format!(
                    "label value {v} is not an integer in 0..=255"
                )));
            }
            labels.push(v as u8);
        }
        LabelVolume::new(self.dims, labels, self.spacing)
    }
}

fn join_usize3(v: (usize, usize, usize)) -> String {
    format!("{},{},{}", v.0, v.1, v.2)
}

fn join_f64s(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usize3(path: &Path, key: &str, value: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse_field(path, key, p.trim()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(format_error(
            path,
            format!("key {key}: expected 3 entries, got {}", parts.len()),
        )),
    }
}

fn parse_f64_3(path: &Path, key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse_field(path, key, p.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| {
        format_error(path, format!("key {key}: expected 3 entries"))
    })
}

/// Writes `volume` as a manifest at `path` plus a `<path>.blob` sibling.
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    volume.validate()?;
    let manifest = format!(
        "format={}\ndims={}\nchannels={}\nprecision={}\nendianness=little\nkind={}\nspacing={}\nblob={}\n",
        VOLUME_FORMAT,
        join_usize3(volume.dims),
        volume.channels,
        volume.precision.name(),
        if volume.labels { "labels" } else { "intensity" },
        join_f64s(&volume.spacing),
        blob_file_name(path),
    );
    let mut blob = Vec::with_capacity(volume.data.len() * volume.precision.bytes());
    match volume.precision {
        Precision::F64 => {
            for &v in &volume.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        Precision::F32 => {
            for &v in &volume.data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, manifest)?;
    fs::write(blob_path(path), blob)?;
    Ok(())
}

/// Reads a volume written by [`write_volume`], validating every header field
/// and the blob length. `f32` blobs widen to `f64` in memory (exactly), so a
/// read–rewrite cycle reproduces the original bytes.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(path)?;
    let lines = parse_manifest_lines(path, &text)?;
    for (key, _) in &lines {
        const KNOWN: [&str; 8] = [
            "format", "dims", "channels", "precision", "endianness", "kind", "spacing", "blob",
        ];
        if !KNOWN.contains(&key.as_str()) {
            return Err(format_error(path, format!("unknown key {key}")));
        }
    }
    let format = take_unique(path, &lines, "format")?;
    if format != VOLUME_FORMAT {
        return Err(format_error(
            path,
            format!("key format: expected {VOLUME_FORMAT}, got {format}"),
        ));
    }
    let endianness = take_unique(path, &lines, "endianness")?;
    if endianness != "little" {
        return Err(format_error(
            path,
            format!("key endianness: only little is supported, got {endianness}"),
        ));
    }
    let dims = parse_usize3(path, "dims", &take_unique(path, &lines, "dims")?)?;
    let channels: usize = parse_field(path, "channels", &take_unique(path, &lines, "channels")?)?;
    let precision_text = take_unique(path, &lines, "precision")?;
    let precision = Precision::parse(&precision_text).ok_or_else(|| {
        format_error(
            path,
            format!("key precision: expected f32 or f64, got {precision_text}"),
        )
    })?;
    let kind = take_unique(path, &lines, "kind")?;
    let labels = match kind.as_str() {
        "labels" => true,
        "intensity" => false,
        other => {
            return Err(format_error(
                path,
                format!("key kind: expected intensity or labels, got {other}"),
            ))
        }
    };
    let spacing = parse_f64_3(path, "spacing", &take_unique(path, &lines, "spacing")?)?;
    let blob_file = resolve_blob(path, &take_unique(path, &lines, "blob")?)?;

    let blob = fs::read(&blob_file)?;
    let expected = dims.0 * dims.1 * dims.2 * channels * precision.bytes();
    if blob.len() != expected {
        return Err(format_error(
            path,
            format!(
                "blob length {} does not match dims {:?} x {} channels ({} bytes expected)",
                blob.len(),
                dims,
                channels,
                expected
            ),
        ));
    }
    let data: Vec<f64> = match precision {
        Precision::F64 => blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Precision::F32 => blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let volume = Volume {
        dims,
        channels,
        spacing,
        labels,
        precision,
        data,
    };
    volume
        .validate()
        .map_err(|e| format_error(path, e.to_string()))?;
    Ok(volume)
}

// ── checkpoints ────────────────────────────────────────────────────────────

/// Writes the full parameter set plus its configuration and seed. The
/// manifest lists every tensor as `tensor=name;shape;offset` (offset counted
/// in values from the start of the blob) in canonical parameter order; the
/// blob holds the concatenated values as little-endian `f64`.
pub fn write_checkpoint(path: &Path, params: &VTUNetParams, seed: u64) -> Result<()> {
    let named = params.named_tensors();
    let mut manifest = format!(
        "format={}\nseed={}\nendianness=little\nprecision=f64\n{}blob={}\n",
        CHECKPOINT_FORMAT,
        seed,
        params.config.to_manifest_string(),
        blob_file_name(path),
    );
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in &named {
        let shape = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        manifest.push_str(&format!("tensor={name};{shape};{offset}\n"));
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.data().len();
    }
    fs::write(path, manifest)?;
    fs::write(blob_path(path), blob)?;
    Ok(())
}

/// Loads a checkpoint written by [`write_checkpoint`], returning the
/// parameters and the recorded seed. Every tensor's shape is validated
/// against what the embedded configuration demands; missing, surplus,
/// duplicated, or misshapen entries are format errors naming the tensor.
pub fn read_checkpoint(path: &Path) -> Result<(VTUNetParams, u64)> {
    let text = fs::read_to_string(path)?;
    let lines = parse_manifest_lines(path, &text)?;

    let format = take_unique(path, &lines, "format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(format_error(
            path,
            format!("key format: expected {CHECKPOINT_FORMAT}, got {format}"),
        ));
    }
    let endianness = take_unique(path, &lines, "endianness")?;
    if endianness != "little" {
        return Err(format_error(
            path,
            format!("key endianness: only little is supported, got {endianness}"),
        ));
    }
    let precision = take_unique(path, &lines, "precision")?;
    if precision != "f64" {
        return Err(format_error(
            path,
            format!("key precision: checkpoints are f64, got {precision}"),
        ));
    }
    let seed: u64 = parse_field(path, "seed", &take_unique(path, &lines, "seed")?)?;

    // The configuration is embedded as ordinary config keys among the
    // checkpoint's own; extract that subset and feed it to the config parser.
    let config_text: String = lines
        .iter()
        .filter(|(k, _)| ModelConfig::MANIFEST_KEYS.contains(&k.as_str()))
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let config = ModelConfig::from_manifest_str(&config_text)
        .map_err(|e| format_error(path, e.to_string()))?;

    let blob_file = resolve_blob(path, &take_unique(path, &lines, "blob")?)?;

    // Collect tensor entries: name -> (shape, value offset).
    let mut entries: HashMap<String, (Vec<usize>, usize)> = HashMap::new();
    let mut declared_values = 0usize;
    for (key, value) in &lines {
        if key != "tensor" {
            continue;
        }
        let mut parts = value.split(';');
        let (name, shape_text, offset_text) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(s), Some(o), None) => (n, s, o),
            _ => {
                return Err(format_error(
                    path,
                    format!("tensor entry {value:?}: expected name;shape;offset"),
                ))
            }
        };
        let shape: Vec<usize> = shape_text
            .split(',')
            .map(|p| parse_field(path, "tensor shape", p.trim()))
            .collect::<Result<_>>()?;
        let offset: usize = parse_field(path, "tensor offset", offset_text.trim())?;
        declared_values += shape.iter().product::<usize>();
        if entries.insert(name.to_string(), (shape, offset)).is_some() {
            return Err(format_error(path, format!("duplicate tensor {name}")));
        }
    }

    let blob = fs::read(&blob_file)?;
    if blob.len() != declared_values * 8 {
        return Err(format_error(
            path,
            format!(
                "blob length {} does not match {} declared values ({} bytes expected)",
                blob.len(),
                declared_values,
                declared_values * 8
            ),
        ));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let params = VTUNetParams::from_fetch(&config, |name, shape, _| {
        let (recorded_shape, offset) = entries
            .remove(name)
            .ok_or_else(|| format_error(path, format!("missing tensor {name}")))?;
        if recorded_shape != shape {
            return Err(format_error(
                path,
                format!(
                    "tensor {name}: recorded shape {recorded_shape:?} does not match configured shape {shape:?}"
                ),
            ));
        }
        let numel: usize = shape.iter().product();
        let end = offset.checked_add(numel).filter(|&e| e <= values.len());
        let end = end.ok_or_else(|| {
            format_error(
                path,
                format!("tensor {name}: offset {offset} + {numel} values exceeds blob"),
            )
        })?;
        Tensor::from_vec(values[offset..end].to_vec(), shape)
    })?;
    if let Some(name) = entries.keys().next() {
        return Err(format_error(
            path,
            format!("unexpected tensor {name} not part of this configuration"),
        ));
    }
    Ok((params, seed))
}

// ── run manifests ──────────────────────────────────────────────────────────

/// A record of one command invocation: what ran, with which seed, over which
/// files, under which configuration and artefact spec. Written next to every
/// command's output so a run can be reproduced bit-for-bit from the manifest
/// alone.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Option<ModelConfig>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub artefact: Option<ArtefactSpec>,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed,
            ..RunManifest::default()
        }
    }

    /// Deterministic `key=value` rendering. Config keys are prefixed
    /// `config.`, artefact keys `artefact.`, paths `input.`/`output.`.
    pub fn to_manifest_string(&self) -> String {
        let mut out = format!(
            "format={}\nversion={}\ncommand={}\nseed={}\n",
            RUN_FORMAT,
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.seed,
        );
        for (name, p) in &self.inputs {
            out.push_str(&format!("input.{name}={}\n", p.display()));
        }
        for (name, p) in &self.outputs {
            out.push_str(&format!("output.{name}={}\n", p.display()));
        }
        if let Some(config) = &self.config {
            for line in config.to_manifest_string().lines() {
                out.push_str(&format!("config.{line}\n"));
            }
        }
        if let Some(spec) = &self.artefact {
            for line in spec.to_manifest_string().lines() {
                out.push_str(&format!("artefact.{line}\n"));
            }
        }
        for (key, value) in &self.extra {
            out.push_str(&format!("{key}={value}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artefacts::ArtefactKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_io_config() -> ModelConfig {
        ModelConfig {
            c: 6,
            p: 2,
            m: 2,
            k: 2,
            in_channels: 1,
            depths: [1, 1, 1, 1],
            heads: [2, 2, 4, 4],
            mlp_ratio: 2.0,
            alpha: 0.5,
            fpe_enabled: true,
            dense_bias: false,
        }
    }

    fn random_volume(seed: u64, labels: bool) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = (3usize, 4usize, 5usize);
        let channels = 2usize;
        let n = dims.0 * dims.1 * dims.2 * channels;
        let data: Vec<f64> = if labels {
            (0..n).map(|_| rng.gen_range(0..4) as f64).collect()
        } else {
            (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
        };
        Volume {
            dims,
            channels,
            spacing: [1.0, 0.5, 0.5],
            labels: false,
            precision: Precision::F64,
            data,
        }
    }

    fn category(err: &Error) -> &'static str {
        err.category()
    }

    /// `unwrap_err` without the `Debug` bound on the success type.
    fn expect_err<T>(r: Result<T>) -> Error {
        r.err().expect("expected an error")
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.vol");
        let vol = random_volume(11, false);
        write_volume(&path, &vol).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.channels, vol.channels);
        assert_eq!(back.spacing, vol.spacing);
        assert_eq!(back.labels, vol.labels);
        assert_eq!(back.precision, Precision::F64);
        let bits = |v: &Volume| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&vol));
    }

    #[test]
    fn volume_read_then_rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.vol");
        write_volume(&path, &random_volume(7, false)).unwrap();
        let manifest1 = fs::read(&path).unwrap();
        let blob1 = fs::read(blob_path(&path)).unwrap();
        let back = read_volume(&path).unwrap();
        write_volume(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), manifest1);
        assert_eq!(fs::read(blob_path(&path)).unwrap(), blob1);
    }

    #[test]
    fn f32_volumes_widen_exactly_and_rewrite_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("narrow.vol");
        let mut vol = random_volume(3, false);
        vol.precision = Precision::F32;
        write_volume(&path, &vol).unwrap();
        let blob1 = fs::read(blob_path(&path)).unwrap();
        assert_eq!(blob1.len(), vol.data.len() * 4);

        let back = read_volume(&path).unwrap();
        assert_eq!(back.precision, Precision::F32);
        // Widening is exact: the in-memory value is the f32 the file stores.
        for (orig, wide) in vol.data.iter().zip(&back.data) {
            assert_eq!((*orig as f32) as f64, *wide);
        }
        write_volume(&path, &back).unwrap();
        assert_eq!(fs::read(blob_path(&path)).unwrap(), blob1);
    }

    #[test]
    fn tampered_blob_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.vol");
        write_volume(&path, &random_volume(5, false)).unwrap();
        let mut blob = fs::read(blob_path(&path)).unwrap();
        blob.truncate(blob.len() - 8);
        fs::write(blob_path(&path), blob).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert_eq!(category(&err), "format");
        assert!(err.to_string().contains("blob length"), "{err}");
    }

    #[test]
    fn malformed_volume_manifest_names_the_offending_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.vol");
        write_volume(&path, &random_volume(9, false)).unwrap();
        let original = fs::read_to_string(&path).unwrap();

        let cases = [
            ("channels=2", "channels=husky", "channels"),
            ("endianness=little", "endianness=big", "endianness"),
            ("spacing=1,0.5,0.5", "", "spacing"),
            ("kind=intensity", "kind=velocity", "kind"),
            ("precision=f64", "precision=f16", "precision"),
            ("dims=3,4,5", "dims=3,4", "dims"),
        ];
        for (needle, replacement, field) in cases {
            assert!(original.contains(needle), "fixture drifted: {needle}");
            let mangled = original.replace(needle, replacement);
            fs::write(&path, mangled).unwrap();
            let err = read_volume(&path).unwrap_err();
            assert_eq!(category(&err), "format", "field {field}: {err}");
            assert!(err.to_string().contains(field), "field {field}: {err}");
        }

        // Unknown keys are rejected too, by name.
        fs::write(&path, format!("{original}gamma=1\n")).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn label_volume_survives_the_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.vol");
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = (4usize, 3usize, 3usize);
        let labels: Vec<u8> = (0..36).map(|_| rng.gen_range(0..4)).collect();
        let lv = LabelVolume::new(dims, labels.clone(), [1.0, 1.0, 2.0]).unwrap();

        write_volume(&path, &Volume::from_labels(&lv)).unwrap();
        let back = read_volume(&path).unwrap().to_labels().unwrap();
        assert_eq!(back.dims, dims);
        assert_eq!(back.labels, labels);
        assert_eq!(back.spacing, [1.0, 1.0, 2.0]);
    }

    #[test]
    fn non_integral_labels_are_rejected() {
        let vol = Volume {
            labels: true,
            channels: 1,
            dims: (1, 1, 2),
            spacing: [1.0; 3],
            precision: Precision::F64,
            data: vec![1.0, 0.5],
        };
        let err = vol.to_labels().unwrap_err();
        assert!(err.to_string().contains("0.5"), "{err}");

        let intensity = random_volume(2, false);
        assert!(intensity.to_labels().is_err());
    }

    #[test]
    fn volume_rejects_non_finite_data_and_bad_spacing() {
        assert!(Volume::intensity((1, 1, 1), 1, [1.0; 3], vec![f64::NAN]).is_err());
        assert!(Volume::intensity((1, 1, 1), 1, [0.0, 1.0, 1.0], vec![1.0]).is_err());
        assert!(Volume::intensity((1, 1, 2), 1, [1.0; 3], vec![1.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_everything_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = tiny_io_config();
        let params = VTUNetParams::init_seeded(&config, 4242).unwrap();
        write_checkpoint(&path, &params, 4242).unwrap();

        let (loaded, seed) = read_checkpoint(&path).unwrap();
        assert_eq!(seed, 4242);
        assert_eq!(loaded.config, config);
        let a = params.named_tensors();
        let b = loaded.named_tensors();
        assert_eq!(a.len(), b.len());
        for ((name_a, t_a), (name_b, t_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(t_a.shape(), t_b.shape(), "{name_a}");
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t_a), bits(t_b), "{name_a}");
        }
    }

    #[test]
    fn checkpoint_load_then_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = VTUNetParams::init_seeded(&tiny_io_config(), 1).unwrap();
        write_checkpoint(&path, &params, 1).unwrap();
        let manifest1 = fs::read(&path).unwrap();
        let blob1 = fs::read(blob_path(&path)).unwrap();

        let (loaded, seed) = read_checkpoint(&path).unwrap();
        write_checkpoint(&path, &loaded, seed).unwrap();
        assert_eq!(fs::read(&path).unwrap(), manifest1);
        assert_eq!(fs::read(blob_path(&path)).unwrap(), blob1);
    }

    #[test]
    fn checkpoint_blob_value_count_equals_param_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = tiny_io_config();
        let params = VTUNetParams::init_seeded(&config, 9).unwrap();
        write_checkpoint(&path, &params, 9).unwrap();
        let blob = fs::read(blob_path(&path)).unwrap();
        assert_eq!(blob.len(), 8 * VTUNetParams::count(&config).unwrap());
    }

    #[test]
    fn checkpoint_shape_tamper_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = VTUNetParams::init_seeded(&tiny_io_config(), 2).unwrap();
        write_checkpoint(&path, &params, 2).unwrap();
        let original = fs::read_to_string(&path).unwrap();

        // Transposed shape on the embedding weight: the value count is
        // unchanged, so only the shape check can catch it.
        let mangled = original.replace("tensor=embed.w;8,6;0", "tensor=embed.w;6,8;0");
        assert_ne!(mangled, original, "fixture drifted");
        fs::write(&path, &mangled).unwrap();
        let err = expect_err(read_checkpoint(&path));
        assert_eq!(category(&err), "format");
        assert!(err.to_string().contains("embed.w"), "{err}");

        // A missing tensor line is caught by name, with the blob length
        // check loosened to match.
        let dropped: String = original
            .lines()
            .filter(|l| !l.starts_with("tensor=head.b;"))
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&path, &dropped).unwrap();
        let err = expect_err(read_checkpoint(&path));
        assert_eq!(category(&err), "format");

        // An extra tensor beyond the configuration is also rejected.
        fs::write(&path, format!("{original}tensor=extra.w;1;0\n")).unwrap();
        let err = expect_err(read_checkpoint(&path));
        assert_eq!(category(&err), "format");

        // Truncated blob.
        fs::write(&path, &original).unwrap();
        let mut blob = fs::read(blob_path(&path)).unwrap();
        blob.truncate(blob.len() - 16);
        fs::write(blob_path(&path), blob).unwrap();
        let err = expect_err(read_checkpoint(&path));
        assert!(err.to_string().contains("blob length"), "{err}");
    }

    #[test]
    fn checkpoint_rejects_foreign_endianness_and_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = VTUNetParams::init_seeded(&tiny_io_config(), 3).unwrap();
        write_checkpoint(&path, &params, 3).unwrap();
        let original = fs::read_to_string(&path).unwrap();

        fs::write(&path, original.replace("endianness=little", "endianness=big")).unwrap();
        let err = expect_err(read_checkpoint(&path));
        assert!(err.to_string().contains("endianness"), "{err}");

        fs::write(&path, original.replace("precision=f64", "precision=f32")).unwrap();
        let err = expect_err(read_checkpoint(&path));
        assert!(err.to_string().contains("precision"), "{err}");
    }

    #[test]
    fn run_manifest_renders_deterministically() {
        let manifest = RunManifest {
            command: "corrupt".to_string(),
            seed: 77,
            config: Some(tiny_io_config()),
            inputs: vec![("volume".to_string(), PathBuf::from("/data/in.vol"))],
            outputs: vec![("volume".to_string(), PathBuf::from("/data/out.vol"))],
            artefact: Some(ArtefactSpec {
                kind: ArtefactKind::Ghosting { ghosts: 4, axis: 1 },
                intensity: 0.3,
            }),
            extra: vec![("threads".to_string(), "2".to_string())],
        };
        let text = manifest.to_manifest_string();
        assert_eq!(text, manifest.to_manifest_string());
        for needle in [
            "format=vtunet-run-v1",
            "command=corrupt",
            "seed=77",
            "input.volume=/data/in.vol",
            "output.volume=/data/out.vol",
            "config.c=6",
            "artefact.kind=ghosting",
            "artefact.intensity=0.3",
            "threads=2",
            &format!("version={}", env!("CARGO_PKG_VERSION")),
        ] {
            assert!(text.contains(needle), "missing {needle} in:\n{text}");
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.manifest");
        manifest.write(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), text);
    }

    #[test]
    fn tensor_round_trips_through_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<f64> = (0..2 * 3 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec(data, &[2, 3, 4, 2]).unwrap();
        let vol = Volume::from_tensor(&t, [1.0; 3]).unwrap();
        assert_eq!(vol.dims, (2, 3, 4));
        assert_eq!(vol.channels, 2);
        let back = vol.to_tensor().unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());

        let rank3 = Tensor::from_vec(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
        assert_eq!(Volume::from_tensor(&rank3, [1.0; 3]).unwrap().channels, 1);
    }
}
