//! Image ingestion, preprocessing and the synthetic speckled-bar dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{LvitError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Side length of model inputs.
pub const INPUT_SIZE: usize = 48;
/// Added to the per-image std before dividing.
pub const STANDARDIZE_EPS: f64 = 1e-8;
pub const PHOENIX_TERMINATOR: &str = "[EndofPhoenixHeader]";
pub const SYNTHETIC_CLASSES: usize = 10;
/// Bar orientation step between consecutive synthetic classes, in degrees.
pub const SYNTHETIC_ANGLE_STEP_DEG: f64 = 18.0;
pub const SYNTHETIC_BAR_WIDTH: f64 = 6.0;
pub const SYNTHETIC_BAR_LEVEL: f64 = 1.0;
pub const SYNTHETIC_BACKGROUND_LEVEL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, label_names: Vec<String>) -> Result<Self> {
        for (i, a) in label_names.iter().enumerate() {
            if label_names[..i].contains(a) {
                return Err(LvitError::Contract(format!("duplicate label name `{a}`")));
            }
        }
        if let Some(s) = samples.iter().find(|s| s.label >= label_names.len()) {
            return Err(LvitError::Contract(format!(
                "sample `{}` has label {} but only {} classes exist",
                s.source_id,
                s.label,
                label_names.len()
            )));
        }
        Ok(Dataset { samples, label_names })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }
}

/// How raw chips are brought to the model's input size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResizeMode {
    /// Largest centered square, then bilinear resize.
    #[default]
    CropResize,
    /// Centered crop of exactly the target size; the input must be at least that large.
    CropOnly,
    /// Bilinear resize of the whole image, ignoring aspect ratio.
    ResizeOnly,
}

impl std::str::FromStr for ResizeMode {
    type Err = LvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crop-resize" => Ok(ResizeMode::CropResize),
            "crop" => Ok(ResizeMode::CropOnly),
            "resize" => Ok(ResizeMode::ResizeOnly),
            other => Err(LvitError::Config(format!(
                "unknown resize mode `{other}` (expected crop-resize, crop or resize)"
            ))),
        }
    }
}

impl std::fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResizeMode::CropResize => "crop-resize",
            ResizeMode::CropOnly => "crop",
            ResizeMode::ResizeOnly => "resize",
        })
    }
}

fn crop(src: &[f64], w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ch * cw);
    for r in top..top + ch {
        out.extend_from_slice(&src[r * w + left..r * w + left + cw]);
    }
    out
}

/// Placeholder path for errors about in-memory images; file loaders substitute the real path.
const RAW_IMAGE: &str = "<raw image>";

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// In-place `(x - mean) / (std + 1e-8)`.
pub fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    // Shifting by the first value makes the mean of a constant image exact.
    let pivot = values.first().copied().unwrap_or(0.0);
    let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + STANDARDIZE_EPS;
    for v in values.iter_mut() {
        *v = (*v - mean) / denom;
    }
}

/// Bring a raw `h×w` image to a standardized `48×48` tensor.
pub fn preprocess(raw: &[f64], h: usize, w: usize, mode: ResizeMode) -> Result<Tensor> {
    preprocess_to(raw, h, w, mode, INPUT_SIZE)
}

pub fn preprocess_to(raw: &[f64], h: usize, w: usize, mode: ResizeMode, size: usize) -> Result<Tensor> {
    if h == 0 || w == 0 || raw.len() != h * w {
        return Err(LvitError::shape("preprocess", format!("{h}x{w} image with {} values", raw.len())));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(LvitError::ingest(RAW_IMAGE, format!("pixel {i} of a {h}x{w} image is {}", raw[i])));
    }
    let mut out = match mode {
        ResizeMode::CropResize => {
            let side = h.min(w);
            let square = crop(raw, w, (h - side) / 2, (w - side) / 2, side, side);
            if side == size {
                square
            } else {
                bilinear_resize(&square, side, side, size, size)
            }
        }
        ResizeMode::CropOnly => {
            if h < size || w < size {
                return Err(LvitError::shape(
                    "preprocess",
                    format!("crop mode needs at least {size}x{size}, got {h}x{w}"),
                ));
            }
            crop(raw, w, (h - size) / 2, (w - size) / 2, size, size)
        }
        ResizeMode::ResizeOnly => {
            if h == size && w == size {
                raw.to_vec()
            } else {
                bilinear_resize(raw, h, w, size, size)
            }
        }
    };
    standardize(&mut out);
    Tensor::new(vec![size, size], out)
}

/// Header fields of a Phoenix (MSTAR public release) file.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoenixHeader {
    pub fields: BTreeMap<String, String>,
    pub rows: usize,
    pub cols: usize,
}

/// Parse a Phoenix file and return its magnitude block as a `rows×cols` tensor.
///
/// The ASCII header runs up to and including the `[EndofPhoenixHeader]` line.
/// If the header declares a `NativeHeaderLength`, that many bytes are skipped
/// before the payload. The payload is big-endian `f32`: magnitude first, then
/// phase, which is ignored.
pub fn parse_phoenix(bytes: &[u8]) -> Result<(PhoenixHeader, Tensor)> {
    let mut fields = BTreeMap::new();
    let mut pos = 0;
    let mut terminated = false;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| pos + i);
        let line = String::from_utf8_lossy(&bytes[pos..end]);
        let line = line.trim();
        pos = (end + 1).min(bytes.len());
        if line == PHOENIX_TERMINATOR {
            terminated = true;
            break;
        }
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    if !terminated {
        return Err(LvitError::Format(format!("missing {PHOENIX_TERMINATOR} line")));
    }
    let dim = |key: &str| -> Result<usize> {
        let v = fields.get(key).ok_or_else(|| LvitError::Format(format!("missing header key {key}")))?;
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(LvitError::Format(format!("bad {key} value `{v}`"))),
        }
    };
    let rows = dim("NumberOfRows")?;
    let cols = dim("NumberOfColumns")?;
    let native = match fields.get("NativeHeaderLength") {
        Some(v) => v.parse::<usize>().map_err(|_| LvitError::Format(format!("bad NativeHeaderLength `{v}`")))?,
        None => 0,
    };
    let start = pos + native;
    let need = rows * cols * 4;
    if bytes.len() < start || bytes.len() - start < need {
        return Err(LvitError::Truncated(format!(
            "magnitude block needs {need} bytes, {} available",
            bytes.len().saturating_sub(start)
        )));
    }
    let values = bytes[start..start + need]
        .chunks_exact(4)
        .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let image = Tensor::new(vec![rows, cols], values)?;
    Ok((PhoenixHeader { fields, rows, cols }, image))
}

/// Serialize a Phoenix file: header fields, terminator, magnitude and phase blocks.
///
/// `NumberOfRows`/`NumberOfColumns` are written from the magnitude shape and
/// override any same-named entries in `fields`.
pub fn write_phoenix(fields: &BTreeMap<String, String>, magnitude: &Tensor, phase: Option<&Tensor>) -> Vec<u8> {
    let (rows, cols) = (magnitude.shape()[0], magnitude.shape()[1]);
    let mut out = String::from("[PhoenixHeaderVer01.04]\n");
    for (k, v) in fields {
        if k != "NumberOfRows" && k != "NumberOfColumns" {
            out.push_str(&format!("{k}= {v}\n"));
        }
    }
    out.push_str(&format!("NumberOfRows= {rows}\nNumberOfColumns= {cols}\n{PHOENIX_TERMINATOR}\n"));
    let mut bytes = out.into_bytes();
    for v in magnitude.data() {
        bytes.extend_from_slice(&(*v as f32).to_be_bytes());
    }
    let zeros = Tensor::zeros(&[rows, cols]);
    for v in phase.unwrap_or(&zeros).data() {
        bytes.extend_from_slice(&(*v as f32).to_be_bytes());
    }
    bytes
}

/// Decode one image file into raw grayscale values.
///
/// `.raw` files are parsed as Phoenix; anything else goes through the image
/// decoders (binary PGM and PNG). Color input is converted to luminance.
pub fn decode_image(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let is_phoenix = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("raw"));
    if is_phoenix {
        let bytes = fs::read(path).map_err(|e| LvitError::ingest(path, e.to_string()))?;
        let (hdr, img) = parse_phoenix(&bytes).map_err(|e| LvitError::ingest(path, e.to_string()))?;
        return Ok((img.into_data(), hdr.rows, hdr.cols));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| LvitError::ingest(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| LvitError::ingest(path, e.to_string()))?
        .decode()
        .map_err(|e| LvitError::ingest(path, e.to_string()))?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    Ok((luma.into_raw().into_iter().map(f64::from).collect(), h as usize, w as usize))
}

fn is_image_file(path: &Path) -> bool {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    matches!(ext.as_deref(), Some("pgm" | "png" | "raw"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| LvitError::ingest(dir, e.to_string()))? {
        let entry = entry.map_err(|e| LvitError::ingest(dir, e.to_string()))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Load `root/<class>/<image>` trees. Class indices follow the sorted subdirectory names.
pub fn load_image_dir(root: &Path, mode: ResizeMode, expected_classes: Option<usize>) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(LvitError::ingest(root, "not a directory"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(LvitError::ingest(root, "no class subdirectories"));
    }
    if let Some(k) = expected_classes {
        if class_dirs.len() != k {
            return Err(LvitError::Contract(format!(
                "{} has {} class directories, expected {k}",
                root.display(),
                class_dirs.len()
            )));
        }
    }
    let mut label_names = Vec::with_capacity(class_dirs.len());
    let mut jobs = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        label_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let files: Vec<PathBuf> =
            sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect();
        if files.is_empty() {
            return Err(LvitError::ingest(dir, "class directory has no image files"));
        }
        jobs.extend(files.into_iter().map(|f| (label, f)));
    }
    // Indexed parallel collect keeps the sorted order.
    let samples = jobs
        .par_iter()
        .map(|(label, path)| {
            let (raw, h, w) = decode_image(path)?;
            let image = preprocess(&raw, h, w, mode).map_err(|e| match e {
                LvitError::Ingest { detail, .. } => LvitError::ingest(path, detail),
                other => LvitError::ingest(path, other.to_string()),
            })?;
            Ok(Sample { image, label: *label, source_id: path.display().to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, label_names)
}

/// Class names of the synthetic dataset, in label order.
pub fn synthetic_label_names() -> Vec<String> {
    (0..SYNTHETIC_CLASSES)
        .map(|c| format!("bar_{:03}deg", (c as f64 * SYNTHETIC_ANGLE_STEP_DEG) as usize))
        .collect()
}

/// Clean template for class `c`: a bright bar through the center at `c·18°`.
pub fn synthetic_template(class: usize) -> Vec<f64> {
    let theta = (class as f64 * SYNTHETIC_ANGLE_STEP_DEG).to_radians();
    let (s, c) = theta.sin_cos();
    let center = (INPUT_SIZE as f64 - 1.0) / 2.0;
    let half = SYNTHETIC_BAR_WIDTH / 2.0;
    let mut out = Vec::with_capacity(INPUT_SIZE * INPUT_SIZE);
    for r in 0..INPUT_SIZE {
        for col in 0..INPUT_SIZE {
            let x = col as f64 - center;
            let y = center - r as f64;
            let dist = (x * s - y * c).abs();
            out.push(if dist <= half { SYNTHETIC_BAR_LEVEL } else { SYNTHETIC_BACKGROUND_LEVEL });
        }
    }
    out
}

/// Seeded 10-class dataset of speckled bars.
///
/// Each pixel of the class template is multiplied by `1 + noise_level·(E - 1)`
/// with `E` a unit-mean exponential draw, then the image is standardized.
/// Samples are ordered class by class.
pub fn gen_synthetic(n_per_class: usize, seed: u64, noise_level: f64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(LvitError::Param("n_per_class must be >= 1".into()));
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(LvitError::Param(format!("noise_level must be >= 0, got {noise_level}")));
    }
    let mut rng = RngState::new(seed);
    let mut samples = Vec::with_capacity(n_per_class * SYNTHETIC_CLASSES);
    for class in 0..SYNTHETIC_CLASSES {
        let template = synthetic_template(class);
        for i in 0..n_per_class {
            let raw: Vec<f64> =
                template.iter().map(|&t| t * (1.0 + noise_level * (rng.exponential() - 1.0))).collect();
            let image = preprocess(&raw, INPUT_SIZE, INPUT_SIZE, ResizeMode::CropResize)?;
            samples.push(Sample { image, label: class, source_id: format!("synthetic:{seed}:{class}:{i}") });
        }
    }
    Dataset::new(samples, synthetic_label_names())
}

/// Seeded Fisher–Yates shuffle of `0..n`, cut into consecutive chunks. The last chunk may be short.
pub fn batches(n: usize, batch_size: usize, rng: &mut RngState) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(LvitError::Param("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng.inner_mut());
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
