//! Dataset ingestion and generation.
//!
//! Three input formats are supported:
//! - a minimal raw binary container (magic `IIDS`) with an explicit header,
//!   documented on [`load_raw`];
//! - CSV rows of `label, pixel...` values in 0..=255;
//! - the classic CIFAR-10 binary record layout (1 label byte + 3072 pixels).
//!
//! Pixels load as value/255 in [0,1]. Standardization is a separate step:
//! [`Normalizer::fit`] computes per-channel statistics from the training
//! split only, and the same statistics are applied to every split.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub const RAW_MAGIC: &[u8; 4] = b"IIDS";
pub const RAW_VERSION: u32 = 1;
/// Environment variable that re-roots relative dataset paths.
pub const DATA_ROOT_ENV: &str = "INI_DATA_ROOT";

/// An immutable, fully materialized split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// [N, C, H, W]; in [0,1] after load, arbitrary after standardization.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::DataDimension(format!(
                "dataset images must be [N,C,H,W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::DataDimension(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { index: i, label: l, classes });
            }
        }
        Ok(Dataset { images, labels, classes, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width) of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Pixels of image i.
    pub fn image(&self, i: usize) -> &[f64] {
        let stride = self.images.numel() / self.len().max(1);
        &self.images.data()[i * stride..(i + 1) * stride]
    }

    /// Copy the given rows into a batch tensor plus its labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "batch index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_vec(&[indices.len(), c, h, w], data)?;
        Ok((images, labels))
    }
}

/// Re-root a relative path under `root` when one is given.
pub fn rooted_path(path: &str, root: Option<&str>) -> PathBuf {
    let p = Path::new(path);
    match root {
        Some(r) if p.is_relative() => Path::new(r).join(p),
        _ => p.to_path_buf(),
    }
}

/// `rooted_path` with the root taken from the `INI_DATA_ROOT` environment
/// variable.
pub fn resolve_data_path(path: &str) -> PathBuf {
    let root = std::env::var(DATA_ROOT_ENV).ok();
    rooted_path(path, root.as_deref())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DataTruncated {
                what: what.to_string(),
                needed: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<(usize, u32)> {
        let offset = self.pos;
        let b = self.take(4, what)?;
        Ok((offset, u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
    }
}

fn infer_classes(labels: &[usize], classes: Option<usize>) -> Result<usize> {
    let max = labels.iter().copied().max().unwrap_or(0);
    match classes {
        Some(k) => {
            if let Some(i) = labels.iter().position(|&l| l >= k) {
                return Err(Error::LabelOutOfRange { index: i, label: labels[i], classes: k });
            }
            Ok(k)
        }
        None => Ok(max + 1),
    }
}

/// Parse the raw container format.
///
/// Layout (all integers little-endian u32):
/// `magic "IIDS" | version | N | C | H | W | label_width` followed by
/// `N * label_width` label bytes (little-endian integers) and then
/// `N * C * H * W` pixel bytes in [0,255], row-major per image.
pub fn parse_raw(bytes: &[u8], classes: Option<usize>, split: &str) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "container magic")?;
    if magic != RAW_MAGIC {
        return Err(Error::DataHeader {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {RAW_MAGIC:?}"),
        });
    }
    let (off, version) = cur.u32_le("container version")?;
    if version != RAW_VERSION {
        return Err(Error::DataHeader {
            offset: off,
            detail: format!("unsupported container version {version}, expected {RAW_VERSION}"),
        });
    }
    let (off_n, n) = cur.u32_le("image count")?;
    let (_, c) = cur.u32_le("channel count")?;
    let (_, h) = cur.u32_le("image height")?;
    let (_, w) = cur.u32_le("image width")?;
    let (off_lw, label_width) = cur.u32_le("label width")?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::DataHeader {
            offset: off_n,
            detail: format!("degenerate image dimensions {c}x{h}x{w}"),
        });
    }
    if !(1..=4).contains(&label_width) {
        return Err(Error::DataHeader {
            offset: off_lw,
            detail: format!("label width {label_width} outside 1..=4 bytes"),
        });
    }
    let (n, c, h, w, lw) = (n as usize, c as usize, h as usize, w as usize, label_width as usize);
    let label_bytes = cur.take(n * lw, "label block")?;
    let labels: Vec<usize> = label_bytes
        .chunks_exact(lw)
        .map(|chunk| {
            let mut v = 0usize;
            for (i, &b) in chunk.iter().enumerate() {
                v |= (b as usize) << (8 * i);
            }
            v
        })
        .collect();
    let pixel_bytes = cur.take(n * c * h * w, "pixel block")?;
    let data: Vec<f64> = pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let classes = infer_classes(&labels, classes)?;
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data)?, labels, classes, split)
}

pub fn load_raw(path: &Path, classes: Option<usize>, split: &str) -> Result<Dataset> {
    parse_raw(&fs::read(path)?, classes, split)
}

/// Serialize in the raw container format. Pixels are quantized with
/// round(v*255) clamped to [0,255]; files loaded from any of the u8 formats
/// round-trip exactly.
pub fn write_raw(dataset: &Dataset, path: &Path) -> Result<()> {
    let (c, h, w) = dataset.image_dims();
    let n = dataset.len();
    let mut bytes = Vec::with_capacity(28 + n + dataset.images.numel());
    bytes.extend_from_slice(RAW_MAGIC);
    for v in [RAW_VERSION, n as u32, c as u32, h as u32, w as u32, 1u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for (i, &l) in dataset.labels.iter().enumerate() {
        if l > u8::MAX as usize {
            return Err(Error::Data(format!(
                "label {l} at index {i} does not fit the 1-byte label width"
            )));
        }
        bytes.push(l as u8);
    }
    bytes.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

/// Parse CSV rows of `label, p0, p1, ...` with `c*h*w` pixel values in
/// 0..=255 per row. A first line whose first field is `label` is treated as
/// a header and skipped. Loads bit-identically to the same data in the raw
/// container.
pub fn parse_csv(
    text: &str,
    c: usize,
    h: usize,
    w: usize,
    classes: Option<usize>,
    split: &str,
) -> Result<Dataset> {
    let stride = c * h * w;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or("");
        if lineno == 0 && first.eq_ignore_ascii_case("label") {
            continue;
        }
        let label: usize = first.parse().map_err(|_| {
            Error::Data(format!("line {}: label '{first}' is not an integer", lineno + 1))
        })?;
        labels.push(label);
        let mut count = 0usize;
        for field in fields {
            let v: u16 = field.parse().map_err(|_| {
                Error::Data(format!("line {}: pixel '{field}' is not an integer", lineno + 1))
            })?;
            if v > 255 {
                return Err(Error::Data(format!(
                    "line {}: pixel value {v} exceeds 255",
                    lineno + 1
                )));
            }
            data.push(v as f64 / 255.0);
            count += 1;
        }
        if count != stride {
            return Err(Error::DataDimension(format!(
                "line {}: {count} pixels but {c}x{h}x{w} needs {stride}",
                lineno + 1
            )));
        }
    }
    let n = labels.len();
    let classes = infer_classes(&labels, classes)?;
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data)?, labels, classes, split)
}

#[allow(clippy::too_many_arguments)]
pub fn load_csv(
    path: &Path,
    c: usize,
    h: usize,
    w: usize,
    classes: Option<usize>,
    split: &str,
) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?, c, h, w, classes, split)
}

/// Parse the CIFAR-10 binary record layout: each record is 1 label byte
/// followed by 3072 pixel bytes (3 channels x 32 x 32, channel-major).
pub fn parse_cifar_bin(bytes: &[u8], split: &str) -> Result<Dataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::DataTruncated {
            what: format!("whole {RECORD}-byte records"),
            needed: (bytes.len() / RECORD + 1) * RECORD,
            got: bytes.len(),
        });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (RECORD - 1));
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let classes = infer_classes(&labels, Some(10))?;
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], data)?, labels, classes, split)
}

pub fn load_cifar_bin(path: &Path, split: &str) -> Result<Dataset> {
    parse_cifar_bin(&fs::read(path)?, split)
}

/// Deterministic synthetic classification data: every class gets its own
/// 2-D sinusoid (frequency/phase motif) plus a bright blob at a
/// class-specific position, with uniform pixel noise on top. Labels are
/// assigned round-robin, so the histogram is exactly balanced whenever
/// `classes` divides `n`.
pub fn synth_dataset(
    classes: usize,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
    split: &str,
) -> Result<Dataset> {
    use rand::SeedableRng;
    if classes < 2 {
        return Err(Error::Data("synthetic data needs at least two classes".into()));
    }
    if n == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(Error::Data("synthetic data dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * channels * height * width);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        let fx = 1.0 + (k % 4) as f64;
        let fy = 1.0 + (k / 4) as f64;
        let angle = tau * k as f64 / classes as f64;
        let cy = height as f64 * (0.5 + 0.3 * angle.sin());
        let cx = width as f64 * (0.5 + 0.3 * angle.cos());
        let sigma2 = (height.min(width) as f64 / 6.0).powi(2);
        for c in 0..channels {
            let phase = k as f64 * 0.7 + c as f64 * 0.5;
            for y in 0..height {
                for x in 0..width {
                    let wave = (tau * fx * x as f64 / width as f64 + phase).sin()
                        * (tau * fy * y as f64 / height as f64 + phase * 1.3).sin();
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let blob = 0.45 * (-(dy * dy + dx * dx) / (2.0 * sigma2)).exp();
                    let noise = rng.random_range(-0.08..0.08);
                    let v: f64 = 0.45 + 0.3 * wave + blob + noise;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new(
        Tensor::from_vec(&[n, channels, height, width], data)?,
        labels,
        classes,
        split,
    )
}

/// Batch augmentation policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentPolicy {
    None,
    /// Horizontal mirror with probability 1/2, then pad-4 + random crop.
    FlipTranslate,
}

impl AugmentPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentPolicy::None),
            "flip_translate" => Ok(AugmentPolicy::FlipTranslate),
            other => Err(Error::Config(format!(
                "unknown augmentation policy '{other}' (expected none or flip_translate)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentPolicy::None => "none",
            AugmentPolicy::FlipTranslate => "flip_translate",
        }
    }
}

pub const CROP_PAD: usize = 4;

/// Mirror one [C,H,W] image in place along the width axis.
pub fn flip_horizontal(image: &mut [f64], c: usize, h: usize, w: usize) {
    debug_assert_eq!(image.len(), c * h * w);
    for plane in image.chunks_exact_mut(h * w) {
        for row in plane.chunks_exact_mut(w) {
            row.reverse();
        }
    }
}

/// Copy the H x W window at (dy, dx) out of an image padded with CROP_PAD
/// zeros on every side.
fn crop_padded(image: &[f64], c: usize, h: usize, w: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // Source row in unpadded coordinates; rows outside stay zero.
            let sy = y + dy;
            if sy < CROP_PAD || sy >= CROP_PAD + h {
                continue;
            }
            let sy = sy - CROP_PAD;
            for x in 0..w {
                let sx = x + dx;
                if sx < CROP_PAD || sx >= CROP_PAD + w {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy) * w + (sx - CROP_PAD)];
            }
        }
    }
    out
}

/// Apply the policy to a [B,C,H,W] batch. The RNG drives flip coins and
/// crop offsets, so a seeded stream makes augmentation reproducible.
pub fn augment(batch: &Tensor, policy: AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if policy == AugmentPolicy::None {
        return Ok(batch.clone());
    }
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::DataDimension(format!(
            "augmentation expects [B,C,H,W], got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let stride = c * h * w;
    let mut out = Vec::with_capacity(b * stride);
    for i in 0..b {
        let mut img = batch.data()[i * stride..(i + 1) * stride].to_vec();
        if rng.random::<f64>() < 0.5 {
            flip_horizontal(&mut img, c, h, w);
        }
        let dy = rng.random_range(0..=2 * CROP_PAD);
        let dx = rng.random_range(0..=2 * CROP_PAD);
        out.extend(crop_padded(&img, c, h, w, dy, dx));
    }
    Tensor::from_vec(&shape, out)
}

/// Per-channel standardization statistics, fit on the training split only.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Normalizer {
        let (c, h, w) = train.image_dims();
        let n = train.len();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let count = (n * plane).max(1) as f64;
        for i in 0..n {
            let img = train.image(i);
            for ch in 0..c {
                mean[ch] += img[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..n {
            let img = train.image(i);
            for ch in 0..c {
                std[ch] += img[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        for s in &mut std {
            *s = (*s / count).sqrt().max(1e-8);
        }
        Normalizer { mean, std }
    }

    /// Standardize a [B,C,H,W] (or [N,C,H,W]) tensor in place.
    pub fn apply(&self, images: &mut Tensor) {
        let shape = images.shape().to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        debug_assert_eq!(c, self.mean.len());
        for img in images.data_mut().chunks_exact_mut(c * plane) {
            for ch in 0..c {
                let m = self.mean[ch];
                let s = self.std[ch];
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Handcrafted two-image container: 1 channel, 2x2 images.
    fn tiny_raw_bytes() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"IIDS");
        for v in [1u32, 2, 1, 2, 2, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&[1, 0]); // labels
        b.extend_from_slice(&[0, 51, 102, 255, 10, 20, 30, 40]); // pixels
        b
    }

    #[test]
    fn raw_container_round_trips_exactly() {
        let bytes = tiny_raw_bytes();
        let ds = parse_raw(&bytes, None, "train").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.classes, 2);
        assert_eq!(ds.image(0), &[0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.iids");
        write_raw(&ds, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn raw_container_rejects_corruption_with_offsets() {
        let mut bad_magic = tiny_raw_bytes();
        bad_magic[0] = b'X';
        match parse_raw(&bad_magic, None, "t") {
            Err(Error::DataHeader { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }

        let mut bad_version = tiny_raw_bytes();
        bad_version[4] = 9;
        match parse_raw(&bad_version, None, "t") {
            Err(Error::DataHeader { offset: 4, .. }) => {}
            other => panic!("{other:?}"),
        }

        let mut truncated = tiny_raw_bytes();
        truncated.truncate(truncated.len() - 3);
        match parse_raw(&truncated, None, "t") {
            Err(Error::DataTruncated { what, .. }) => assert_eq!(what, "pixel block"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn explicit_class_count_bounds_labels() {
        let bytes = tiny_raw_bytes();
        match parse_raw(&bytes, Some(1), "t") {
            Err(Error::LabelOutOfRange { index: 0, label: 1, classes: 1 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_raw(&bytes, Some(5), "t").unwrap().classes == 5);
    }

    #[test]
    fn csv_matches_raw_bit_for_bit() {
        let raw = parse_raw(&tiny_raw_bytes(), None, "train").unwrap();
        let csv = "label,p0,p1,p2,p3\n1,0,51,102,255\n0,10,20,30,40\n";
        let from_csv = parse_csv(csv, 1, 2, 2, None, "train").unwrap();
        assert_eq!(raw, from_csv);
    }

    #[test]
    fn csv_rejects_wrong_pixel_count_and_bad_values() {
        assert!(matches!(
            parse_csv("1,2,3\n", 1, 2, 2, None, "t"),
            Err(Error::DataDimension(_))
        ));
        assert!(parse_csv("1,300,0,0,0\n", 1, 2, 2, None, "t").is_err());
        assert!(parse_csv("dog,1,2,3,4\n", 1, 2, 2, None, "t").is_err());
    }

    #[test]
    fn cifar_layout_loads_miniature_files() {
        let mut bytes = Vec::new();
        for rec in 0..2u8 {
            bytes.push(rec + 3); // label
            bytes.extend((0..3072).map(|i| ((i + rec as usize) % 256) as u8));
        }
        let ds = parse_cifar_bin(&bytes, "train").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 4]);
        assert_eq!(ds.image_dims(), (3, 32, 32));
        assert_eq!(ds.image(0)[0], 0.0);
        assert_eq!(ds.image(1)[0], 1.0 / 255.0);

        bytes.pop();
        assert!(matches!(parse_cifar_bin(&bytes, "t"), Err(Error::DataTruncated { .. })));
    }

    #[test]
    fn synthetic_data_is_deterministic_and_balanced() {
        let a = synth_dataset(10, 40, 1, 8, 8, 7, "train").unwrap();
        let b = synth_dataset(10, 40, 1, 8, 8, 7, "train").unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(10, 40, 1, 8, 8, 8, "train").unwrap();
        assert_ne!(a.images.data(), c.images.data());
        let mut hist = vec![0usize; 10];
        for &l in &a.labels {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&h| h == 4), "{hist:?}");
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_classes_separate_under_nearest_centroid() {
        let train = synth_dataset(2, 100, 1, 8, 8, 3, "train").unwrap();
        let test = synth_dataset(2, 100, 1, 8, 8, 4, "test").unwrap();
        let dim = 64;
        let mut centroids = vec![vec![0.0; dim]; 2];
        let mut counts = [0usize; 2];
        for i in 0..train.len() {
            let k = train.labels[i];
            counts[k] += 1;
            for (acc, v) in centroids[k].iter_mut().zip(train.image(i)) {
                *acc += v;
            }
        }
        for (cent, n) in centroids.iter_mut().zip(counts) {
            for v in cent.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.len() {
            let img = test.image(i);
            let d = |cent: &[f64]| -> f64 {
                cent.iter().zip(img).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let pred = if d(&centroids[0]) <= d(&centroids[1]) { 0 } else { 1 };
            if pred == test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn augment_none_is_identity() {
        let batch = synth_dataset(2, 4, 1, 6, 6, 1, "t").unwrap().images;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&batch, AugmentPolicy::None, &mut rng).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn double_flip_is_identity_and_preserves_multiset() {
        let ds = synth_dataset(2, 1, 3, 5, 4, 2, "t").unwrap();
        let orig = ds.image(0).to_vec();
        let mut img = orig.clone();
        flip_horizontal(&mut img, 3, 5, 4);
        let mut sorted_flipped = img.clone();
        let mut sorted_orig = orig.clone();
        sorted_flipped.sort_by(f64::total_cmp);
        sorted_orig.sort_by(f64::total_cmp);
        assert_eq!(sorted_flipped, sorted_orig);
        assert_ne!(img, orig);
        flip_horizontal(&mut img, 3, 5, 4);
        assert_eq!(img, orig);
    }

    #[test]
    fn augmentation_is_reproducible_under_a_seed() {
        let batch = synth_dataset(3, 6, 1, 8, 8, 5, "t").unwrap().images;
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = augment(&batch, AugmentPolicy::FlipTranslate, &mut r1).unwrap();
        let b = augment(&batch, AugmentPolicy::FlipTranslate, &mut r2).unwrap();
        assert_eq!(a, b);
        let mut r3 = ChaCha8Rng::seed_from_u64(12);
        let c = augment(&batch, AugmentPolicy::FlipTranslate, &mut r3).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn centered_crop_recovers_image_when_offsets_are_centered() {
        // dy = dx = CROP_PAD reproduces the original image exactly.
        let ds = synth_dataset(2, 1, 2, 5, 5, 9, "t").unwrap();
        let img = ds.image(0);
        let out = crop_padded(img, 2, 5, 5, CROP_PAD, CROP_PAD);
        assert_eq!(out, img);
    }

    #[test]
    fn normalizer_standardizes_with_train_statistics_only() {
        let train = synth_dataset(3, 30, 2, 6, 6, 21, "train").unwrap();
        let norm = Normalizer::fit(&train);
        let mut images = train.images.clone();
        norm.apply(&mut images);
        let plane = 36;
        for ch in 0..2 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut count = 0.0;
            for img in images.data().chunks_exact(2 * plane) {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum += v;
                    sq += v * v;
                    count += 1.0;
                }
            }
            let mean = sum / count;
            let var = sq / count - mean * mean;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }

        // Applying to a different split uses the train statistics unchanged.
        let test = synth_dataset(3, 12, 2, 6, 6, 22, "test").unwrap();
        let mut test_images = test.images.clone();
        norm.apply(&mut test_images);
        let expected = (test.images.data()[0] - norm.mean[0]) / norm.std[0];
        assert_eq!(test_images.data()[0], expected);
    }

    #[test]
    fn gather_builds_batches_in_index_order() {
        let ds = synth_dataset(5, 10, 1, 4, 4, 1, "t").unwrap();
        let (batch, labels) = ds.gather(&[7, 2]).unwrap();
        assert_eq!(batch.shape(), &[2, 1, 4, 4]);
        assert_eq!(labels, vec![ds.labels[7], ds.labels[2]]);
        assert_eq!(&batch.data()[..16], ds.image(7));
        assert!(ds.gather(&[10]).is_err());
    }

    #[test]
    fn paths_reroot_under_a_data_root() {
        assert_eq!(rooted_path("sets/a.bin", Some("/data")), PathBuf::from("/data/sets/a.bin"));
        assert_eq!(rooted_path("/abs/a.bin", Some("/data")), PathBuf::from("/abs/a.bin"));
        assert_eq!(rooted_path("sets/a.bin", None), PathBuf::from("sets/a.bin"));
    }
}
