//! Dataset ingestion, augmentation, and checkpoint persistence.
//!
//! Supported sources: big-endian IDX image/label pairs (pixels scaled to
//! [0,1]), CSV tables with a `label` column, and two synthetic generators
//! (tabular Gaussians on a circle of class means, and Gaussian "images"
//! with one deterministic pixel pattern per class). Augmentation is the
//! usual reflect-pad random crop plus horizontal flips, fully seeded.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::rng::SplitMix64;
use crate::tensor::{Element, Tensor};
use crate::trainer::{Checkpoint, CheckpointKind};

/// A labeled dataset. `inputs` has shape [N, ...]; image data is scaled
/// to [0,1] at load time.
#[derive(Debug, Clone)]
pub struct Dataset<E: Element> {
    pub inputs: Tensor<E>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl<E: Element> Dataset<E> {
    pub fn new(
        inputs: Tensor<E>,
        labels: Vec<usize>,
        classes: usize,
        provenance: String,
    ) -> Result<Self> {
        let n = *inputs.shape().first().unwrap_or(&0);
        if n != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} examples but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example feature count.
    pub fn example_numel(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    /// Per-example shape (without the leading N).
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Assemble a batch from example indices, preserving their order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<E>, Vec<usize>) {
        let stride = self.example_numel();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        (
            Tensor::from_vec(shape, data).expect("batch shape matches gathered data"),
            labels,
        )
    }
}

// ---- IDX ----

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                format!("{} byte {}", self.what, self.pos),
                format!(
                    "truncated: needed {} more bytes, file has {}",
                    n,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u16_le(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn read_u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_u64_le(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn read_f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.read_u64_le()?))
    }
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Parse a big-endian IDX image/label pair. Pixels are scaled by 1/255,
/// images come out as [N, 1, H, W].
pub fn load_idx<E: Element>(images_path: &Path, labels_path: &Path) -> Result<Dataset<E>> {
    let img_bytes = std::fs::read(images_path)?;
    let mut r = ByteReader::new(&img_bytes, "idx images");
    let magic = r.read_u32_be()?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            "idx images byte 0",
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"),
        ));
    }
    let n = r.read_u32_be()? as usize;
    let h = r.read_u32_be()? as usize;
    let w = r.read_u32_be()? as usize;
    let pixels = r.take(n * h * w)?;
    let scale = E::from_f64(1.0 / 255.0);
    let data: Vec<E> = pixels
        .iter()
        .map(|&p| E::from_f64(p as f64) * scale)
        .collect();
    let inputs = Tensor::from_vec(vec![n, 1, h, w], data)?;

    let lbl_bytes = std::fs::read(labels_path)?;
    let mut r = ByteReader::new(&lbl_bytes, "idx labels");
    let magic = r.read_u32_be()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            "idx labels byte 0",
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"),
        ));
    }
    let n_labels = r.read_u32_be()? as usize;
    if n_labels != n {
        return Err(Error::format(
            "idx labels byte 4",
            format!("{n_labels} labels for {n} images"),
        ));
    }
    let labels: Vec<usize> = r.take(n_labels)?.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(
        inputs,
        labels,
        classes,
        format!("idx:{}", images_path.display()),
    )
}

/// Write an IDX pair; the inverse of [`load_idx`] for u8 pixel data.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    labels: &[u8],
    h: usize,
    w: usize,
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * h * w {
        return Err(Error::InvalidInput(format!(
            "{} pixels for {} {}x{} images",
            pixels.len(),
            n,
            h,
            w
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    std::fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    std::fs::write(labels_path, lbl)?;
    Ok(())
}

// ---- CSV ----

/// Load a CSV table: header row, a `label` column, every other column a
/// numeric feature.
pub fn load_csv<E: Element>(path: &Path) -> Result<Dataset<E>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(format!("{} line 1", path.display()), "empty file"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns
        .iter()
        .position(|&c| c == "label")
        .ok_or_else(|| {
            Error::format(
                format!("{} line 1", path.display()),
                "no column named \"label\"",
            )
        })?;
    let dim = columns.len() - 1;
    let mut data: Vec<E> = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let loc = format!("{} line {}", path.display(), idx + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::format(
                loc,
                format!("{} fields, expected {}", fields.len(), columns.len()),
            ));
        }
        for (i, field) in fields.iter().enumerate() {
            if i == label_col {
                labels.push(field.parse::<usize>().map_err(|e| {
                    Error::format(loc.clone(), format!("bad label {field:?}: {e}"))
                })?);
            } else {
                let v: f64 = field.parse().map_err(|e| {
                    Error::format(loc.clone(), format!("bad number {field:?}: {e}"))
                })?;
                data.push(E::from_f64(v));
            }
        }
    }
    let n = labels.len();
    let classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(
        Tensor::from_vec(vec![n, dim], data)?,
        labels,
        classes,
        format!("csv:{}", path.display()),
    )
}

// ---- synthetic generators ----

/// Gaussian blobs around k class means spaced on a circle (first two
/// feature dimensions), unit variance, deterministic per seed. Values are
/// not clamped to any range, so attack budgets must be chosen explicitly.
pub fn synthetic_gaussians<E: Element>(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<E>> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 feature dimensions".into(),
        ));
    }
    if !(separation > 0.0) {
        return Err(Error::InvalidConfig("separation must be positive".into()));
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
    let mut rng = SplitMix64::derive(seed, &[0x6a55]);
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        for _ in 0..n_per_class {
            for d in 0..dim {
                let mean = match d {
                    0 => cx,
                    1 => cy,
                    _ => 0.0,
                };
                data.push(E::from_f64(mean + rng.normal()));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::from_vec(vec![n, dim], data)?,
        labels,
        classes,
        format!(
            "synthetic-gaussians k={classes} n={n_per_class} dim={dim} sep={separation} seed={seed}"
        ),
    )
}

/// Gaussian image classes: each class has a fixed random +/- pixel pattern
/// around mid-gray, samples add pixel noise and clamp to [0,1].
///
/// `contrast` is the mean offset per pixel (mean = 0.5 +/- contrast) and
/// must stay in (0, 0.5]; `noise` is the per-pixel Gaussian std.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_gaussian_images<E: Element>(
    classes: usize,
    n_per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    contrast: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset<E>> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidConfig("image extents must be positive".into()));
    }
    if !(contrast > 0.0 && contrast <= 0.5) {
        return Err(Error::InvalidConfig("contrast must be in (0, 0.5]".into()));
    }
    if noise < 0.0 {
        return Err(Error::InvalidConfig("noise must be >= 0".into()));
    }
    let numel = channels * height * width;
    // fixed class patterns, independent of n_per_class
    let mut pattern_rng = SplitMix64::derive(seed, &[0x9a77, 0]);
    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..numel)
                .map(|_| {
                    if pattern_rng.next_f64() < 0.5 {
                        0.5 - contrast
                    } else {
                        0.5 + contrast
                    }
                })
                .collect()
        })
        .collect();
    let mut rng = SplitMix64::derive(seed, &[0x9a77, 1]);
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * numel);
    let mut labels = Vec::with_capacity(n);
    for (class, pattern) in patterns.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mean in pattern {
                let v = (mean + noise * rng.normal()).clamp(0.0, 1.0);
                data.push(E::from_f64(v));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::from_vec(vec![n, channels, height, width], data)?,
        labels,
        classes,
        format!(
            "synthetic-gaussian-images k={classes} n={n_per_class} shape={channels}x{height}x{width} contrast={contrast} noise={noise} seed={seed}"
        ),
    )
}

/// Train/test split of the Gaussian image task: both halves share the
/// same class patterns (same seed), the test half holds out fresh noise
/// samples never seen in training.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_gaussian_images_split<E: Element>(
    classes: usize,
    n_train_per_class: usize,
    n_test_per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    contrast: f64,
    noise: f64,
    seed: u64,
) -> Result<(Dataset<E>, Dataset<E>)> {
    let train = synthetic_gaussian_images(
        classes,
        n_train_per_class,
        channels,
        height,
        width,
        contrast,
        noise,
        seed,
    )?;
    let full = synthetic_gaussian_images(
        classes,
        n_train_per_class + n_test_per_class,
        channels,
        height,
        width,
        contrast,
        noise,
        seed,
    )?;
    let mut keep = Vec::with_capacity(classes * n_test_per_class);
    for class in 0..classes {
        let start = class * (n_train_per_class + n_test_per_class) + n_train_per_class;
        keep.extend(start..start + n_test_per_class);
    }
    let (inputs, labels) = full.batch(&keep);
    let provenance = format!("{} (holdout)", full.provenance);
    let test = Dataset::new(inputs, labels, full.classes, provenance)?;
    Ok((train, test))
}

// ---- augmentation ----

/// Reflect-pad random crop plus horizontal flip.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pad: 4,
            flip_prob: 0.5,
        }
    }
}

/// Reflect-pad one plane (no edge repeat): index -1 maps to 1, H maps to H-2.
pub fn pad_reflect<E: Element>(plane: &[E], h: usize, w: usize, pad: usize) -> Vec<E> {
    debug_assert!(pad < h && pad < w, "reflect padding needs pad < extent");
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let reflect = |i: isize, extent: usize| -> usize {
        let e = extent as isize;
        let mut v = i;
        if v < 0 {
            v = -v;
        }
        if v >= e {
            v = 2 * e - 2 - v;
        }
        v as usize
    };
    let mut out = vec![E::ZERO; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize - pad as isize, h);
        for x in 0..pw {
            let sx = reflect(x as isize - pad as isize, w);
            out[y * pw + x] = plane[sy * w + sx];
        }
    }
    out
}

/// Crop a (h+2p) x (w+2p) plane back to h x w at the given offset.
pub fn crop_plane<E: Element>(
    padded: &[E],
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<E> {
    let pw = w + 2 * pad;
    let mut out = vec![E::ZERO; h * w];
    for y in 0..h {
        let src = (y + dy) * pw + dx;
        out[y * w..(y + 1) * w].copy_from_slice(&padded[src..src + w]);
    }
    out
}

/// Mirror a plane left-right.
pub fn flip_horizontal<E: Element>(plane: &[E], h: usize, w: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = plane[y * w + (w - 1 - x)];
        }
    }
    out
}

/// Augment an image batch: per image, reflect-pad, crop at a random
/// offset, and flip with the configured probability. Labels are the
/// caller's business and never change; output shape equals input shape.
pub fn augment<E: Element>(
    batch: &Tensor<E>,
    cfg: &AugmentConfig,
    rng: &mut SplitMix64,
) -> Result<Tensor<E>> {
    let s = batch.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidConfig(format!(
            "augmentation needs [B,C,H,W] image data, got {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if cfg.pad >= h || cfg.pad >= w {
        return Err(Error::InvalidConfig(format!(
            "pad {} too large for {h}x{w} images",
            cfg.pad
        )));
    }
    let mut out = Vec::with_capacity(batch.numel());
    for bi in 0..b {
        let dy = rng.below(2 * cfg.pad + 1);
        let dx = rng.below(2 * cfg.pad + 1);
        let flip = rng.next_f64() < cfg.flip_prob;
        for ci in 0..c {
            let plane = &batch.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let padded = pad_reflect(plane, h, w, cfg.pad);
            let mut cropped = crop_plane(&padded, h, w, cfg.pad, dy, dx);
            if flip {
                cropped = flip_horizontal(&cropped, h, w);
            }
            out.extend_from_slice(&cropped);
        }
    }
    Tensor::from_vec(s, out)
}

// ---- checkpoint persistence ----

const CKPT_MAGIC: &[u8; 8] = b"LFRCCKPT";
const CKPT_VERSION: u32 = 1;

/// Serialize a checkpoint: fixed header, embedded model spec, then named
/// parameter blobs as little-endian f64.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(match ckpt.precision.as_str() {
        "f32" => 0,
        "f64" => 1,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown precision {other:?}"
            )))
        }
    });
    out.push(match ckpt.kind {
        CheckpointKind::Best => 0,
        CheckpointKind::Last => 1,
    });
    out.extend_from_slice(&(ckpt.epoch as u32).to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    out.extend_from_slice(&ckpt.selection_value.to_bits().to_le_bytes());
    let spec_text = ckpt.spec.to_config_string();
    out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_text.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Parse a checkpoint file, validating magic, version, and structure.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let what = format!("checkpoint {}", path.display());
    let mut r = ByteReader::new(&bytes, &what);
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(
            format!("{what} byte 0"),
            "bad magic, not a checkpoint file",
        ));
    }
    let version = r.read_u32_le()?;
    if version != CKPT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads {CKPT_VERSION}"
        )));
    }
    let precision = match r.read_u8()? {
        0 => "f32".to_string(),
        1 => "f64".to_string(),
        other => {
            return Err(Error::format(
                format!("{what} byte {}", r.pos - 1),
                format!("unknown precision tag {other}"),
            ))
        }
    };
    let kind = match r.read_u8()? {
        0 => CheckpointKind::Best,
        1 => CheckpointKind::Last,
        other => {
            return Err(Error::format(
                format!("{what} byte {}", r.pos - 1),
                format!("unknown checkpoint kind {other}"),
            ))
        }
    };
    let epoch = r.read_u32_le()? as usize;
    let seed = r.read_u64_le()?;
    let config_hash = r.read_u64_le()?;
    let selection_value = r.read_f64_le()?;
    let spec_len = r.read_u32_le()? as usize;
    let spec_bytes = r.take(spec_len)?;
    let spec_text = std::str::from_utf8(spec_bytes)
        .map_err(|e| Error::format(format!("{what} spec"), e.to_string()))?;
    let spec = ModelSpec::from_config_string(spec_text)?;
    let param_count = r.read_u32_le()? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = r.read_u16_le()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::format(format!("{what} byte {}", r.pos), e.to_string()))?
            .to_string();
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32_le()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64_le()?);
        }
        params.push((name, shape, data));
    }
    Ok(Checkpoint {
        spec,
        precision,
        params,
        kind,
        epoch,
        seed,
        config_hash,
        selection_value,
    })
}
