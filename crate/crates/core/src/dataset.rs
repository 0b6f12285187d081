//! Labeled 32x32 RGB image sets: CIFAR-10 binary ingestion, a generic raw
//! format for other 32x32 corpora, deterministic train/validation splits,
//! and synthetic shadows.
//!
//! Pixels are stored planar (all R rows, then G, then B, row-major within a
//! channel), the same layout the CIFAR-10 binary files use, so loading is a
//! byte copy and saving round-trips exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// All datasets in scope are 32x32 RGB.
pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS_PER_IMAGE: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;

const CIFAR_RECORD: usize = 1 + PIXELS_PER_IMAGE;
const CIFAR_CLASSES: u32 = 10;
const RAW_MAGIC: &[u8; 4] = b"RAWI";

/// Labeled images with 8-bit planar pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    /// `len * PIXELS_PER_IMAGE` bytes, planar per image.
    images: Vec<u8>,
    labels: Vec<u16>,
    class_count: u32,
}

impl ImageDataset {
    pub fn new(name: impl Into<String>, images: Vec<u8>, labels: Vec<u16>, class_count: u32) -> Result<Self> {
        if images.len() != labels.len() * PIXELS_PER_IMAGE {
            return Err(Error::config(format!(
                "image bytes ({}) do not match {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| u32::from(l) >= class_count) {
            return Err(Error::config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(ImageDataset {
            name: name.into(),
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> u32 {
        self.class_count
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Planar pixel bytes of one image.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS_PER_IMAGE..(i + 1) * PIXELS_PER_IMAGE]
    }

    /// New dataset holding the given records, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let mut images = Vec::with_capacity(indices.len() * PIXELS_PER_IMAGE);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageDataset {
            name: name.into(),
            images,
            labels,
            class_count: self.class_count,
        }
    }

    /// Appends all records of `other`; class counts must agree.
    pub fn concat(&self, other: &ImageDataset, name: impl Into<String>) -> Result<Self> {
        if self.class_count != other.class_count {
            return Err(Error::config(format!(
                "cannot concat datasets with {} and {} classes",
                self.class_count, other.class_count
            )));
        }
        let mut images = self.images.clone();
        images.extend_from_slice(&other.images);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(ImageDataset {
            name: name.into(),
            images,
            labels,
            class_count: self.class_count,
        })
    }
}

/// A shadow covering the leading image columns, multiplying their pixels by
/// `intensity` in 8-bit space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadowSpec {
    pub columns: usize,
    pub intensity: f32,
}

impl ShadowSpec {
    pub fn new(columns: usize, intensity: f32) -> Result<Self> {
        if !(intensity > 0.0 && intensity <= 1.0) {
            return Err(Error::config(format!(
                "shadow intensity must be in (0, 1], got {intensity}"
            )));
        }
        if columns > IMAGE_SIDE {
            return Err(Error::config(format!(
                "shadow columns {columns} exceed image width {IMAGE_SIDE}"
            )));
        }
        Ok(ShadowSpec { columns, intensity })
    }
}

/// Loads one CIFAR-10 binary file (records of 1 label byte + 3072 pixel
/// bytes, planar RGB).
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(format!(
            "{}: size {} is not a positive multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * PIXELS_PER_IMAGE);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0];
        if u32::from(label) >= CIFAR_CLASSES {
            return Err(Error::format(format!(
                "{}: label byte {label} >= {CIFAR_CLASSES}",
                path.display()
            )));
        }
        labels.push(u16::from(label));
        images.extend_from_slice(&rec[1..]);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cifar10".to_string());
    ImageDataset::new(name, images, labels, CIFAR_CLASSES)
}

/// Writes a dataset in CIFAR-10 binary layout. Requires <= 256 classes.
pub fn save_cifar10_binary(ds: &ImageDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if ds.class_count > 256 {
        return Err(Error::config(format!(
            "CIFAR-10 layout stores 1-byte labels; dataset has {} classes",
            ds.class_count
        )));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut rec = Vec::with_capacity(CIFAR_RECORD);
    for i in 0..ds.len() {
        rec.clear();
        rec.push(ds.labels[i] as u8);
        rec.extend_from_slice(ds.image(i));
        f.write_all(&rec).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads the generic raw format: magic "RAWI", u32 LE count, u32 LE
/// class_count, u8 label width (1 or 2), then records of label bytes (LE)
/// followed by 3072 planar pixel bytes. ImageNet 32x32 and other corpora
/// are expected to be converted into this layout externally.
pub fn load_raw(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[0..4] != RAW_MAGIC {
        return Err(Error::format(format!(
            "{}: missing RAWI header",
            path.display()
        )));
    }
    let count = LittleEndian::read_u32(&bytes[4..8]) as usize;
    let class_count = LittleEndian::read_u32(&bytes[8..12]);
    let label_bytes = bytes[12] as usize;
    if label_bytes != 1 && label_bytes != 2 {
        return Err(Error::format(format!(
            "{}: label width must be 1 or 2, got {label_bytes}",
            path.display()
        )));
    }
    let record = label_bytes + PIXELS_PER_IMAGE;
    let body = &bytes[13..];
    if body.len() != count * record {
        return Err(Error::format(format!(
            "{}: expected {} record bytes, found {}",
            path.display(),
            count * record,
            body.len()
        )));
    }
    let mut images = Vec::with_capacity(count * PIXELS_PER_IMAGE);
    let mut labels = Vec::with_capacity(count);
    for rec in body.chunks_exact(record) {
        let label = if label_bytes == 1 {
            u16::from(rec[0])
        } else {
            LittleEndian::read_u16(&rec[0..2])
        };
        if u32::from(label) >= class_count {
            return Err(Error::format(format!(
                "{}: label {label} >= {class_count}",
                path.display()
            )));
        }
        labels.push(label);
        images.extend_from_slice(&rec[label_bytes..]);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "raw".to_string());
    ImageDataset::new(name, images, labels, class_count)
}

/// Writes the generic raw format; picks 1-byte labels when they fit.
pub fn save_raw(ds: &ImageDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let label_bytes: u8 = if ds.class_count <= 256 { 1 } else { 2 };
    let mut out = Vec::with_capacity(13 + ds.len() * (label_bytes as usize + PIXELS_PER_IMAGE));
    out.extend_from_slice(RAW_MAGIC);
    let mut buf4 = [0u8; 4];
    LittleEndian::write_u32(&mut buf4, ds.len() as u32);
    out.extend_from_slice(&buf4);
    LittleEndian::write_u32(&mut buf4, ds.class_count);
    out.extend_from_slice(&buf4);
    out.push(label_bytes);
    for i in 0..ds.len() {
        if label_bytes == 1 {
            out.push(ds.labels[i] as u8);
        } else {
            let mut b = [0u8; 2];
            LittleEndian::write_u16(&mut b, ds.labels[i]);
            out.extend_from_slice(&b);
        }
        out.extend_from_slice(ds.image(i));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Splits into disjoint train/validation subsets. The permutation is fully
/// determined by `seed`; train takes the first `n - floor(n*val_fraction)`
/// permuted records, validation the rest. Recombining with
/// [`ImageDataset::concat`] restores every record.
pub fn split_train_val(
    ds: &ImageDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if ds.is_empty() {
        return Err(Error::config("cannot split an empty dataset"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n = ds.len();
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let n_train = n - n_val;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let train = ds.subset(&perm[..n_train], format!("{}-train", ds.name));
    let val = ds.subset(&perm[n_train..], format!("{}-val", ds.name));
    Ok((train, val))
}

/// Multiplies pixels in the first `spec.columns` columns of every channel by
/// `spec.intensity`, rounding to the nearest 8-bit value (half away from
/// zero). Emulates a shadow as seen by an 8-bit camera; labels unchanged.
pub fn apply_shadow(ds: &ImageDataset, spec: ShadowSpec) -> ImageDataset {
    let mut images = ds.images.clone();
    let intensity = spec.intensity as f64;
    for img in images.chunks_exact_mut(PIXELS_PER_IMAGE) {
        for plane in img.chunks_exact_mut(IMAGE_SIDE * IMAGE_SIDE) {
            for row in plane.chunks_exact_mut(IMAGE_SIDE) {
                for v in row[..spec.columns].iter_mut() {
                    *v = (f64::from(*v) * intensity).round() as u8;
                }
            }
        }
    }
    ImageDataset {
        name: format!("{}-shadow", ds.name),
        images,
        labels: ds.labels.clone(),
        class_count: ds.class_count,
    }
}

/// Images as `f32` in `[0, 1]`, planar, one contiguous block.
#[derive(Clone, Debug)]
pub struct FloatImages {
    data: Vec<f32>,
    len: usize,
}

impl FloatImages {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.data[i * PIXELS_PER_IMAGE..(i + 1) * PIXELS_PER_IMAGE]
    }

    /// All pixels of all images, contiguous.
    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Multiplies every pixel by `c` (uniform illumination change).
    pub fn scaled(&self, c: f32) -> FloatImages {
        FloatImages {
            data: self.data.iter().map(|v| v * c).collect(),
            len: self.len,
        }
    }
}

/// Scales pixels from `[0, 255]` to `[0, 1]`.
pub fn to_float(ds: &ImageDataset) -> FloatImages {
    FloatImages {
        data: ds.images.iter().map(|&v| f32::from(v) / 255.0).collect(),
        len: ds.len(),
    }
}
