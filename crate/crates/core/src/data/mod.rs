//! Dataset ingestion, validation, augmentation and batching.

mod check;
mod loader;
mod synthetic;
mod transforms;

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use check::{check_dataset, CheckReport, Violation, ViolationKind};
pub use loader::{sample_seed, Batch, Loader};
pub use synthetic::{write_synthetic_shapes, SyntheticShapes};
pub use transforms::{
    brightness, crop_pad, denormalize, hflip, normalize, scale, Transform, DEFAULT_BRIGHTNESS_DELTA, DEFAULT_FLIP_P,
};

/// Label value excluded from the loss and the metrics.
pub const IGNORE_INDEX: u8 = 255;

/// One line of a file list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub line_no: usize,
}

/// An image (`3 x H x W`, values in `[0, 1]` before normalization) and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    /// Row-major `H x W` class indices.
    pub label: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, label: Vec<u8>) -> Result<Self> {
        match image.shape() {
            &[3, h, w] if h * w == label.len() => Ok(Self { image, label }),
            s => Err(Error::Shape(format!(
                "sample image {s:?} does not match a label of {} pixels",
                label.len()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Where a split's records come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    FileList { list: PathBuf },
    /// Generated on first use into `dir`, then read back like a file list.
    SyntheticShapes { dir: PathBuf, count: usize, size: usize, seed: u64 },
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::FileList { .. } => "file_list",
            DatasetSpec::SyntheticShapes { .. } => "synthetic_shapes",
        }
    }

    /// The file list backing this dataset.
    pub fn list_path(&self) -> PathBuf {
        match self {
            DatasetSpec::FileList { list } => list.clone(),
            DatasetSpec::SyntheticShapes { dir, .. } => dir.join("train.txt"),
        }
    }

    /// Materialize synthetic data if needed and parse the list.
    pub fn records(&self) -> Result<Vec<SampleRecord>> {
        if let DatasetSpec::SyntheticShapes { dir, count, size, seed } = self {
            if !self.list_path().exists() {
                write_synthetic_shapes(dir, *count, *size, *seed)?;
            }
        }
        parse_file_list(&self.list_path())
    }
}

/// Parse `"<image> <label>"` lines; relative paths resolve against the list's directory.
pub fn parse_file_list(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        match parts[..] {
            [img, lab] if !img.is_empty() && !lab.is_empty() => records.push(SampleRecord {
                image_path: base.join(img),
                label_path: base.join(lab),
                line_no,
            }),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    column: 1,
                    message: format!(
                        "{}: expected '<image_path> <label_path>' separated by one space, got {} field(s)",
                        path.display(),
                        parts.len()
                    ),
                })
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: empty dataset", path.display())));
    }
    Ok(records)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("cannot decode image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Single-channel label map as `(height, width, values)`.
pub fn read_label(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("cannot decode label {}: {e}", path.display())))?;
    if img.color().channel_count() != 1 {
        return Err(Error::Data(format!(
            "label {} must be single-channel, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let img = img.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

pub fn load_sample(rec: &SampleRecord) -> Result<Sample> {
    let cite = |e: Error| e.context(format!("record at line {}", rec.line_no));
    let image = read_image(&rec.image_path).map_err(cite)?;
    let (h, w, label) = read_label(&rec.label_path).map_err(cite)?;
    if image.shape()[1..] != [h, w] {
        return Err(cite(Error::Data(format!(
            "image {:?} and label {h}x{w} differ in size",
            &image.shape()[1..]
        ))));
    }
    Sample::new(image, label)
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    f(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("cannot write {}: {other}", path.display())),
    })
}

/// Write a `3 x H x W` image in `[0, 1]` as 8-bit RGB PNG.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |c: usize| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    save(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}

pub fn write_label(path: &Path, h: usize, w: usize, label: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, label.to_vec())
        .ok_or_else(|| Error::Shape(format!("label of {} pixels is not {h}x{w}", label.len())))?;
    save(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}

pub fn write_rgb(path: &Path, h: usize, w: usize, rgb: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, rgb.to_vec())
        .ok_or_else(|| Error::Shape(format!("rgb buffer of {} bytes is not {h}x{w}x3", rgb.len())))?;
    save(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}

/// Per-channel mean over all pixels of the given images.
pub fn channel_mean(records: &[SampleRecord]) -> Result<[f32; 3]> {
    let mut acc = [0f64; 3];
    let mut count = 0usize;
    for rec in records {
        let img = read_image(&rec.image_path).map_err(|e| e.context(format!("record at line {}", rec.line_no)))?;
        let plane = img.numel() / 3;
        for (c, a) in acc.iter_mut().enumerate() {
            *a += img.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        count += plane;
    }
    Ok(acc.map(|a| (a / count.max(1) as f64) as f32))
}
