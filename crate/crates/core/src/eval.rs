//! Confusion-matrix metrics, whole-image evaluation and pseudo-colour prediction.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::{read_image, write_label, write_rgb, Loader, Sample, Transform};
use crate::error::{param_err, Error, Result};
use crate::model::SegModel;
use crate::tensor::{Element, Tensor};

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally every pixel whose ground truth is not `ignore_index`.
    pub fn update(&mut self, pred: &[u8], gt: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return param_err(format!(
                "prediction has {} pixels but ground truth has {}",
                pred.len(),
                gt.len()
            ));
        }
        let c = self.classes;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore_index {
                continue;
            }
            if p as usize >= c {
                return param_err(format!("prediction {p} at pixel {i} is not below {c} classes"));
            }
            if g as usize >= c {
                return Err(Error::Data(format!("ground truth {g} at pixel {i} is not below {c} classes")));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "class count mismatch");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class never occurs in either map.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes.
    pub fn mean_iou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric("mean IoU with no class present".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_acc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("pixel accuracy over zero pixels".into()));
        }
        let trace: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        Ok(trace as f64 / total as f64)
    }

    pub fn metrics(&self) -> Result<Metrics> {
        Ok(Metrics {
            miou: self.mean_iou()?,
            per_class_iou: self.iou_per_class(),
            pixel_acc: self.pixel_acc()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_acc: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mIoU: {:.6} pixel_acc: {:.6}", self.miou, self.pixel_acc)?;
        for (i, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => write!(f, "\nclass {i}: {v:.6}")?,
                None => write!(f, "\nclass {i}: absent")?,
            }
        }
        Ok(())
    }
}

/// Keep only the deterministic preprocessing steps of a transform chain.
pub fn eval_transforms(chain: &[Transform]) -> Vec<Transform> {
    chain.iter().filter(|t| matches!(t, Transform::Normalize { .. })).cloned().collect()
}

/// Whole-image inference over every record of `loader`, accumulated into one matrix.
pub fn evaluate<T: Element>(model: &mut SegModel<T>, loader: &Loader, ignore_index: u8) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for b in 0..loader.batches_per_epoch() {
        let batch = loader.batch(0, b)?;
        let pred = model.predict(&batch.images.cast())?;
        cm.update(&pred, &batch.labels, ignore_index)?;
    }
    cm.metrics()
}

/// 256-entry palette: bits of the index spread over the high bits of R, G and B.
pub fn palette() -> [[u8; 3]; 256] {
    let mut pal = [[0u8; 3]; 256];
    for (i, entry) in pal.iter_mut().enumerate() {
        let mut c = i;
        let mut shift = 7;
        while c > 0 {
            for (ch, v) in entry.iter_mut().enumerate() {
                *v |= (((c >> ch) & 1) as u8) << shift;
            }
            c >>= 3;
            shift -= 1;
        }
    }
    pal
}

pub fn colorize(label: &[u8]) -> Vec<u8> {
    let pal = palette();
    label.iter().flat_map(|&l| pal[l as usize]).collect()
}

/// Normalize (if requested), run the model and write `<stem>_label.png` and
/// `<stem>_color.png` into `out_dir`.
pub fn predict_image<T: Element>(
    model: &mut SegModel<T>,
    image_path: &Path,
    preprocess: &[Transform],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let image = read_image(image_path)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut sample = Sample::new(image, vec![0; h * w])?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for t in preprocess {
        sample = t.apply(sample, &mut rng)?;
    }
    let batch: Tensor<T> = sample.image.reshape(vec![1, 3, h, w])?.cast();
    let label = model.predict(&batch)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let label_path = out_dir.join(format!("{stem}_label.png"));
    let color_path = out_dir.join(format!("{stem}_color.png"));
    write_label(&label_path, h, w, &label)?;
    write_rgb(&color_path, h, w, &colorize(&label))?;
    Ok((label_path, color_path))
}
