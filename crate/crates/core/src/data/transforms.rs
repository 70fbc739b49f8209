use rand::Rng;

use super::Sample;
use crate::error::{param_err, Result};
use crate::tensor::{resize_bilinear, Tensor};

pub const DEFAULT_FLIP_P: f64 = 0.5;
pub const DEFAULT_BRIGHTNESS_DELTA: f64 = 0.25;

/// One augmentation or preprocessing step.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    RandomScale { lo: f64, hi: f64 },
    RandomHflip { p: f64 },
    RandomBrightness { delta: f64 },
    /// `fill: None` pads with the dataset mean, resolved by the loader (mid-grey when
    /// applied on its own).
    RandomCropPad {
        crop_h: usize,
        crop_w: usize,
        fill: Option<[f32; 3]>,
        ignore_index: u8,
    },
    Normalize { mean: [f32; 3], std: [f32; 3] },
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::RandomScale { .. } => "random_scale",
            Transform::RandomHflip { .. } => "random_hflip",
            Transform::RandomBrightness { .. } => "random_brightness",
            Transform::RandomCropPad { .. } => "random_crop_pad",
            Transform::Normalize { .. } => "normalize",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::RandomScale { lo, hi } if !(lo > 0.0 && lo <= hi && hi.is_finite()) => {
                param_err(format!("random_scale needs 0 < lo <= hi, got lo {lo}, hi {hi}"))
            }
            Transform::RandomHflip { p } if !(0.0..=1.0).contains(&p) => {
                param_err(format!("random_hflip p must lie in [0, 1], got {p}"))
            }
            Transform::RandomBrightness { delta } if !(0.0..1.0).contains(&delta) => {
                param_err(format!("random_brightness delta must lie in [0, 1), got {delta}"))
            }
            Transform::RandomCropPad { crop_h, crop_w, .. } if crop_h == 0 || crop_w == 0 => {
                param_err(format!("random_crop_pad needs positive crop dims, got {crop_h}x{crop_w}"))
            }
            Transform::Normalize { std, .. } if std.iter().any(|&s| !(s > 0.0)) => {
                param_err(format!("normalize std must be positive per channel, got {std:?}"))
            }
            _ => Ok(()),
        }
    }

    pub fn apply<R: Rng>(&self, s: Sample, rng: &mut R) -> Result<Sample> {
        self.validate()?;
        match *self {
            Transform::RandomScale { lo, hi } => {
                let f = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                scale(&s, f)
            }
            Transform::RandomHflip { p } => {
                let u: f64 = rng.random();
                Ok(if u < p { hflip(&s) } else { s })
            }
            Transform::RandomBrightness { delta } => {
                let d = if delta == 0.0 { 0.0 } else { rng.random_range(-delta..=delta) };
                Ok(brightness(&s, d as f32))
            }
            Transform::RandomCropPad {
                crop_h,
                crop_w,
                fill,
                ignore_index,
            } => {
                let (ph, pw) = (s.height().max(crop_h), s.width().max(crop_w));
                let top = rng.random_range(0..=ph - crop_h);
                let left = rng.random_range(0..=pw - crop_w);
                crop_pad(&s, crop_h, crop_w, top, left, fill.unwrap_or([0.5; 3]), ignore_index)
            }
            Transform::Normalize { mean, std } => normalize(&s, mean, std),
        }
    }
}

/// Resize by factor `f`: bilinear for the image, nearest-neighbour for the label.
pub fn scale(s: &Sample, f: f64) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let nh = ((f * h as f64).round() as usize).max(1);
    let nw = ((f * w as f64).round() as usize).max(1);
    if (nh, nw) == (h, w) {
        return Ok(s.clone());
    }
    let image = resize_bilinear(&s.image, nh, nw)?;
    let src = |dst: usize, d: usize, n: usize| (((dst as f64 + 0.5) * n as f64 / d as f64).floor() as usize).min(n - 1);
    let mut label = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = src(y, nh, h);
        for x in 0..nw {
            label.push(s.label[sy * w + src(x, nw, w)]);
        }
    }
    Sample::new(image, label)
}

/// Reverse column order of image and label together.
pub fn hflip(s: &Sample) -> Sample {
    let w = s.width();
    let image = Tensor::from_fn(s.image.shape().to_vec(), |i| {
        let x = i % w;
        s.image.data()[i - x + (w - 1 - x)]
    });
    let label = s.label.chunks(w).flat_map(|row| row.iter().rev().copied()).collect();
    Sample { image, label }
}

/// Add `d` to every image value, clamped to `[0, 1]`.
pub fn brightness(s: &Sample, d: f32) -> Sample {
    let mut image = s.image.clone();
    image.data_mut().iter_mut().for_each(|v| *v = (*v + d).clamp(0.0, 1.0));
    Sample {
        image,
        label: s.label.clone(),
    }
}

/// Pad bottom/right up to the crop size (image with `fill`, label with `ignore_index`),
/// then cut the `crop_h x crop_w` window at `(top, left)`.
pub fn crop_pad(s: &Sample, crop_h: usize, crop_w: usize, top: usize, left: usize, fill: [f32; 3], ignore_index: u8) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let (ph, pw) = (h.max(crop_h), w.max(crop_w));
    if top + crop_h > ph || left + crop_w > pw {
        return param_err(format!(
            "crop {crop_h}x{crop_w} at ({top}, {left}) leaves the padded {ph}x{pw} sample"
        ));
    }
    let mut image = Vec::with_capacity(3 * crop_h * crop_w);
    for (c, &fill_c) in fill.iter().enumerate() {
        for y in top..top + crop_h {
            for x in left..left + crop_w {
                image.push(if y < h && x < w { s.image.data()[(c * h + y) * w + x] } else { fill_c });
            }
        }
    }
    let mut label = Vec::with_capacity(crop_h * crop_w);
    for y in top..top + crop_h {
        for x in left..left + crop_w {
            label.push(if y < h && x < w { s.label[y * w + x] } else { ignore_index });
        }
    }
    Sample::new(Tensor::new(vec![3, crop_h, crop_w], image)?, label)
}

pub fn normalize(s: &Sample, mean: [f32; 3], std: [f32; 3]) -> Result<Sample> {
    if let Some(c) = std.iter().position(|&v| !(v > 0.0)) {
        return param_err(format!("normalize std for channel {c} is {}, must be positive", std[c]));
    }
    let plane = s.height() * s.width();
    let mut image = s.image.clone();
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - mean[c]) / std[c];
    }
    Ok(Sample {
        image,
        label: s.label.clone(),
    })
}

pub fn denormalize(s: &Sample, mean: [f32; 3], std: [f32; 3]) -> Sample {
    let plane = s.height() * s.width();
    let mut image = s.image.clone();
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = *v * std[c] + mean[c];
    }
    Sample {
        image,
        label: s.label.clone(),
    }
}
