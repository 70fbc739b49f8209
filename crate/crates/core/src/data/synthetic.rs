use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_image, write_label, Sample};
use crate::error::{param_err, Error, Result};
use crate::tensor::Tensor;

/// Generated dataset of a rectangle (class 2) and a circle (class 1) on background (class 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticShapes {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticShapes {
    pub const NUM_CLASSES: usize = 3;

    pub fn generate(&self) -> Result<Vec<Sample>> {
        if self.size < 8 || self.count == 0 {
            return param_err(format!(
                "synthetic shapes need size >= 8 and count >= 1, got {}x{}",
                self.count, self.size
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.count).map(|_| draw(&mut rng, self.size)).collect()
    }
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Result<Sample> {
    let nf = n as f32;
    let bg = [rng.random_range(0.35..0.6), rng.random_range(0.35..0.6), rng.random_range(0.35..0.6)];
    let tilt: f32 = rng.random_range(-0.15..0.15);

    let rw = rng.random_range(n / 4..=n / 2);
    let rh = rng.random_range(n / 4..=n / 2);
    let rx = rng.random_range(0..=n - rw);
    let ry = rng.random_range(0..=n - rh);
    let rect_col = [rng.random_range(0.0..0.2), rng.random_range(0.1..0.35), rng.random_range(0.75..1.0)];

    let r = rng.random_range(nf / 7.0..nf / 4.0);
    let cx = rng.random_range(r..nf - r);
    let cy = rng.random_range(r..nf - r);
    let circ_col = [rng.random_range(0.8..1.0), rng.random_range(0.2..0.5), rng.random_range(0.0..0.2)];

    let mut label = vec![0u8; n * n];
    let mut image = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let (class, col) = if (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r {
                (1, circ_col)
            } else if (rx..rx + rw).contains(&x) && (ry..ry + rh).contains(&y) {
                (2, rect_col)
            } else {
                let shade = tilt * (fx / nf - 0.5);
                (0, bg.map(|c| c + shade))
            };
            label[p] = class;
            for c in 0..3 {
                let noise: f32 = rng.random_range(-0.03..0.03);
                image[c * n * n + p] = (col[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    Sample::new(Tensor::new(vec![3, n, n], image)?, label)
}

/// Write `count` samples as PNGs under `dir` plus a `train.txt` list; returns the list path.
pub fn write_synthetic_shapes(dir: &Path, count: usize, size: usize, seed: u64) -> Result<PathBuf> {
    let samples = SyntheticShapes { count, size, seed }.generate()?;
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut list = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img = format!("images/{i:03}.png");
        let lab = format!("labels/{i:03}.png");
        write_image(&dir.join(&img), &s.image)?;
        write_label(&dir.join(&lab), size, size, &s.label)?;
        list.push_str(&format!("{img} {lab}\n"));
    }
    let path = dir.join("train.txt");
    fs::write(&path, list).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
