use std::fmt;
use std::path::Path;

use super::{read_image, read_label, SampleRecord};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    MissingFile,
    Undecodable,
    SizeMismatch,
    LabelOutOfRange,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::MissingFile => "missing-file",
            ViolationKind::Undecodable => "undecodable",
            ViolationKind::SizeMismatch => "size-mismatch",
            ViolationKind::LabelOutOfRange => "label-out-of-range",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub line_no: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

/// Result of [`check_dataset`]; renders as `LINE <n>: <category>: <detail>` lines and a
/// final `OK` or `FAILED (<k> errors)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }

    /// Line numbers that have at least one violation.
    pub fn flagged_lines(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.violations.iter().map(|v| v.line_no).collect();
        v.dedup();
        v
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "LINE {}: {}: {}", v.line_no, v.kind.as_str(), v.detail)?;
        }
        if self.is_ok() {
            write!(f, "OK")
        } else {
            write!(f, "FAILED ({} errors)", self.violations.len())
        }
    }
}

/// Validate every record without stopping at the first problem.
pub fn check_dataset(records: &[SampleRecord], num_classes: usize, ignore_index: u8) -> CheckReport {
    let mut report = CheckReport::default();
    for rec in records {
        report.checked += 1;
        let mut push = |kind, detail: String| {
            report.violations.push(Violation {
                line_no: rec.line_no,
                kind,
                detail,
            })
        };
        let mut missing = false;
        for p in [&rec.image_path, &rec.label_path] {
            if !p.is_file() {
                push(ViolationKind::MissingFile, format!("{} does not exist", p.display()));
                missing = true;
            }
        }
        if missing {
            continue;
        }
        let decode_err = |path: &Path, e: Error| match e.root() {
            Error::Io { source, .. } => format!("{}: {source}", path.display()),
            other => other.to_string(),
        };
        let image = read_image(&rec.image_path).map_err(|e| decode_err(&rec.image_path, e));
        let label = read_label(&rec.label_path).map_err(|e| decode_err(&rec.label_path, e));
        let (image, (h, w, label)) = match (image, label) {
            (Ok(i), Ok(l)) => (i, l),
            (i, l) => {
                for e in [i.err(), l.err()].into_iter().flatten() {
                    push(ViolationKind::Undecodable, e);
                }
                continue;
            }
        };
        let (ih, iw) = (image.shape()[1], image.shape()[2]);
        if (ih, iw) != (h, w) {
            push(
                ViolationKind::SizeMismatch,
                format!("image is {ih}x{iw} but label is {h}x{w}"),
            );
        }
        let bad: Vec<(usize, u8)> = label
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v as usize >= num_classes && v != ignore_index)
            .map(|(i, &v)| (i, v))
            .collect();
        if let Some(&(pixel, value)) = bad.first() {
            push(
                ViolationKind::LabelOutOfRange,
                format!(
                    "{} pixel(s) outside 0..{num_classes} (first: value {value} at pixel {pixel})",
                    bad.len()
                ),
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_image, write_label};
    use crate::tensor::Tensor;
    use std::fs;

    fn record(dir: &Path, idx: usize, h: usize, w: usize, lh: usize, lw: usize, max_label: u8) -> SampleRecord {
        let img = dir.join(format!("img{idx}.png"));
        let lab = dir.join(format!("lab{idx}.png"));
        write_image(&img, &Tensor::full(vec![3, h, w], 0.5)).unwrap();
        let label: Vec<u8> = (0..lh * lw).map(|i| (i % (max_label as usize + 1)) as u8).collect();
        write_label(&lab, lh, lw, &label).unwrap();
        SampleRecord {
            image_path: img,
            label_path: lab,
            line_no: idx + 1,
        }
    }

    #[test]
    fn clean_set_reports_ok() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..4).map(|i| record(dir.path(), i, 8, 8, 8, 8, 2)).collect();
        let r = check_dataset(&recs, 3, 255);
        assert!(r.is_ok());
        assert_eq!(r.to_string(), "OK");
    }

    #[test]
    fn each_corruption_is_reported_with_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs: Vec<_> = (0..4).map(|i| record(dir.path(), i, 8, 8, 8, 8, 2)).collect();
        recs[0] = record(dir.path(), 0, 8, 8, 8, 8, 3);
        recs[1] = record(dir.path(), 1, 64, 64, 32, 32, 2);
        fs::remove_file(&recs[2].image_path).unwrap();
        fs::write(&recs[3].label_path, b"not a png").unwrap();
        let r = check_dataset(&recs, 3, 255);
        let got: Vec<(usize, ViolationKind)> = r.violations.iter().map(|v| (v.line_no, v.kind)).collect();
        assert_eq!(
            got,
            vec![
                (1, ViolationKind::LabelOutOfRange),
                (2, ViolationKind::SizeMismatch),
                (3, ViolationKind::MissingFile),
                (4, ViolationKind::Undecodable),
            ]
        );
        let text = r.to_string();
        assert!(text.starts_with("LINE 1: label-out-of-range: "));
        assert!(text.ends_with("FAILED (4 errors)"));
    }

    #[test]
    fn ignore_index_is_not_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(dir.path(), 0, 4, 4, 4, 4, 1);
        write_label(&rec.label_path, 4, 4, &[255; 16]).unwrap();
        assert!(check_dataset(&[rec], 2, 255).is_ok());
    }
}
