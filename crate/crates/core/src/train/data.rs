//! Datasets and the UCI HAR loader.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples `[S, ...]` with class labels in `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.rank() == 0 || x.dim(0) != labels.len() {
            return Err(Error::LengthMismatch(if x.rank() == 0 { 0 } else { x.dim(0) }, labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::ShapeMismatch(format!("label {l} for {n_classes} classes")));
        }
        x.as_f32()?;
        Ok(Dataset { x, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.x.len() / self.len().max(1)
    }

    /// Samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let per = self.sample_len();
        let src = self.x.as_f32()?;
        let mut x = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            x.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        Ok(Dataset {
            x: Tensor::from_f32(shape, x)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        })
    }

    /// Appends, for `j` in `1..shifts`, a copy of every `[C, L]` sample
    /// advanced by `j * stride` steps and zero-filled at the end.
    pub fn stride_shifted(&self, stride: usize, shifts: usize) -> Result<Dataset> {
        if self.x.rank() != 3 {
            return Err(Error::ShapeMismatch(format!("stride shifts need [S, C, L] samples, got {:?}", self.x.shape())));
        }
        let (s, c, l) = (self.x.dim(0), self.x.dim(1), self.x.dim(2));
        let src = self.x.as_f32()?;
        let mut x = src.to_vec();
        let mut labels = self.labels.clone();
        for j in 1..shifts.max(1) {
            let d = j * stride;
            for i in 0..s {
                for ch in 0..c {
                    let row = &src[(i * c + ch) * l..(i * c + ch + 1) * l];
                    x.extend((0..l).map(|t| row.get(t + d).copied().unwrap_or(0.0)));
                }
            }
            labels.extend_from_slice(&self.labels);
        }
        Dataset::new(Tensor::from_f32(vec![labels.len(), c, l], x)?, labels, self.n_classes)
    }
}

/// Per-channel min-max scaling onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl Normalizer {
    /// Statistics of `[S, C, L]` samples.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::ShapeMismatch(format!("expected [S, C, L], got {:?}", x.shape())));
        }
        let (c, l) = (x.dim(1), x.dim(2));
        let mut min = vec![f32::INFINITY; c];
        let mut max = vec![f32::NEG_INFINITY; c];
        for (i, &v) in x.as_f32()?.iter().enumerate() {
            let ch = (i / l) % c;
            min[ch] = min[ch].min(v);
            max[ch] = max[ch].max(v);
        }
        Ok(Normalizer { min, max })
    }

    /// Values outside the fitted range are clipped.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.dim(1) != self.min.len() {
            return Err(Error::ShapeMismatch(format!("{} channels, got {:?}", self.min.len(), x.shape())));
        }
        let (c, l) = (x.dim(1), x.dim(2));
        let out = x
            .as_f32()?
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / l) % c;
                let span = self.max[ch] - self.min[ch];
                if span > 0.0 { ((v - self.min[ch]) / span).clamp(0.0, 1.0) } else { 0.0 }
            })
            .collect();
        Tensor::from_f32(x.shape().to_vec(), out)
    }
}

pub const HAR_CHANNELS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];
pub const HAR_STEPS: usize = 128;
pub const HAR_CLASSES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct HarDataset {
    pub train: Dataset,
    pub test: Dataset,
}

impl HarDataset {
    /// Both splits scaled with statistics of the training split.
    pub fn normalized(&self) -> Result<(HarDataset, Normalizer)> {
        let norm = Normalizer::fit(&self.train.x)?;
        Ok((self.normalized_with(&norm)?, norm))
    }

    pub fn normalized_with(&self, norm: &Normalizer) -> Result<HarDataset> {
        let scale = |d: &Dataset| Dataset::new(norm.apply(&d.x)?, d.labels.clone(), d.n_classes);
        Ok(HarDataset { train: scale(&self.train)?, test: scale(&self.test)? })
    }
}

fn read(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_rows(path: &Path, cols: usize) -> Result<Vec<f32>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let before = out.len();
        for tok in line.split_whitespace() {
            out.push(tok.parse::<f32>().map_err(|e| Error::Csv(format!("{}:{}: {e}", path.display(), n + 1)))?);
        }
        if out.len() - before != cols {
            return Err(Error::RaggedRow { file: path.to_path_buf(), line: n + 1, expected: cols, found: out.len() - before });
        }
    }
    Ok(out)
}

fn parse_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let tok = line.trim();
        let label: i64 = tok.parse().map_err(|e| Error::Csv(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !(1..=HAR_CLASSES as i64).contains(&label) {
            return Err(Error::LabelOutOfRange { file: path.to_path_buf(), line: n + 1, label });
        }
        out.push(label as usize - 1);
    }
    Ok(out)
}

fn split_paths(dir: &Path, split: &str) -> (Vec<PathBuf>, PathBuf) {
    let base = dir.join(split);
    let signals = HAR_CHANNELS
        .iter()
        .map(|c| base.join("Inertial Signals").join(format!("{c}_{split}.txt")))
        .collect();
    (signals, base.join(format!("y_{split}.txt")))
}

pub fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let (signals, label_path) = split_paths(dir, split);
    let labels = parse_labels(&label_path)?;
    let s = labels.len();
    let mut x = vec![0f32; s * HAR_CHANNELS.len() * HAR_STEPS];
    for (ch, path) in signals.iter().enumerate() {
        let rows = parse_rows(path, HAR_STEPS)?;
        if rows.len() / HAR_STEPS != s {
            return Err(Error::LengthMismatch(rows.len() / HAR_STEPS, s));
        }
        for i in 0..s {
            let dst = (i * HAR_CHANNELS.len() + ch) * HAR_STEPS;
            x[dst..dst + HAR_STEPS].copy_from_slice(&rows[i * HAR_STEPS..(i + 1) * HAR_STEPS]);
        }
    }
    Dataset::new(Tensor::from_f32(vec![s, HAR_CHANNELS.len(), HAR_STEPS], x)?, labels, HAR_CLASSES)
}

/// Reads the `train/` and `test/` splits of the UCI HAR layout under `dir`.
pub fn load_har(dir: impl AsRef<Path>) -> Result<HarDataset> {
    let dir = dir.as_ref();
    Ok(HarDataset { train: load_split(dir, "train")?, test: load_split(dir, "test")? })
}

/// Writes `data` in the UCI HAR layout; labels are stored 1-based.
pub fn write_har_split(dir: impl AsRef<Path>, split: &str, data: &Dataset) -> Result<()> {
    let (signals, label_path) = split_paths(dir.as_ref(), split);
    fs::create_dir_all(signals[0].parent().expect("signal files live in a directory"))?;
    let x = data.x.as_f32()?;
    let c = HAR_CHANNELS.len();
    for (ch, path) in signals.iter().enumerate() {
        let mut s = String::new();
        for i in 0..data.len() {
            let row = &x[(i * c + ch) * HAR_STEPS..(i * c + ch + 1) * HAR_STEPS];
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        fs::write(path, s)?;
    }
    let labels: String = data.labels.iter().map(|l| format!("{}\n", l + 1)).collect();
    fs::write(label_path, labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Dataset {
        let s = 4;
        let x = (0..s * 9 * HAR_STEPS).map(|i| (i % 17) as f32 * 0.01 - 0.05).collect();
        Dataset::new(Tensor::from_f32(vec![s, 9, HAR_STEPS], x).unwrap(), vec![0, 0, 1, 1], HAR_CLASSES).unwrap()
    }

    #[test]
    fn round_trips_the_layout() {
        let dir = tempfile::tempdir().unwrap();
        let d = fixture();
        write_har_split(dir.path(), "train", &d).unwrap();
        write_har_split(dir.path(), "test", &d).unwrap();
        let har = load_har(dir.path()).unwrap();
        assert_eq!(har.train.x.shape(), &[4, 9, 128]);
        assert_eq!(har.test.labels, vec![0, 0, 1, 1]);
        assert!(har.train.x.bit_eq(&d.x));
    }

    #[test]
    fn parses_uci_number_format() {
        assert_eq!("1.808515e-004".parse::<f32>().unwrap(), 1.808515e-4);
    }

    #[test]
    fn loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_har(dir.path()), Err(Error::MissingFile(_))));
        let d = fixture();
        write_har_split(dir.path(), "train", &d).unwrap();
        write_har_split(dir.path(), "test", &d).unwrap();
        let (signals, labels) = split_paths(dir.path(), "train");
        let text = fs::read_to_string(&signals[3]).unwrap();
        let short: Vec<&str> = text.lines().next().unwrap().split_whitespace().take(127).collect();
        fs::write(&signals[3], format!("{}\n", short.join(" "))).unwrap();
        assert!(matches!(
            load_har(dir.path()),
            Err(Error::RaggedRow { expected: 128, found: 127, line: 1, .. })
        ));
        fs::write(&labels, "1\n7\n1\n1\n").unwrap();
        assert!(matches!(load_har(dir.path()), Err(Error::LabelOutOfRange { label: 7, line: 2, .. })));
    }

    #[test]
    fn normalizer_maps_onto_unit_range() {
        let d = fixture();
        let n = Normalizer::fit(&d.x).unwrap();
        let y = n.apply(&d.x).unwrap();
        let v = y.as_f32().unwrap();
        assert!(v.iter().all(|&e| (0.0..=1.0).contains(&e)));
        assert!(v.contains(&0.0) && v.contains(&1.0));
    }

    #[test]
    fn stride_shift_advances_samples() {
        let x = Tensor::from_f32(vec![1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let d = Dataset::new(x, vec![1], 2).unwrap().stride_shifted(2, 3).unwrap();
        assert_eq!(d.labels, vec![1, 1, 1]);
        assert_eq!(
            d.x.as_f32().unwrap(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 4.0, 5.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]
        );
    }
}
