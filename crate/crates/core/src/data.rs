//! Labeled image datasets.
//!
//! Images are ingested from IDX files (big-endian magic `0x00000803` for
//! images, `0x00000801` for labels) with pixel values scaled to `[0, 1]`.
//! The 4-class variant keeps labels `{0,1,2,3}` and leaves them unchanged.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset with flattened feature rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n_examples, input_dim]`, values in `[0, 1]` for image data.
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Keeps only the examples whose label is below `num_classes`.
    pub fn filter_classes(&self, num_classes: usize) -> Dataset {
        self.filter_by(|label| (label as usize) < num_classes, num_classes)
    }

    /// Keeps only the examples whose label passes `keep`.
    pub fn filter_by(&self, keep: impl Fn(u8) -> bool, num_classes: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        let mut features = Array2::zeros((idx.len(), self.input_dim()));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            num_classes,
        }
    }

    /// Per-class example counts, length `num_classes`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// True when every class in `0..num_classes` has at least one example.
    pub fn covers_all_classes(&self) -> bool {
        self.class_counts().iter().all(|&c| c > 0)
    }
}

fn read_be_u32(bytes: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

/// Reads an IDX image file into `[n, rows*cols]` rows scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::format(format!("{}: truncated IDX header", path.display())));
    }
    let magic = read_be_u32(&bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4) as usize;
    let rows = read_be_u32(&bytes, 8) as usize;
    let cols = read_be_u32(&bytes, 12) as usize;
    let dim = rows * cols;
    if bytes.len() != 16 + n * dim {
        return Err(Error::format(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            n * dim,
            bytes.len() - 16
        )));
    }
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        let base = 16 + i * dim;
        for j in 0..dim {
            out[(i, j)] = bytes[base + j] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Reads an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::format(format!("{}: truncated IDX header", path.display())));
    }
    let magic = read_be_u32(&bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(format!(
            "{}: expected {} label bytes, found {}",
            path.display(),
            n,
            bytes.len() - 8
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an image/label IDX pair into a dataset with `num_classes` labels.
pub fn load_idx_pair(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let features = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if features.nrows() != labels.len() {
        return Err(Error::format(format!(
            "image/label count mismatch: {} vs {}",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
        return Err(Error::format(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(Dataset {
        features,
        labels,
        num_classes,
    })
}

/// The standard MNIST file names under a data directory.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Loads the MNIST train/test pair from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(&dir.join(MNIST_FILES[0]), &dir.join(MNIST_FILES[1]), 10)?;
    let test = load_idx_pair(&dir.join(MNIST_FILES[2]), &dir.join(MNIST_FILES[3]), 10)?;
    Ok((train, test))
}

/// Loads MNIST restricted to labels `{0,1,2,3}`.
pub fn load_mnist4(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = load_mnist(dir)?;
    Ok((train.filter_classes(4), test.filter_classes(4)))
}

/// Deterministic Gaussian-blob dataset used by tests and smoke runs.
///
/// Class centers sit on scaled unit axes so any reasonable classifier can
/// separate them; `spread` controls difficulty.
pub fn gaussian_blobs(
    rng: &mut impl Rng,
    n_per_class: usize,
    input_dim: usize,
    num_classes: usize,
    spread: f64,
) -> Dataset {
    assert!(input_dim >= num_classes, "need one axis per class");
    let noise = Normal::new(0.0, spread).unwrap();
    let n = n_per_class * num_classes;
    let mut features = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class as u8);
        for j in 0..input_dim {
            let center = if j == class { 1.0 } else { 0.0 };
            features[(i, j)] = center + noise.sample(rng);
        }
    }
    Dataset {
        features,
        labels,
        num_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lbl_path = dir.path().join("lbls");
        write_idx_images(&img_path, &[vec![0, 255, 128, 64], vec![1, 2, 3, 4]], 2, 2);
        write_idx_labels(&lbl_path, &[3, 0]);
        let ds = load_idx_pair(&img_path, &lbl_path, 4).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.features[(0, 0)], 0.0);
        assert_eq!(ds.features[(0, 1)], 1.0);
        assert!((ds.features[(0, 2)] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(ds.labels, vec![3, 0]);
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, [0u8, 0, 9, 9, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert!(matches!(read_idx_images(&path), Err(Error::Format(_))));
    }

    #[test]
    fn class_filter_keeps_low_labels() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lbl_path = dir.path().join("lbls");
        write_idx_images(&img_path, &[vec![9], vec![8], vec![7]], 1, 1);
        write_idx_labels(&lbl_path, &[5, 2, 0]);
        let ds = load_idx_pair(&img_path, &lbl_path, 10).unwrap();
        let four = ds.filter_classes(4);
        assert_eq!(four.labels, vec![2, 0]);
        assert_eq!(four.num_classes, 4);
    }

    #[test]
    fn blobs_cover_all_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = gaussian_blobs(&mut rng, 10, 8, 3, 0.1);
        assert_eq!(ds.len(), 30);
        assert!(ds.covers_all_classes());
        assert_eq!(ds.class_counts(), vec![10, 10, 10]);
    }
}
