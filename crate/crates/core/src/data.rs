//! Datasets: synthetic generators, deterministic splits, and IDX files.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor2;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            features,
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

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Affinely maps all features into `[0, 1]` using the global min and max.
    pub fn normalized_to_unit(&self) -> Dataset {
        let (lo, hi) = self
            .features
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let mut features = self.features.clone();
        for v in features.data_mut() {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        Dataset {
            features,
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }

    /// Deterministic train/test split: a seeded permutation, with the first
    /// `floor(test_fraction * n)` samples going to the test set. Both halves
    /// keep the original sample order.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Argument(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * n as f64).floor() as usize;
        let mut test = order[..n_test].to_vec();
        let mut train = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Two concentric circles (radii 1 and 2) with Gaussian radial noise.
/// Labels alternate, so classes are balanced within one sample.
pub fn gen_circles(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 samples, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Argument(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let angle: f64 = rng.random::<f64>() * TAU;
        let z: f64 = rng.sample(StandardNormal);
        let radius = (class + 1) as f64 + noise * z;
        data.push(radius * angle.cos());
        data.push(radius * angle.sin());
        labels.push(class);
    }
    Dataset::new(Tensor2::from_vec(n, 2, data)?, labels, 2)
}

/// Isotropic Gaussian blobs, one class per center, assigned round-robin.
pub fn gen_blobs(n: usize, centers: &[Vec<f64>], spread: f64, seed: u64) -> Result<Dataset> {
    if centers.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 centers, got {}",
            centers.len()
        )));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::Dimension("centers must share a nonzero dimension".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Argument(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % centers.len();
        for &c in &centers[class] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(c + spread * z);
        }
        labels.push(class);
    }
    Dataset::new(Tensor2::from_vec(n, dim, data)?, labels, centers.len())
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            FormatError::Truncated {
                path: path.to_path_buf(),
                detail: format!("header ends before byte {}", offset + 4),
            }
            .into()
        })
}

fn check_magic(expected: u32, found: u32) -> Result<()> {
    if expected != found {
        return Err(FormatError::BadMagic { expected, found }.into());
    }
    Ok(())
}

/// Loads an IDX image/label pair; pixel bytes are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    check_magic(IDX_IMAGES_MAGIC, read_u32(&images, 0, images_path)?)?;
    let n_images = read_u32(&images, 4, images_path)? as usize;
    let rows = read_u32(&images, 8, images_path)? as usize;
    let cols = read_u32(&images, 12, images_path)? as usize;

    check_magic(IDX_LABELS_MAGIC, read_u32(&labels, 0, labels_path)?)?;
    let n_labels = read_u32(&labels, 4, labels_path)? as usize;

    if n_images != n_labels {
        return Err(FormatError::CountMismatch {
            images: n_images,
            labels: n_labels,
        }
        .into());
    }
    let pixels = n_images * rows * cols;
    let payload = &images[16..];
    if payload.len() != pixels {
        return Err(FormatError::Truncated {
            path: images_path.to_path_buf(),
            detail: format!("expected {pixels} pixel bytes, found {}", payload.len()),
        }
        .into());
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n_labels {
        return Err(FormatError::Truncated {
            path: labels_path.to_path_buf(),
            detail: format!("expected {n_labels} label bytes, found {}", label_bytes.len()),
        }
        .into());
    }

    let features = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(Tensor2::from_vec(n_images, rows * cols, features)?, labels, class_count)
}

/// Writes `data` as an IDX pair with each sample stored as a `1 x d` image.
/// Features must lie in `[0, 1]`; they are quantized to `round(255 v)`.
pub fn write_idx(
    data: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    if data.class_count > 256 {
        return Err(Error::Argument("IDX labels hold at most 256 classes".into()));
    }
    if let Some(v) = data.features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "feature {v} outside [0, 1]; normalize before writing IDX"
        )));
    }
    let n = data.len() as u32;
    let d = data.features.cols() as u32;

    let mut img = Vec::with_capacity(16 + data.features.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&1u32.to_be_bytes());
    img.extend_from_slice(&d.to_be_bytes());
    img.extend(data.features.data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));

    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_circles_sit_on_their_radii() {
        let d = gen_circles(200, 0.0, 3).unwrap();
        for (i, &l) in d.labels.iter().enumerate() {
            let r = d.features.row(i)[0].hypot(d.features.row(i)[1]);
            assert!((r - (l + 1) as f64).abs() < 1e-12, "radius {r} for class {l}");
        }
    }

    #[test]
    fn generators_are_pure() {
        assert_eq!(gen_circles(50, 0.1, 9).unwrap(), gen_circles(50, 0.1, 9).unwrap());
        assert_ne!(gen_circles(50, 0.1, 9).unwrap(), gen_circles(50, 0.1, 10).unwrap());
        let c = [vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(gen_blobs(31, &c, 0.3, 2).unwrap(), gen_blobs(31, &c, 0.3, 2).unwrap());
    }

    #[test]
    fn classes_balanced_within_one() {
        let counts = gen_circles(101, 0.1, 0).unwrap().class_counts();
        assert!(counts[0].abs_diff(counts[1]) <= 1);
        let counts = gen_blobs(77, &[vec![0.0], vec![5.0]], 1.0, 0).unwrap().class_counts();
        assert!(counts[0].abs_diff(counts[1]) <= 1);
    }

    #[test]
    fn zero_spread_blobs_equal_centers() {
        let c = [vec![1.5, -2.0], vec![-4.0, 0.25], vec![0.0, 9.0]];
        let d = gen_blobs(30, &c, 0.0, 1).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.features.row(i), c[d.labels[i]].as_slice());
        }
    }

    #[test]
    fn nearest_center_separates_distant_blobs() {
        let c = [vec![0.0, 0.0], vec![10.0, 0.0]];
        let d = gen_blobs(1000, &c, 0.5, 12).unwrap();
        let errors = (0..d.len())
            .filter(|&i| {
                let p = d.features.row(i);
                let dist = |c: &[f64]| (p[0] - c[0]).hypot(p[1] - c[1]);
                let nearest = if dist(&c[0]) <= dist(&c[1]) { 0 } else { 1 };
                nearest != d.labels[i]
            })
            .count();
        assert_eq!(errors, 0);
    }

    #[test]
    fn generator_argument_errors() {
        assert!(matches!(gen_circles(1, 0.1, 0), Err(Error::Argument(_))));
        assert!(gen_circles(10, -0.1, 0).is_err());
        assert!(matches!(gen_blobs(10, &[vec![0.0]], 1.0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = gen_circles(100, 0.1, 0).unwrap();
        let (tr, te) = d.split(0.25, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (75, 25));
        assert_eq!(d.split(0.25, 4).unwrap(), (tr.clone(), te.clone()));
        assert!(d.split(1.0, 0).is_err());
    }

    fn write_raw(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn hand_built_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 51, 102, 204, 0, 255, 1]);
        let lab = [0, 0, 8, 1, 0, 0, 0, 2, 3, 1];
        let d = load_idx(write_raw(dir.path(), "i", &img), write_raw(dir.path(), "l", &lab)).unwrap();
        assert_eq!(d.features.shape(), (2, 4));
        assert_eq!(d.features.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.features.row(1), &[0.8, 0.0, 1.0, 1.0 / 255.0]);
        assert_eq!(d.labels, vec![3, 1]);
        assert_eq!(d.class_count, 4);
    }

    #[test]
    fn idx_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_raw(dir.path(), "i", &[0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7]);
        let wrong_magic = write_raw(dir.path(), "l3", &[0, 0, 8, 3, 0, 0, 0, 1, 0]);
        assert!(matches!(
            load_idx(&img, &wrong_magic),
            Err(Error::Format(FormatError::BadMagic { found: 0x803, .. }))
        ));
        let two = write_raw(dir.path(), "l2", &[0, 0, 8, 1, 0, 0, 0, 2, 0, 1]);
        assert!(matches!(
            load_idx(&img, &two),
            Err(Error::Format(FormatError::CountMismatch { .. }))
        ));
        let short_img = write_raw(dir.path(), "is", &[0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 7]);
        let one = write_raw(dir.path(), "l1", &[0, 0, 8, 1, 0, 0, 0, 1, 0]);
        assert!(matches!(
            load_idx(&short_img, &one),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let stub = write_raw(dir.path(), "stub", &[0, 0, 8]);
        assert!(matches!(
            load_idx(&stub, &one),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn empty_idx_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_raw(dir.path(), "i", &[0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28]);
        let lab = write_raw(dir.path(), "l", &[0, 0, 8, 1, 0, 0, 0, 0]);
        let d = load_idx(img, lab).unwrap();
        assert_eq!(d.len(), 0);
        assert_eq!(d.features.shape(), (0, 784));
    }

    #[test]
    fn idx_round_trip_of_quantized_data() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_blobs(40, &[vec![0.0, 0.0], vec![3.0, 1.0], vec![-2.0, 4.0]], 0.5, 5)
            .unwrap()
            .normalized_to_unit();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&d, &i, &l).unwrap();
        let once = load_idx(&i, &l).unwrap();
        // quantized to 1/255 steps on the first write; exact from then on
        for (a, b) in once.features.data().iter().zip(d.features.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        write_idx(&once, &i, &l).unwrap();
        assert_eq!(load_idx(&i, &l).unwrap(), once);
    }
}
