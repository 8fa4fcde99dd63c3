//! Datasets: MNIST IDX files, seeded Gaussian blobs, class statistics and
//! shuffled minibatch plans.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::rng::seeded;
use crate::tensor::{norm2, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature rows with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, q: usize) -> (&[f64], usize) {
        (self.features.row(q), self.labels[q])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Errors with the first class that has no samples.
    pub fn require_all_classes(&self) -> Result<Vec<usize>> {
        let counts = self.class_counts();
        match counts.iter().position(|&c| c == 0) {
            Some(j) => Err(Error::MissingClass(j)),
            None => Ok(counts),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &q in indices {
            data.extend_from_slice(self.features.row(q));
        }
        Self {
            features: Matrix::new(indices.len(), d, data).expect("rows copied from a valid matrix"),
            labels: indices.iter().map(|&q| self.labels[q]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Same labels, new features (for adversarial copies).
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(shape_err(
                "with_features",
                format!("{:?}", self.features.shape()),
                format!("{:?}", features.shape()),
            ));
        }
        Ok(Self {
            features,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }

    /// Appends a constant 1 feature to every sample, standing in for biases.
    pub fn with_bias_feature(&self) -> Self {
        let (m, d) = self.features.shape();
        let features = Matrix::from_fn(
            m,
            d + 1,
            |i, j| if j < d { self.features[(i, j)] } else { 1.0 },
        );
        Self {
            features,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Synthetic dataset export: a `d,d_y,seed` header row, its values, then
    /// one row per sample `features…,label`.
    pub fn write_csv(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
        w.write_record(["d", "d_y", "seed"])?;
        w.write_record([
            self.dim().to_string(),
            self.num_classes.to_string(),
            seed.to_string(),
        ])?;
        for q in 0..self.len() {
            let (x, y) = self.sample(q);
            let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`Self::write_csv`]; returns the dataset and seed.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(true)
            .from_path(path)?;
        let mut records = r.records();
        let meta = records
            .next()
            .ok_or_else(|| Error::Malformed("missing header values".into()))??;
        let parse = |s: &str| -> Result<u64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Malformed(format!("bad header value {s:?}")))
        };
        let d = parse(meta.get(0).unwrap_or(""))? as usize;
        let d_y = parse(meta.get(1).unwrap_or(""))? as usize;
        let seed = parse(meta.get(2).unwrap_or(""))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in records {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(Error::Malformed(format!(
                    "row has {} fields, expected {}",
                    rec.len(),
                    d + 1
                )));
            }
            for field in rec.iter().take(d) {
                data.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Malformed(format!("bad feature {field:?}")))?,
                );
            }
            labels.push(parse(&rec[d])? as usize);
        }
        let features = Matrix::new(labels.len(), d, data)?;
        Ok((Self::new(features, labels, d_y)?, seed))
    }
}

/// Per-class counts, the smallest count and the input radius.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    pub m_min: usize,
    /// `B = max_q ‖x_q‖₂`
    pub input_radius: f64,
}

pub fn class_stats(ds: &Dataset) -> Result<ClassStats> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let counts = ds.class_counts();
    let m_min = counts.iter().copied().min().unwrap_or(0);
    let input_radius = (0..ds.len())
        .map(|q| norm2(ds.features.row(q)))
        .fold(0.0, f64::max);
    Ok(ClassStats {
        counts,
        m_min,
        input_radius,
    })
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            what,
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file (`0x00000803`, count, rows, cols, pixels).
/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "IDX image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "IDX image header")? as usize;
    let rows = be_u32(bytes, 8, "IDX image header")? as usize;
    let cols = be_u32(bytes, 12, "IDX image header")? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: "IDX image block",
            expected: need,
            found: bytes.len(),
        });
    }
    Ok((count, rows, cols, &bytes[16..need]))
}

/// Parses an IDX label file (`0x00000801`, count, labels).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "IDX label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "IDX label header")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: "IDX label block",
            expected: need,
            found: bytes.len(),
        });
    }
    Ok(&bytes[8..need])
}

/// Builds a 10-class dataset from IDX image and label bytes; pixels are
/// scaled by 1/255.
pub fn mnist_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_bytes.len(),
        });
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Matrix::new(count, rows * cols, data)?;
    Dataset::new(
        features,
        label_bytes.iter().map(|&y| usize::from(y)).collect(),
        10,
    )
}

pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    mnist_from_bytes(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Serializes a dataset with features in `[0, 1]` back to IDX image and
/// label bytes (pixels `round(255 x)`), each image `rows × cols`.
pub fn to_idx_bytes(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(shape_err("to_idx_bytes", ds.dim(), rows * cols));
    }
    let count =
        u32::try_from(ds.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
    let mut images = Vec::with_capacity(16 + ds.len() * ds.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&count.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    for &x in ds.features.as_slice() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidArgument(format!("pixel {x} outside [0, 1]")));
        }
        images.push((x * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&count.to_be_bytes());
    for &y in &ds.labels {
        labels
            .push(u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {y} > 255")))?);
    }
    Ok((images, labels))
}

/// Gaussian blobs: class `j` has `counts[j]` points drawn from
/// `N(μ_j, noise_std² I)`. The centers are drawn from the seed with every
/// pairwise distance at least `centers_scale`. Samples are ordered by class.
pub fn synth_blobs(
    d: usize,
    d_y: usize,
    counts: &[usize],
    centers_scale: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if d_y < 2 || counts.len() != d_y || counts.contains(&0) || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs needs d >= 1, d_y >= 2 and {d_y} positive counts, got {counts:?}"
        )));
    }
    if !(noise_std >= 0.0) || !(centers_scale >= 0.0) {
        return Err(Error::InvalidArgument("scales must be nonnegative".into()));
    }
    let mut rng = seeded(seed);
    let centers = blob_centers(d, d_y, centers_scale, &mut rng);
    let mut data = Vec::with_capacity(counts.iter().sum::<usize>() * d);
    let mut labels = Vec::new();
    let noise = Normal::new(0.0, noise_std).expect("nonnegative std");
    for (j, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            data.extend(centers[j].iter().map(|&mu| {
                if noise_std > 0.0 {
                    mu + noise.sample(&mut rng)
                } else {
                    mu
                }
            }));
            labels.push(j);
        }
    }
    let features = Matrix::new(labels.len(), d, data)?;
    Dataset::new(features, labels, d_y)
}

/// Train and test sets from the same blob centers: class `j` gets
/// `train_counts[j]` training and `test_counts[j]` test samples.
pub fn synth_blobs_split(
    d: usize,
    d_y: usize,
    train_counts: &[usize],
    test_counts: &[usize],
    centers_scale: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if test_counts.len() != train_counts.len() {
        return Err(shape_err(
            "synth_blobs_split",
            train_counts.len(),
            test_counts.len(),
        ));
    }
    let total: Vec<usize> = train_counts
        .iter()
        .zip(test_counts)
        .map(|(a, b)| a + b)
        .collect();
    let all = synth_blobs(d, d_y, &total, centers_scale, noise_std, seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut start = 0;
    for (&a, &t) in train_counts.iter().zip(&total) {
        train.extend(start..start + a);
        test.extend(start + a..start + t);
        start += t;
    }
    Ok((all.subset(&train), all.subset(&test)))
}

/// Centers uniform on the sphere of radius `r = scale`, rejection-sampled
/// until pairwise distances reach `scale`; `r` grows by half after every
/// 1000 rejections so low dimensions still terminate.
fn blob_centers(d: usize, d_y: usize, scale: f64, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let mut radius = scale;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(d_y);
    let mut rejections = 0;
    while centers.len() < d_y {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = norm2(&g);
        if n == 0.0 {
            continue;
        }
        let c: Vec<f64> = g.iter().map(|v| v / n * radius).collect();
        let far = centers.iter().all(|o| {
            let diff: Vec<f64> = o.iter().zip(&c).map(|(a, b)| a - b).collect();
            norm2(&diff) >= scale
        });
        if far {
            centers.push(c);
        } else {
            rejections += 1;
            if rejections % 1000 == 0 {
                radius *= 1.5;
                let grow = 1.5;
                centers
                    .iter_mut()
                    .for_each(|o| o.iter_mut().for_each(|v| *v *= grow));
            }
        }
    }
    centers
}

/// One epoch's shuffled sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub permutation: Vec<usize>,
}

impl BatchPlan {
    pub fn new(m: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let mut permutation: Vec<usize> = (0..m).collect();
        permutation.shuffle(&mut seeded(seed));
        Ok(Self {
            seed,
            batch_size,
            permutation,
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.permutation.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_pair(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(count as u32).to_be_bytes());
        images.extend_from_slice(&(rows as u32).to_be_bytes());
        images.extend_from_slice(&(cols as u32).to_be_bytes());
        for k in 0..count * rows * cols {
            images.push((k * 37 % 256) as u8);
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(count as u32).to_be_bytes());
        for q in 0..count {
            labels.push((q % 10) as u8);
        }
        (images, labels)
    }

    #[test]
    fn blob_split_shares_centers() {
        let (tr, te) = synth_blobs_split(3, 3, &[5, 6, 2], &[4, 4, 4], 2.0, 0.0, 8).unwrap();
        assert_eq!(tr.class_counts(), vec![5, 6, 2]);
        assert_eq!(te.class_counts(), vec![4, 4, 4]);
        let all = synth_blobs(3, 3, &[9, 10, 6], 2.0, 0.0, 8).unwrap();
        for ds in [&tr, &te] {
            for q in 0..ds.len() {
                let (x, y) = ds.sample(q);
                let first = all.labels().iter().position(|&l| l == y).unwrap();
                assert_eq!(x, all.sample(first).0);
            }
        }
        assert!(synth_blobs_split(3, 3, &[5, 6, 2], &[4, 4], 2.0, 0.0, 8).is_err());
    }

    #[test]
    fn idx_parses_and_scales() {
        let (images, labels) = idx_pair(20, 28, 28);
        let ds = mnist_from_bytes(&images, &labels).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.dim(), 784);
        assert_eq!(ds.num_classes(), 10);
        assert!(ds
            .features()
            .as_slice()
            .iter()
            .all(|x| (0.0..=1.0).contains(x)));
        // Byte oracle: pixel k of the block is (k * 37 mod 256) / 255.
        assert_eq!(ds.features()[(1, 3)], ((784 + 3) * 37 % 256) as f64 / 255.0);
        let (i2, l2) = to_idx_bytes(&ds, 28, 28).unwrap();
        assert_eq!(i2, images);
        assert_eq!(l2, labels);
    }

    #[test]
    fn idx_errors() {
        let (images, labels) = idx_pair(5, 2, 2);
        let mut bad = labels.clone();
        bad[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        assert!(matches!(
            mnist_from_bytes(&images, &bad),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            mnist_from_bytes(&images[..images.len() - 1], &labels),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            mnist_from_bytes(&images[..10], &labels),
            Err(Error::Truncated { .. })
        ));
        let (_, fewer) = idx_pair(4, 2, 2);
        assert!(matches!(
            mnist_from_bytes(&images, &fewer),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn blobs_zero_noise_and_counts() {
        let ds = synth_blobs(5, 3, &[100, 100, 10], 4.0, 0.0, 3).unwrap();
        let stats = class_stats(&ds).unwrap();
        assert_eq!(stats.counts, vec![100, 100, 10]);
        assert_eq!(stats.m_min, 10);
        for q in 1..ds.len() {
            if ds.labels()[q] == ds.labels()[q - 1] {
                assert_eq!(ds.features().row(q), ds.features().row(q - 1));
            }
        }
        assert!(synth_blobs(5, 1, &[3], 1.0, 0.1, 0).is_err());
        assert!(synth_blobs(5, 2, &[3, 0], 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn blob_centers_are_separated() {
        for (d, d_y) in [(2, 8), (3, 5), (20, 4)] {
            let ds = synth_blobs(d, d_y, &vec![1; d_y], 2.5, 0.0, 9).unwrap();
            for a in 0..d_y {
                for b in a + 1..d_y {
                    let diff: Vec<f64> = ds
                        .features()
                        .row(a)
                        .iter()
                        .zip(ds.features().row(b))
                        .map(|(x, y)| x - y)
                        .collect();
                    assert!(norm2(&diff) >= 2.5);
                }
            }
        }
    }

    #[test]
    fn blobs_are_separable_by_nearest_center() {
        // Oracle: classify each point by the nearest empirical class mean.
        let ds = synth_blobs(10, 4, &[50, 50, 50, 50], 5.0, 0.1, 21).unwrap();
        let mut means = vec![vec![0.0; 10]; 4];
        let counts = ds.class_counts();
        for q in 0..ds.len() {
            let (x, y) = ds.sample(q);
            for (m, v) in means[y].iter_mut().zip(x) {
                *m += v / counts[y] as f64;
            }
        }
        for q in 0..ds.len() {
            let (x, y) = ds.sample(q);
            let dist =
                |c: &Vec<f64>| norm2(&c.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>());
            let best = (0..4)
                .min_by(|&a, &b| dist(&means[a]).partial_cmp(&dist(&means[b])).unwrap())
                .unwrap();
            assert_eq!(best, y);
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(6, 3, &[5, 6, 7], 3.0, 0.5, 42).unwrap();
        let b = synth_blobs(6, 3, &[5, 6, 7], 3.0, 0.5, 42).unwrap();
        let c = synth_blobs(6, 3, &[5, 6, 7], 3.0, 0.5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stats_radius_and_errors() {
        let ds = Dataset::new(Matrix::zeros(4, 3), vec![0, 1, 0, 1], 2).unwrap();
        assert_eq!(class_stats(&ds).unwrap().input_radius, 0.0);
        let ds = Dataset::new(
            Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        assert_eq!(class_stats(&ds).unwrap().input_radius, 5.0);
        let empty = Dataset::new(Matrix::zeros(0, 2), vec![], 2).unwrap();
        assert!(class_stats(&empty).is_err());
        assert!(Dataset::new(Matrix::zeros(1, 2), vec![2], 2).is_err());
        let missing = Dataset::new(Matrix::zeros(2, 2), vec![0, 0], 3).unwrap();
        assert!(matches!(
            missing.require_all_classes(),
            Err(Error::MissingClass(1))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = synth_blobs(3, 3, &[4, 5, 6], 2.0, 0.7, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        ds.write_csv(&path, 8).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("d,d_y,seed\n3,3,8\n"));
        let (back, seed) = Dataset::read_csv(&path).unwrap();
        assert_eq!(seed, 8);
        assert_eq!(back, ds);
    }

    #[test]
    fn bias_feature() {
        let ds = synth_blobs(2, 2, &[2, 2], 1.0, 0.1, 1).unwrap();
        let b = ds.with_bias_feature();
        assert_eq!(b.dim(), 3);
        assert!((0..b.len()).all(|q| b.features()[(q, 2)] == 1.0));
    }

    proptest! {
        #[test]
        fn batch_plan_is_a_permutation(m in 0usize..200, bs in 1usize..40, seed in any::<u64>()) {
            let plan = BatchPlan::new(m, bs, seed).unwrap();
            let mut seen = plan.permutation.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..m).collect::<Vec<_>>());
            prop_assert_eq!(plan.batches().map(<[usize]>::len).sum::<usize>(), m);
            prop_assert!(plan.batches().all(|b| b.len() <= bs));
        }

        #[test]
        fn m_min_bounded_by_mean(counts in proptest::collection::vec(1usize..30, 2..6), seed in any::<u64>()) {
            let ds = synth_blobs(2, counts.len(), &counts, 1.0, 0.3, seed).unwrap();
            let s = class_stats(&ds).unwrap();
            prop_assert!(s.m_min * counts.len() <= ds.len());
            prop_assert_eq!(s.counts.iter().sum::<usize>(), ds.len());
        }
    }
}
