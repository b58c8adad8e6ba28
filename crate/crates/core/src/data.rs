//! Labelled datasets, IDX files and synthetic data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Samples stored one per row, with labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dimension(
                "Dataset::new",
                inputs.rows(),
                labels.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: num_classes,
            });
        }
        if !inputs.all_finite() {
            return Err(Error::NonFinite { what: "inputs" });
        }
        Ok(Dataset {
            inputs,
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

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the listed samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            inputs: Matrix::new(indices.len(), d, data).expect("rows have the input width"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Reads an IDX image file (`0x803`) and label file (`0x801`).
///
/// Pixels are scaled to `[0, 1]` by dividing by 255. Labels must lie in
/// `0..10`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let images = images.as_ref();
    let labels = labels.as_ref();
    let img_bytes = read_all(images)?;
    let lbl_bytes = read_all(labels)?;

    let (n_img, rows, cols, pixels) = parse_images(images, &img_bytes)?;
    let lbls = parse_labels(labels, &lbl_bytes)?;
    if lbls.len() != n_img {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            offset: 4,
            reason: format!("{} labels but {} images", lbls.len(), n_img),
        });
    }
    if let Some(pos) = lbls.iter().position(|&y| y > 9) {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            offset: 8 + pos as u64,
            reason: format!("label {} is outside 0..=9", lbls[pos]),
        });
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let inputs = Matrix::new(n_img, rows * cols, data)?;
    Dataset::new(inputs, lbls.iter().map(|&y| y as usize).collect(), 10)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

fn idx_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn read_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| idx_err(path, bytes.len(), "unexpected end of file in header"))
}

fn parse_images<'a>(path: &Path, bytes: &'a [u8]) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = read_u32(path, bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(idx_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(path, bytes, 4)? as usize;
    let rows = read_u32(path, bytes, 8)? as usize;
    let cols = read_u32(path, bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(idx_err(
            path,
            bytes.len(),
            format!(
                "truncated: expected {need} pixel bytes, found {}",
                body.len()
            ),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

fn parse_labels<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a [u8]> {
    let magic = read_u32(path, bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(idx_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(path, bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(idx_err(
            path,
            bytes.len(),
            format!("truncated: expected {n} labels, found {}", body.len()),
        ));
    }
    Ok(&body[..n])
}

/// Writes a dataset as an IDX image/label pair with the given image shape.
///
/// Values are mapped back to bytes with `round(255 v)`, clamped to `0..=255`.
pub fn write_idx(
    data: &Dataset,
    shape: (usize, usize),
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    if shape.0 * shape.1 != data.input_dim() {
        return Err(Error::dimension(
            "write_idx",
            data.input_dim(),
            shape.0 * shape.1,
        ));
    }
    let mut img = BufWriter::new(File::create(images)?);
    img.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    img.write_u32::<BigEndian>(data.len() as u32)?;
    img.write_u32::<BigEndian>(shape.0 as u32)?;
    img.write_u32::<BigEndian>(shape.1 as u32)?;
    let bytes: Vec<u8> = data
        .inputs
        .as_slice()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    img.write_all(&bytes)?;
    img.flush()?;

    let mut lbl = BufWriter::new(File::create(labels)?);
    lbl.write_u32::<BigEndian>(LABEL_MAGIC)?;
    lbl.write_u32::<BigEndian>(data.len() as u32)?;
    let lbytes: Vec<u8> = data.labels.iter().map(|&y| y as u8).collect();
    lbl.write_all(&lbytes)?;
    lbl.flush()?;
    Ok(())
}

/// Class-stratified sample of `n` points, deterministic in `seed`.
///
/// Every class gets `n / num_classes` points and the remainder is handed out
/// round-robin in label order; a class that runs out passes its share on.
/// Buckets hold original indices in increasing order before the seeded
/// shuffle, and the result keeps the original sample order.
pub fn subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > data.len() {
        return Err(Error::NotEnoughSamples {
            requested: n,
            available: data.len(),
        });
    }
    let k = data.num_classes;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in data.labels.iter().enumerate() {
        buckets[y].push(i);
    }

    let mut quota = vec![0usize; k];
    let mut left = n;
    while left > 0 {
        for c in 0..k {
            if left > 0 && quota[c] < buckets[c].len() {
                quota[c] += 1;
                left -= 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (bucket, &q) in buckets.iter_mut().zip(&quota) {
        bucket.shuffle(&mut rng);
        chosen.extend_from_slice(&bucket[..q]);
    }
    chosen.sort_unstable();
    Ok(data.select(&chosen))
}

/// Isotropic Gaussian clusters, one per class, clipped to `[0, 1]`.
///
/// Class means are drawn uniformly from `[0.05, 0.35]^dim`, then coordinate
/// `c mod dim` of class `c` is raised by 0.6. The raised coordinate keeps the
/// classes apart in direction, which bias-free networks need.
pub fn synthetic_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "synthetic_blobs needs at least one class and one dimension".into(),
        ));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "spread must be >= 0, got {spread}"
        )));
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let mut m: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..0.35)).collect();
            m[c % dim] += 0.6;
            m
        })
        .collect();
    let noise = Normal::new(0.0, spread).expect("spread is finite and non-negative");
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for &m in &means[c] {
            data.push((m + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(Matrix::new(n, dim, data)?, labels, num_classes)
}
