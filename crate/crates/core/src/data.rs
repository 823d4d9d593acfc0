//! Datasets: IDX ingestion, synthetic Gaussian blobs, IID partitioning and
//! validation splits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled samples: `features` is `[N, d]`, one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// A minibatch drawn from a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{:?} features for {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            classes,
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

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

fn read_u32_be(r: &mut dyn Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated header ({what})")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_body(r: &mut dyn Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("{what}: expected {len} bytes of data")))?;
    Ok(buf)
}

/// Reads an IDX image file (`u8` pixels, magic `0x00000803`) and its label
/// file (magic `0x00000801`). Pixels are scaled to `[0, 1]` and flattened.
/// Paths ending in `.gz` are decompressed on the fly.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut img = open(images)?;
    let magic = read_u32_be(&mut *img, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x} in {}", images.display())));
    }
    let n = read_u32_be(&mut *img, "image count")? as usize;
    let rows = read_u32_be(&mut *img, "image rows")? as usize;
    let cols = read_u32_be(&mut *img, "image cols")? as usize;
    let d = rows * cols;
    if n == 0 || d == 0 {
        return Err(Error::Format(format!("empty image file {}", images.display())));
    }
    let pixels = read_body(&mut *img, n * d, "images")?;

    let mut lab = open(labels)?;
    let magic = read_u32_be(&mut *lab, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x} in {}", labels.display())));
    }
    let m = read_u32_be(&mut *lab, "label count")? as usize;
    if m != n {
        return Err(Error::Format(format!("{n} images but {m} labels")));
    }
    let raw_labels = read_body(&mut *lab, n, "labels")?;

    let features = Tensor::new(vec![n, d], pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, classes)
}

/// Writes a dataset as uncompressed IDX files with `side × side` images.
/// Features are mapped back to bytes with `round(255·v)`.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path, side: (usize, usize)) -> Result<()> {
    if side.0 * side.1 != dataset.dim() {
        return Err(Error::dim(format!("{:?} does not tile {} features", side, dataset.dim())));
    }
    if dataset.classes > 256 {
        return Err(Error::input("IDX labels are single bytes"));
    }
    let n = u32::try_from(dataset.len()).map_err(|_| Error::input("too many samples for IDX"))?;
    let mut w = BufWriter::new(File::create(images)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&n.to_be_bytes())?;
    w.write_all(&(side.0 as u32).to_be_bytes())?;
    w.write_all(&(side.1 as u32).to_be_bytes())?;
    let bytes: Vec<u8> = dataset
        .features
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(labels)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&n.to_be_bytes())?;
    w.write_all(&dataset.labels.iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    w.flush()?;
    Ok(())
}

/// Unit-variance Gaussian blobs, one per class. Class `k` is centred at
/// `(separation/√2)·e_k`, so every pair of means is exactly `separation`
/// apart. Samples are interleaved by class.
pub fn synth_dataset(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if !(separation > 0.0) {
        return Err(Error::input("separation must be positive"));
    }
    if classes < 2 || dim < classes || per_class == 0 {
        return Err(Error::input(format!(
            "need classes >= 2, dim >= classes and per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    let mut rng = stream(seed, Stream::Synthetic);
    let offset = separation / std::f64::consts::SQRT_2;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for k in 0..classes {
            for j in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(if j == k { offset + noise } else { noise });
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Disjoint per-client index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Partition {
    /// `δ_i = |D_i| / |D|` from the realized list sizes.
    pub fn deltas(&self) -> Vec<f64> {
        let total: usize = self.clients.iter().map(Vec::len).sum();
        self.clients.iter().map(|c| c.len() as f64 / total as f64).collect()
    }
}

/// Uniform draw without replacement of `clients × per_client` samples.
pub fn partition_iid(dataset: &Dataset, clients: usize, per_client: usize, seed: u64) -> Result<Partition> {
    let need = clients * per_client;
    if clients == 0 || per_client == 0 {
        return Err(Error::input("partition needs at least one client and one sample each"));
    }
    if need > dataset.len() {
        return Err(Error::input(format!(
            "{clients} clients x {per_client} samples exceeds {} available",
            dataset.len()
        )));
    }
    let mut rng = stream(seed, Stream::Partition);
    let picked = index::sample(&mut rng, dataset.len(), need).into_vec();
    Ok(Partition {
        clients: picked.chunks(per_client).map(<[usize]>::to_vec).collect(),
        seed,
    })
}

/// Result of [`split_validation`]. `validation` is `None` when no samples
/// were held out.
#[derive(Debug, Clone)]
pub struct TrainValidation {
    pub train: Dataset,
    pub validation: Option<Dataset>,
}

/// Holds out `n_val` uniformly drawn samples. Both parts keep the original
/// relative order of their rows.
pub fn split_validation(dataset: &Dataset, n_val: usize, seed: u64) -> Result<TrainValidation> {
    if n_val >= dataset.len() {
        return Err(Error::input(format!(
            "validation size {n_val} must be smaller than dataset size {}",
            dataset.len()
        )));
    }
    if n_val == 0 {
        return Ok(TrainValidation {
            train: dataset.clone(),
            validation: None,
        });
    }
    let mut rng = stream(seed, Stream::Validation);
    let mut held = vec![false; dataset.len()];
    for i in index::sample(&mut rng, dataset.len(), n_val) {
        held[i] = true;
    }
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| held[i]);
    Ok(TrainValidation {
        train: dataset.subset(&train_idx)?,
        validation: Some(dataset.subset(&val_idx)?),
    })
}
