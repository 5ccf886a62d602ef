//! MNIST IDX loading and deterministic mini-batching.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Flattened images in [0,1] plus class labels.
pub struct Dataset {
    /// [N x dim], row-major, pixel bytes scaled by 1/255.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.shape()[1]
    }
}

/// Parse an IDX image/label file pair.
pub fn load_idx(path_images: &Path, path_labels: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path_images)?);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {:#010x}, expected {:#010x}",
            path_images.display(),
            magic,
            IMAGES_MAGIC
        )));
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let rows = r.read_u32::<BigEndian>()? as usize;
    let cols = r.read_u32::<BigEndian>()? as usize;
    let dim = rows * cols;
    let mut bytes = vec![0u8; n * dim];
    r.read_exact(&mut bytes)?;
    let images: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();

    let mut r = BufReader::new(File::open(path_labels)?);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {:#010x}, expected {:#010x}",
            path_labels.display(),
            magic,
            LABELS_MAGIC
        )));
    }
    let n_labels = r.read_u32::<BigEndian>()? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            n, n_labels
        )));
    }
    let mut labels = vec![0u8; n_labels];
    r.read_exact(&mut labels)?;

    Ok(Dataset { images: Tensor::new(vec![n, dim], images)?, labels })
}

/// Write IDX files (test fixtures and round-trip checks).
pub fn write_idx(
    path_images: &Path,
    path_labels: &Path,
    images: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let n = labels.len();
    assert_eq!(images.len(), n * rows * cols);
    let mut w = File::create(path_images)?;
    w.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    w.write_all(images)?;
    let mut w = File::create(path_labels)?;
    w.write_u32::<BigEndian>(LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_all(labels)?;
    Ok(())
}

/// Split off the last `n_val` examples (file order) as validation data.
pub fn split_validation(ds: Dataset, n_val: usize) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n_val >= n {
        return Err(Error::Usage(format!(
            "validation size {} must be < dataset size {}",
            n_val, n
        )));
    }
    let dim = ds.dim();
    let n_train = n - n_val;
    let data = ds.images.into_data();
    let (train_px, val_px) = data.split_at(n_train * dim);
    let (train_lb, val_lb) = ds.labels.split_at(n_train);
    Ok((
        Dataset {
            images: Tensor::new(vec![n_train, dim], train_px.to_vec())?,
            labels: train_lb.to_vec(),
        },
        Dataset {
            images: Tensor::new(vec![n_val, dim], val_px.to_vec())?,
            labels: val_lb.to_vec(),
        },
    ))
}

/// Seeded batching: the epoch permutation is a pure function of (seed, epoch).
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn permutation(&self, n: usize, epoch: usize) -> Vec<u32> {
        let mut order: Vec<u32> = (0..n as u32).collect();
        // Fisher-Yates on a per-epoch ChaCha8 stream.
        let mut rng = stream_rng(self.seed, epoch as u64 + 1);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    pub fn batches<'a>(&self, ds: &'a Dataset, epoch: usize) -> BatchIter<'a> {
        BatchIter {
            ds,
            order: self.permutation(ds.len(), epoch),
            batch_size: self.batch_size,
            pos: 0,
        }
    }
}

pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<u32>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let dim = self.ds.dim();
        let px = self.ds.images.data();
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let i = i as usize;
            data.extend_from_slice(&px[i * dim..(i + 1) * dim]);
            labels.push(self.ds.labels[i] as usize);
        }
        Some((Tensor::new(vec![idx.len(), dim], data).unwrap(), labels))
    }
}
