use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::metrics::FactorTable;
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Length(format!("{what}: truncated header")))?;
    Ok(u32::from_be_bytes(b))
}

fn read_payload(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Length(format!("{what}: expected {len} payload bytes, found {}", buf.len())));
    }
    Ok(buf)
}

/// Returns (rows, cols, raw bytes).
pub fn read_idx_images(mut r: impl Read) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32(&mut r, "idx images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("idx images: bad magic {magic:#010x}")));
    }
    let n = read_u32(&mut r, "idx images")? as usize;
    let rows = read_u32(&mut r, "idx images")? as usize;
    let cols = read_u32(&mut r, "idx images")? as usize;
    let bytes = read_payload(&mut r, n * rows * cols, "idx images")?;
    Ok((rows, cols, bytes))
}

pub fn read_idx_labels(mut r: impl Read) -> Result<Vec<u8>> {
    let magic = read_u32(&mut r, "idx labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("idx labels: bad magic {magic:#010x}")));
    }
    let n = read_u32(&mut r, "idx labels")? as usize;
    read_payload(&mut r, n, "idx labels")
}

/// Loads an image/label IDX pair; labels become a single factor of cardinality 10.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (rows, cols, pixels) = read_idx_images(BufReader::new(File::open(images_path)?))?;
    let labels = read_idx_labels(BufReader::new(File::open(labels_path)?))?;
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::Length(format!("{} labels for {} images", n, pixels.len() / (rows * cols).max(1))));
    }
    let images = Tensor::new(&[n, 1, rows, cols], pixels.iter().map(|&b| b as f64 / 255.0).collect())?;
    let factors = FactorTable::from_columns(vec![labels.iter().map(|&l| l as usize).collect()], vec![10])?;
    Dataset::new("mnist", images, Some(factors))
}

/// Standard file names under `dir` for the training or test split.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}
