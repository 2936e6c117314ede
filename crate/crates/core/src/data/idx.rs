use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{one_hot, Dataset, Split, MNIST_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a whole file, transparently inflating gzip content.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header: {} bytes", bytes.len())))
}

/// Parses the header and returns `(dims, payload)`.
fn parse(bytes: &[u8], path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(
            path,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            path,
            format!("truncated payload: {have} bytes, header promises {need}"),
        ));
    }
    if need == 0 {
        return Err(Error::format(path, "empty dataset"));
    }
    Ok((dims, bytes[start..start + need].to_vec()))
}

/// Loads an IDX image file and its label file. Pixels are scaled to
/// `[0, 1]`; labels become one-hot rows over ten classes.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (dims, pixels) = parse(&read_bytes(images_path)?, images_path, IMAGES_MAGIC, 3)?;
    let (ldims, labels) = parse(&read_bytes(labels_path)?, labels_path, LABELS_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    let classes: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    if let Some(bad) = classes.iter().find(|&&k| k >= MNIST_CLASSES) {
        return Err(Error::format(labels_path, format!("label {bad} outside 0..9")));
    }
    let images = Tensor::new(
        &[dims[0], dims[1], dims[2], 1],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    Dataset::new(images, one_hot(&classes, MNIST_CLASSES)?, split)
}

/// Locations of the four standard MNIST files inside a directory.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Resolves each file under `dir`, accepting both `name` and `name.gz`
    /// as well as the dotted `images.idx3-ubyte` spelling.
    pub fn in_dir(dir: &Path) -> Result<Self> {
        let find = |stem: &str, what: &str, idx: &str| -> Result<PathBuf> {
            let candidates = [
                format!("{stem}-{what}-{idx}-ubyte"),
                format!("{stem}-{what}-{idx}-ubyte.gz"),
                format!("{stem}-{what}.{idx}-ubyte"),
                format!("{stem}-{what}.{idx}-ubyte.gz"),
            ];
            candidates
                .iter()
                .map(|c| dir.join(c))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    Error::io(
                        dir.join(&candidates[0]),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
                    )
                })
        };
        Ok(MnistFiles {
            train_images: find("train", "images", "idx3")?,
            train_labels: find("train", "labels", "idx1")?,
            test_images: find("t10k", "images", "idx3")?,
            test_labels: find("t10k", "labels", "idx1")?,
        })
    }
}

/// Loads the train and test splits from a directory of MNIST files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let f = MnistFiles::in_dir(dir)?;
    Ok((
        load_idx(&f.train_images, &f.train_labels, Split::Train)?,
        load_idx(&f.test_images, &f.test_labels, Split::Test)?,
    ))
}

fn write_file(path: &Path, header: &[u32], payload: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(4 * header.len() + payload.len());
    for h in header {
        bytes.extend_from_slice(&h.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes an uncompressed IDX image file (`pixels` row-major, `n·rows·cols` bytes).
pub fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for {n}x{rows}x{cols}",
            pixels.len()
        )));
    }
    write_file(path, &[IMAGES_MAGIC, n as u32, rows as u32, cols as u32], pixels)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    write_file(path, &[LABELS_MAGIC, labels.len() as u32], labels)
}
