//! Dataset loading and seeded mini-batch order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::randgen::SplitMix64;
use crate::tensor::{Scalar, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const LLT_MAGIC: &[u8; 4] = b"LLT1";

/// Images with dense integer labels. Loaders never reorder examples.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, ...]` example tensor.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() < 2 || images.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&t| t >= classes) {
            return Err(Error::Consistency(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
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

    pub fn features(&self) -> usize {
        self.images.row_len()
    }

    /// Rows `idx` as a `[idx.len(), features]` tensor plus their labels.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let f = self.features();
        let mut x = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            x.extend(self.images.row(i).iter().map(|&v| T::of(v as f64)));
        }
        Ok((
            Tensor::new(vec![idx.len(), f], x)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (x, t) = self.gather::<f32>(&idx)?;
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset::new(x.reshape(&shape)?, t, self.classes)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("image file: bad magic 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let h = be_u32(bytes, 8, "image file")? as usize;
    let w = be_u32(bytes, 12, "image file")? as usize;
    let body = &bytes[16..];
    let want = n * h * w;
    if body.len() != want {
        return Err(Error::Format(format!(
            "image file: expected {want} pixel bytes, found {}",
            body.len()
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("image file: empty dims {n}x{h}x{w}")));
    }
    Tensor::new(vec![n, h * w], body.iter().map(|&b| b as f32 / 255.0).collect())
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("label file: bad magic 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "label file: expected {n} labels, found {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Parses an IDX image/label pair; pixels are scaled by `1/255`.
/// Images come back flattened as `[n, h*w]`.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(image_path)?)?;
    let labels = parse_idx_labels(&fs::read(label_path)?)?;
    if images.rows() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(images, labels, classes)
}

/// Writes an IDX image/label pair from `[n, h, w]` bytes.
pub fn write_idx(
    image_path: &Path,
    label_path: &Path,
    dims: (usize, usize),
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * dims.0 * dims.1 {
        return Err(Error::dim("pixel count does not match labels and dims"));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, dims.0 as u32, dims.1 as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    fs::write(image_path, img)?;
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    fs::write(label_path, lab)?;
    Ok(())
}

/// Appends one `LLT1` record: magic, `u32` rank, `u32` dims, `f32` LE payload.
pub fn write_tensor<W: Write, T: Scalar>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    out.write_all(LLT_MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.len());
    for &v in t.data() {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Reads one `LLT1` record.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut word = [0u8; 4];
    read_exact_or_format(r, &mut word, "tensor magic")?;
    if &word != LLT_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {word:?}")));
    }
    read_exact_or_format(r, &mut word, "tensor rank")?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        read_exact_or_format(r, &mut word, "tensor dims")?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0 && n <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("bad tensor shape {shape:?}")))?;
    let mut payload = vec![0u8; 4 * n];
    read_exact_or_format(r, &mut payload, "tensor payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Loads pre-processed images and labels stored as two `LLT1` files.
/// Labels are stored as float values of the class index.
pub fn load_llt_dataset(image_path: &Path, label_path: &Path, classes: usize) -> Result<Dataset> {
    let images = read_tensor(&mut fs::File::open(image_path)?)?;
    let raw = read_tensor(&mut fs::File::open(label_path)?)?;
    let labels = raw
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("label value {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if images.rows() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    Dataset::new(images, labels, classes)
}

/// Fisher-Yates permutation of `0..n` driven by `SplitMix64(seed)`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Shuffled index batches; the last one may be short.
pub fn batches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    Ok(permutation(n, epoch_seed)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
