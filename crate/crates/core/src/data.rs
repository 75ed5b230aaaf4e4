//! Datasets, IDX parsing, deterministic batching and AATD checkpoints.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ThreeWayModel};
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tensor};

/// Labeled samples stored as one flat `N x sample_shape` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    data: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        data: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} values do not form {} samples of shape {sample_shape:?}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            sample_shape,
            data,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    /// Like [`Dataset::new`] but additionally requires every value in `[0, 1]`.
    pub fn images(
        sample_shape: Vec<usize>,
        data: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Self::new(sample_shape, data, labels, num_classes, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }

    /// Gathers the given samples into a batch tensor and label vector.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut shape = vec![idx.len()];
        shape.extend(&self.sample_shape);
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| T::of(v as f64)));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch"), labels)
    }

    /// The whole dataset as one batch.
    pub fn all<T: Scalar>(&self) -> (Tensor<T>, Vec<usize>) {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    /// A new dataset holding the listed samples, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }

    /// First `k` samples after a seeded shuffle (whole set when `k >= len`).
    pub fn subset(&self, k: usize, seed: u64) -> Dataset {
        let mut perm = rng::permutation(self.len(), &mut rng::seeded(seed, stream::SUBSET));
        perm.truncate(k.min(self.len()));
        self.select(&perm)
    }

    /// Deterministic batch index lists; see [`batch_indices`].
    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
        batch_indices(self.len(), batch_size, seed, shuffle)
    }
}

/// Splits `0..n` into consecutive batches, after a seeded Fisher-Yates
/// permutation when `shuffle` is set. The final short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let order = if shuffle {
        rng::permutation(n, &mut rng::seeded(seed, stream::SHUFFLE))
    } else {
        (0..n).collect()
    };
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("header truncated at byte {at}")))
}

/// Parses an IDX file with the expected magic; returns dims and payload.
fn parse_idx(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let got = be_u32(bytes, 0)?;
    if got != magic {
        return Err(Error::Format(format!(
            "{what}: expected magic {magic:#010x}, found bytes {:02x?}",
            &bytes[..4]
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "{what}: header promises {want} bytes for dims {dims:?}, file holds {}",
            payload.len()
        )));
    }
    Ok((dims, payload.to_vec()))
}

/// Loads an IDX image/label pair (raw or gzip-compressed).
///
/// Pixels are scaled by 1/255 into `[0, 1]`; samples come out as `1 x H x W`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (idims, pixels) = parse_idx(&read_maybe_gz(images_path)?, IDX_IMAGES, "images")?;
    let (ldims, labels) = parse_idx(&read_maybe_gz(labels_path)?, IDX_LABELS, "labels")?;
    if idims[0] != ldims[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    let split = images_path
        .file_name()
        .map(|f| f.to_string_lossy().split('-').next().unwrap_or("").to_string())
        .unwrap_or_default();
    Dataset::images(vec![1, idims[1], idims[2]], data, labels, 10, split)
}

/// Loads `<split>-images-idx3-ubyte` and `<split>-labels-idx1-ubyte` from
/// `dir`, preferring the uncompressed files and falling back to `.gz`.
pub fn load_mnist_split(dir: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let dir = dir.as_ref();
    let find = |stem: String| {
        let plain = dir.join(&stem);
        if plain.exists() {
            Ok(plain)
        } else {
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                Ok(gz)
            } else {
                Err(Error::Format(format!("missing {} (or .gz)", plain.display())))
            }
        }
    };
    let images = find(format!("{split}-images-idx3-ubyte"))?;
    let labels = find(format!("{split}-labels-idx1-ubyte"))?;
    load_mnist_idx(images, labels)
}

/// Writes `n x h x w` unsigned-byte images in IDX format.
pub fn write_idx_images(path: impl AsRef<Path>, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::Format(format!("{} pixels for {n}x{h}x{w}", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

const CKPT_MAGIC: &[u8; 4] = b"AATD";
const CKPT_VERSION: u32 = 1;

/// Metadata stored in the JSON trailer of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub spec: BackboneSpec,
    pub config_hash: String,
    pub epoch: usize,
    pub seed: u64,
}

/// Serializes parameters and metadata into the AATD byte layout.
pub fn encode_checkpoint(model: &ThreeWayModel<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params().count() as u32).to_le_bytes());
    for p in model.params() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn save_checkpoint(model: &ThreeWayModel<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn decode_raw(bytes: &[u8]) -> Result<(Vec<RawTensor>, CheckpointMeta)> {
    let mut c = Cursor { bytes, at: 0 };
    let magic = c.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format(format!("not an AATD checkpoint (magic {magic:02x?})")));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name not UTF-8: {e}")))?
            .to_string();
        let ndim = c.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(RawTensor { name, shape, data });
    }
    let len = c.u32()? as usize;
    let meta = serde_json::from_slice(c.take(len)?)?;
    if c.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after metadata",
            bytes.len() - c.at
        )));
    }
    Ok((tensors, meta))
}

/// Copies checkpoint tensors into `model`, refusing on any name or shape mismatch.
pub fn load_into(model: &mut ThreeWayModel<f32>, bytes: &[u8]) -> Result<CheckpointMeta> {
    let (tensors, meta) = decode_raw(bytes)?;
    let expected = model.params().count();
    if tensors.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model expects {expected}",
            tensors.len()
        )));
    }
    for (raw, p) in tensors.iter().zip(model.params()) {
        if raw.name != p.name || raw.shape != p.tensor.shape() {
            return Err(Error::Format(format!(
                "tensor mismatch: checkpoint '{}' {:?} vs model '{}' {:?}",
                raw.name,
                raw.shape,
                p.name,
                p.tensor.shape()
            )));
        }
    }
    for (raw, p) in tensors.into_iter().zip(model.params_mut()) {
        p.tensor.data_mut().copy_from_slice(&raw.data);
    }
    model.zero_grad();
    Ok(meta)
}

/// Rebuilds a model from the architecture recorded in the checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ThreeWayModel<f32>, CheckpointMeta)> {
    let (_, meta) = decode_raw(bytes)?;
    let mut model = ThreeWayModel::init(&meta.spec, 0)?;
    let meta = load_into(&mut model, bytes)?;
    Ok((model, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ThreeWayModel<f32>, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}
