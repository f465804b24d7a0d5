//! Image datasets: IDX (MNIST) and STL-10 binary readers, plus the batch
//! partition used by the EM driver.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const STL10_SIDE: usize = 96;
pub const STL10_CHANNELS: usize = 3;
pub const STL10_RECORD: usize = STL10_CHANNELS * STL10_SIDE * STL10_SIDE;

const PIXEL_SCALE: f32 = 1.0 / 255.0;

/// Images as `N x Cin x H x W` in `[0, 1]`, with optional class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let [n, _, _, _] = images.dims4()?;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::CountMismatch {
                    images: n,
                    labels: labels.len(),
                });
            }
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, height, width)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Appends `other`. Labels survive only when both sides carry them.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let images = self.images.concat_outer(&other.images)?;
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self::new(images, labels)
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let images = self.images.select_outer(&idx)?;
        let labels = self.labels.as_ref().map(|l| l[..n].to_vec());
        Self::new(images, labels)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn check_magic(cur: &mut Cursor<&[u8]>, what: &'static str, expected: u32) -> Result<()> {
    let found = cur.read_u32::<BigEndian>().map_err(|_| Error::Truncated {
        what,
        expected: 4,
        found: cur.get_ref().len(),
    })?;
    if found != expected {
        return Err(Error::BadMagic {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

fn read_dims(cur: &mut Cursor<&[u8]>, what: &'static str, count: usize) -> Result<Vec<usize>> {
    (0..count)
        .map(|_| {
            cur.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| Error::Truncated {
                    what,
                    expected: 4 + 4 * count,
                    found: cur.get_ref().len(),
                })
        })
        .collect()
}

fn payload<'a>(cur: &Cursor<&'a [u8]>, what: &'static str, len: usize) -> Result<&'a [u8]> {
    let bytes: &'a [u8] = cur.get_ref();
    let start = cur.position() as usize;
    let rest = &bytes[start..];
    if rest.len() < len {
        return Err(Error::Truncated {
            what,
            expected: start + len,
            found: bytes.len(),
        });
    }
    Ok(&rest[..len])
}

/// Parses an IDX image file (`0x00000803`, dims N, H, W) into `N x 1 x H x W`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let what = "IDX image file";
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, what, IDX_IMAGES_MAGIC)?;
    let dims = read_dims(&mut cur, what, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Empty("IDX image file"));
    }
    let raw = payload(&cur, what, n * h * w)?;
    Tensor::new(
        &[n, 1, h, w],
        raw.iter().map(|&b| b as f32 * PIXEL_SCALE).collect(),
    )
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let what = "IDX label file";
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, what, IDX_LABELS_MAGIC)?;
    let n = read_dims(&mut cur, what, 1)?[0];
    Ok(payload(&cur, what, n)?
        .iter()
        .map(|&b| b as usize)
        .collect())
}

/// Loads an IDX image file and, optionally, its label file.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<LabeledDataset> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = labels_path
        .map(|p| read_file(p).and_then(|b| parse_idx_labels(&b)))
        .transpose()?;
    LabeledDataset::new(images, labels)
}

/// Encodes `N x H x W` bytes as an IDX image file.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * h * w);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.write_u32::<BigEndian>(v).unwrap();
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
    out.write_u32::<BigEndian>(labels.len() as u32).unwrap();
    out.extend_from_slice(labels);
    out
}

/// Parses STL-10 binary records: planar RGB, each plane stored column-major.
pub fn parse_stl10_images(bytes: &[u8]) -> Result<Tensor> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(STL10_RECORD) {
        return Err(Error::RecordLength {
            len: bytes.len(),
            record: STL10_RECORD,
        });
    }
    let n = bytes.len() / STL10_RECORD;
    let side = STL10_SIDE;
    let mut data = vec![0.0f32; bytes.len()];
    for (record, out) in bytes
        .chunks_exact(STL10_RECORD)
        .zip(data.chunks_exact_mut(STL10_RECORD))
    {
        for (plane_in, plane_out) in record
            .chunks_exact(side * side)
            .zip(out.chunks_exact_mut(side * side))
        {
            for col in 0..side {
                for row in 0..side {
                    plane_out[row * side + col] = plane_in[col * side + row] as f32 * PIXEL_SCALE;
                }
            }
        }
    }
    Tensor::new(&[n, STL10_CHANNELS, side, side], data)
}

/// Converts STL-10's 1-based label bytes to 0-based classes.
pub fn parse_stl10_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    bytes
        .iter()
        .map(|&b| match b {
            0 => Err(Error::LabelOutOfRange {
                label: 0,
                classes: 10,
            }),
            b => Ok(b as usize - 1),
        })
        .collect()
}

pub fn load_stl10_binary(data_path: &Path, labels_path: Option<&Path>) -> Result<LabeledDataset> {
    let images = parse_stl10_images(&read_file(data_path)?)?;
    let labels = labels_path
        .map(|p| read_file(p).and_then(|b| parse_stl10_labels(&b)))
        .transpose()?;
    LabeledDataset::new(images, labels)
}

/// Encodes `N x 3 x 96 x 96` row-major bytes in STL-10 layout.
pub fn encode_stl10_images(pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len() % STL10_RECORD, 0);
    let side = STL10_SIDE;
    let mut out = vec![0u8; pixels.len()];
    for (plane_in, plane_out) in pixels
        .chunks_exact(side * side)
        .zip(out.chunks_exact_mut(side * side))
    {
        for row in 0..side {
            for col in 0..side {
                plane_out[col * side + row] = plane_in[row * side + col];
            }
        }
    }
    out
}

/// Reads the whole file into memory; used for CLI label files that may be
/// either IDX or plain text.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// A fixed ordering of sample indices cut into consecutive batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    batch_size: usize,
    order: Vec<usize>,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Sequential contiguous batches, or a seeded permutation when `shuffle`.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchPlan { batch_size, order })
}
