//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "PMEM" u32 version=1 u32 K u32 Cin u32 L  f32[K*Cin*L*L]   patch means
//! ["PMSC" u32 classes u32 K  f32[K] means f32[K] scales
//!         f32[classes*K] weights f32[classes] intercepts]     optional classifier
//! ```
//!
//! Biases are never stored; they are recomputed from the means on load.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::em::PatchMixtureModel;
use crate::error::{Error, Result};
use crate::head::SoftmaxClassifier;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"PMEM";
pub const CLASSIFIER_MAGIC: [u8; 4] = *b"PMSC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PatchMixtureModel,
    pub classifier: Option<SoftmaxClassifier>,
}

fn put_floats(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
}

pub fn encode(model: &PatchMixtureModel, classifier: Option<&SoftmaxClassifier>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * model.mu().len());
    out.extend_from_slice(&MODEL_MAGIC);
    for v in [
        VERSION,
        model.num_patches() as u32,
        model.channels() as u32,
        model.patch_size() as u32,
    ] {
        out.write_u32::<LittleEndian>(v).unwrap();
    }
    put_floats(&mut out, model.mu().data().iter().copied());
    if let Some(clf) = classifier {
        out.extend_from_slice(&CLASSIFIER_MAGIC);
        out.write_u32::<LittleEndian>(clf.classes() as u32).unwrap();
        out.write_u32::<LittleEndian>(clf.dim() as u32).unwrap();
        put_floats(&mut out, clf.means.iter().copied());
        put_floats(&mut out, clf.scales.iter().copied());
        put_floats(&mut out, clf.weights.data().iter().copied());
        put_floats(&mut out, clf.intercepts.iter().copied());
    }
    out
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn need(&self, what: &'static str, bytes: usize) -> Result<()> {
        if self.remaining() < bytes {
            return Err(Error::Truncated {
                what,
                expected: self.cur.position() as usize + bytes,
                found: self.cur.get_ref().len(),
            });
        }
        Ok(())
    }

    fn magic(&mut self, what: &'static str, expected: [u8; 4]) -> Result<()> {
        self.need(what, 4)?;
        let mut found = [0u8; 4];
        self.cur.read_exact(&mut found)?;
        if found != expected {
            return Err(Error::BadMagic {
                what,
                expected: u32::from_be_bytes(expected),
                found: u32::from_be_bytes(found),
            });
        }
        Ok(())
    }

    fn u32s<const N: usize>(&mut self, what: &'static str) -> Result<[usize; N]> {
        self.need(what, 4 * N)?;
        let mut out = [0usize; N];
        for v in &mut out {
            *v = self.cur.read_u32::<LittleEndian>()? as usize;
        }
        Ok(out)
    }

    fn floats(&mut self, what: &'static str, count: usize) -> Result<Vec<f32>> {
        self.need(what, count.saturating_mul(4))?;
        let mut out = vec![0.0f32; count];
        self.cur.read_f32_into::<LittleEndian>(&mut out)?;
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let what = "model checkpoint";
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    r.magic(what, MODEL_MAGIC)?;
    let [version] = r.u32s::<1>(what)?;
    if version as u32 != VERSION {
        return Err(Error::Version(version as u32));
    }
    let [k, cin, l] = r.u32s::<3>(what)?;
    if k == 0 || cin == 0 || l == 0 {
        return Err(Error::Config(format!(
            "checkpoint dimensions {k}x{cin}x{l}x{l}"
        )));
    }
    let mu = r.floats(what, k * cin * l * l)?;
    let model = PatchMixtureModel::from_mu(Tensor::new(&[k, cin, l, l], mu)?)?;
    if !model.bias().iter().all(|&b| b <= 0.0 && b.is_finite()) || !model.bias_consistent(1e-5) {
        return Err(Error::NonFinite("checkpoint biases".into()));
    }

    let classifier = if r.remaining() == 0 {
        None
    } else {
        let what = "classifier section";
        r.magic(what, CLASSIFIER_MAGIC)?;
        let [classes, dim] = r.u32s::<2>(what)?;
        if classes == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "classifier dimensions {classes}x{dim}"
            )));
        }
        let means = r.floats(what, dim)?;
        let scales = r.floats(what, dim)?;
        let weights = Tensor::new(&[classes, dim], r.floats(what, classes * dim)?)?;
        let intercepts = r.floats(what, classes)?;
        if r.remaining() != 0 {
            return Err(Error::Truncated {
                what: "checkpoint (trailing bytes)",
                expected: bytes.len() - r.remaining(),
                found: bytes.len(),
            });
        }
        Some(SoftmaxClassifier {
            weights,
            intercepts,
            means,
            scales,
            trained: true,
            loss_history: Vec::new(),
        })
    };
    Ok(Checkpoint { model, classifier })
}

pub fn save_model(model: &PatchMixtureModel, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode(model, None))?)
}

pub fn load_model(path: &Path) -> Result<PatchMixtureModel> {
    Ok(load(path)?.model)
}

pub fn save(
    path: &Path,
    model: &PatchMixtureModel,
    classifier: Option<&SoftmaxClassifier>,
) -> Result<()> {
    Ok(fs::write(path, encode(model, classifier))?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
