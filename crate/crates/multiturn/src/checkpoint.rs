//! Binary checkpoint serialization.
//!
//! Layout: magic (4 bytes), version u32, tensor count u32, then per
//! tensor: name length u32 + UTF-8 bytes, dtype tag u8, rank u32,
//! extents as u64 each, raw little-endian f32 data. All integers are
//! little-endian. Config and vocab fingerprints ride along as two
//! reserved-name tensors so the header stays fixed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::reasoner::ModelParams;
use crate::tensor::{Scalar, Tensor};

pub const MODEL_MAGIC: [u8; 4] = *b"ITR1";
pub const RANKER_MAGIC: [u8; 4] = *b"IRK1";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const CONFIG_HASH_NAME: &str = "__meta.config_hash";
const VOCAB_HASH_NAME: &str = "__meta.vocab_hash";

/// Fingerprints stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: u64,
    pub vocab_hash: u64,
}

/// A u64 split into four 16-bit limbs, each exactly representable as f32.
fn hash_to_limbs(h: u64) -> Vec<f32> {
    (0..4).map(|i| ((h >> (16 * i)) & 0xffff) as f32).collect()
}

fn limbs_to_hash(limbs: &[f32]) -> Result<u64> {
    if limbs.len() != 4 {
        return Err(Error::Checkpoint(format!(
            "hash tensor has {} limbs, expected 4",
            limbs.len()
        )));
    }
    let mut h = 0u64;
    for (i, &l) in limbs.iter().enumerate() {
        if !(0.0..=65535.0).contains(&l) || l.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("corrupt hash limb {l}")));
        }
        h |= (l as u64) << (16 * i);
    }
    Ok(h)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn write_tensor_entry<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    write_u32(w, shape.len() as u32)?;
    for &e in shape {
        write_u64(w, e as u64)?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Write a checkpoint of named tensors under the given magic.
/// Entries are written in the given order, which makes reruns with
/// identical state byte-identical.
pub fn save_named<S: Scalar, W: Write>(
    w: &mut W,
    magic: [u8; 4],
    entries: &[(String, &Tensor<S>)],
    stamp: Stamp,
) -> Result<()> {
    w.write_all(&magic)?;
    write_u32(w, VERSION)?;
    write_u32(w, (entries.len() + 2) as u32)?;
    write_tensor_entry(w, CONFIG_HASH_NAME, &[4], &hash_to_limbs(stamp.config_hash))?;
    write_tensor_entry(w, VOCAB_HASH_NAME, &[4], &hash_to_limbs(stamp.vocab_hash))?;
    for (name, t) in entries {
        debug_assert!(!name.starts_with("__"), "parameter name collides with reserved prefix");
        let data: Vec<f32> = t.data().iter().map(|&x| Scalar::to_f64(x) as f32).collect();
        write_tensor_entry(w, name, t.shape(), &data)?;
    }
    Ok(())
}

/// Checkpoint contents after parsing: weights plus fingerprints.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub stamp: Stamp,
}

impl Loaded {
    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }
}

/// Parse a checkpoint, verifying magic and version.
pub fn load_named<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<Loaded> {
    let got: [u8; 4] = read_exact(r)?;
    if got != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut config_hash = None;
    let mut vocab_hash = None;
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
        let dtype = read_exact::<_, 1>(r)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "unknown dtype tag {dtype} for {name}"
            )));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(read_exact(r)?));
        }
        match name.as_str() {
            CONFIG_HASH_NAME => config_hash = Some(limbs_to_hash(&data)?),
            VOCAB_HASH_NAME => vocab_hash = Some(limbs_to_hash(&data)?),
            _ => tensors.push((name, Tensor::new(shape, data)?)),
        }
    }
    let stamp = Stamp {
        config_hash: config_hash
            .ok_or_else(|| Error::Checkpoint("missing config fingerprint".into()))?,
        vocab_hash: vocab_hash
            .ok_or_else(|| Error::Checkpoint("missing vocab fingerprint".into()))?,
    };
    Ok(Loaded { tensors, stamp })
}

/// Reject a checkpoint whose fingerprints disagree with the current run,
/// naming both hashes.
pub fn check_stamp(found: Stamp, expected: Stamp) -> Result<()> {
    if found.config_hash != expected.config_hash {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint {:016x}, current {:016x}",
            found.config_hash, expected.config_hash
        )));
    }
    if found.vocab_hash != expected.vocab_hash {
        return Err(Error::Checkpoint(format!(
            "vocab mismatch: checkpoint {:016x}, current {:016x}",
            found.vocab_hash, expected.vocab_hash
        )));
    }
    Ok(())
}

/// Fill already-shaped tensors from a parsed checkpoint by name.
/// Every destination must be present with a matching shape, and every
/// stored tensor must be consumed.
pub fn fill_from<S: Scalar>(
    loaded: &mut Loaded,
    mut visit: impl FnMut(&mut dyn FnMut(String, &mut Tensor<S>)),
) -> Result<()> {
    let mut missing = Vec::new();
    visit(&mut |name, t| {
        let Some(src) = loaded.take(&name) else {
            missing.push(name);
            return;
        };
        if src.shape() != t.shape() {
            missing.push(format!(
                "{name} (shape {:?} in file, {:?} in model)",
                src.shape(),
                t.shape()
            ));
            return;
        }
        for (d, &s) in t.data_mut().iter_mut().zip(src.data()) {
            *d = S::from_f64(s as f64);
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing or mis-shaped tensors: {}",
            missing.join(", ")
        )));
    }
    if !loaded.tensors.is_empty() {
        let extra: Vec<&str> = loaded.tensors.iter().map(|(n, _)| n.as_str()).collect();
        return Err(Error::Checkpoint(format!(
            "unconsumed tensors in checkpoint: {}",
            extra.join(", ")
        )));
    }
    Ok(())
}

/// Save the full model to a file.
pub fn save_model<S: Scalar>(path: &Path, model: &ModelParams<S>, stamp: Stamp) -> Result<()> {
    let mut entries = Vec::new();
    model.visit(&mut |name, t| entries.push((name, t)));
    let mut w = BufWriter::new(File::create(path)?);
    save_named(&mut w, MODEL_MAGIC, &entries, stamp)?;
    w.flush()?;
    Ok(())
}

/// Load weights into an existing model of matching architecture,
/// verifying the fingerprints first.
pub fn load_model<S: Scalar>(
    path: &Path,
    model: &mut ModelParams<S>,
    expected: Stamp,
) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut loaded = load_named(&mut r, MODEL_MAGIC)?;
    check_stamp(loaded.stamp, expected)?;
    fill_from(&mut loaded, |f| model.visit_mut(&mut |n, t| f(n, t)))
}

/// Read only the fingerprints from a model checkpoint.
pub fn read_stamp(path: &Path) -> Result<Stamp> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(load_named(&mut r, MODEL_MAGIC)?.stamp)
}
