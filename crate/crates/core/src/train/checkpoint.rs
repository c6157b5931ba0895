//! Flat binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MRN1"
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u8  dtype tag (0 = f32, 1 = f64)
//!   u32 rank, rank x u64 extents
//!   row-major payload
//! ```
//!
//! Parameters are stored under their names; batch-norm running statistics under
//! `<bn>.running_mean` and `<bn>.running_var`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MRN1";

/// A decoded record; payload kept as raw bytes until the target dtype is known.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{} stored as {}, requested {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let size = self.dtype.size_bytes();
        let data = self.payload.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(&self.shape, data)
    }
}

fn named_tensors<T: Scalar, M: Module<T>>(model: &M) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = model
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for bn in model.norms() {
        let c = bn.running_mean.len();
        out.push((
            format!("{}.running_mean", bn.name),
            Tensor::new(&[c], bn.running_mean.clone()).expect("vector shape"),
        ));
        out.push((
            format!("{}.running_var", bn.name),
            Tensor::new(&[c], bn.running_var.clone()).expect("vector shape"),
        ));
    }
    out
}

pub fn encode<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing MRN1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(dtype.size_bytes()))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let payload = r.take(numel, "payload")?.to_vec();
        records.push(Record {
            name,
            dtype,
            shape,
            payload,
        });
    }
    Ok(records)
}

pub fn save<T: Scalar, M: Module<T>>(model: &M, path: &Path) -> Result<()> {
    fs::write(path, encode(&named_tensors(model)))?;
    Ok(())
}

/// Restores parameters and running statistics. Every tensor of the model must be present
/// with a matching shape and dtype, and the file must hold nothing else.
pub fn load<T: Scalar, M: Module<T>>(model: &mut M, path: &Path) -> Result<()> {
    let records = decode(&fs::read(path)?)?;
    let mut by_name: BTreeMap<&str, &Record> = BTreeMap::new();
    for rec in &records {
        if by_name.insert(&rec.name, rec).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {}", rec.name)));
        }
    }
    let mut used = HashSet::new();
    let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let rec = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        if rec.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {shape:?}",
                rec.shape
            )));
        }
        used.insert(name.to_string());
        rec.to_tensor()
    };
    let mut new_params = Vec::new();
    for p in model.params() {
        new_params.push(fetch(&p.name, p.value.shape())?);
    }
    let mut new_stats = Vec::new();
    for bn in model.norms() {
        let c = [bn.running_mean.len()];
        new_stats.push((
            fetch(&format!("{}.running_mean", bn.name), &c)?.into_data(),
            fetch(&format!("{}.running_var", bn.name), &c)?.into_data(),
        ));
    }
    if let Some(extra) = records.iter().find(|r| !used.contains(&r.name)) {
        return Err(Error::Checkpoint(format!("unexpected record {}", extra.name)));
    }
    for (p, v) in model.params_mut().into_iter().zip(new_params) {
        p.value = v;
    }
    for (bn, (m, v)) in model.norms_mut().into_iter().zip(new_stats) {
        bn.running_mean = m;
        bn.running_var = v;
    }
    Ok(())
}
