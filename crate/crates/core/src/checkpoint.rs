//! Binary checkpoint format.
//!
//! ```text
//! "MSTATE01"                     8-byte magic and version
//! u32 len, len bytes             model config as JSON with sorted keys
//! u32 count, count × tensor      parameters in lexicographic name order
//! u8 flag [u64 step, m, v]       optional Adam moments (two tensor lists)
//! u8 flag [u32 count, masks]     optional freeze masks
//!
//! tensor = u32 name len, name, u8 dtype (4 or 8), u32 rows, u32 cols,
//!          rows × cols little-endian values, row-major
//! mask   = u32 name len, name, u32 rows, u32 cols, rows × cols bytes (1 = frozen)
//! ```
//!
//! Values are held as `f64` in memory and written in the precision named by
//! the config, so a model saved in 32-bit round-trips exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{self, ParamStore};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 6] = b"MSTATE";
pub const VERSION: &[u8; 2] = b"01";

/// Per-entry freeze flags of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub frozen: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, frozen: vec![false; rows * cols] }
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }
}

pub type Masks = BTreeMap<String, Mask>;

/// Adam first and second moments with the step count they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f64>>,
    pub v: BTreeMap<String, Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f64>,
    pub moments: Option<Moments>,
    pub masks: Option<Masks>,
}

impl Checkpoint {
    pub fn from_model<F: Real>(model: &Model<F>) -> Self {
        Checkpoint { config: model.config.clone(), params: model.params.cast(), moments: None, masks: None }
    }

    pub fn to_model<F: Real>(&self) -> Result<Model<F>> {
        Model::new(self.config.clone(), self.params.cast())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dtype = self.config.precision;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(VERSION);
        let json = serde_json::to_vec(&serde_json::to_value(&self.config)?)?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        write_tensors(&mut out, self.params.iter(), self.params.len(), dtype)?;
        match &self.moments {
            None => out.push(0),
            Some(mo) => {
                out.push(1);
                out.extend_from_slice(&mo.step.to_le_bytes());
                write_tensors(&mut out, mo.m.iter().map(|(k, v)| (k.as_str(), v)), mo.m.len(), dtype)?;
                write_tensors(&mut out, mo.v.iter().map(|(k, v)| (k.as_str(), v)), mo.v.len(), dtype)?;
            }
        }
        match &self.masks {
            None => out.push(0),
            Some(masks) => {
                out.push(1);
                put_u32(&mut out, masks.len())?;
                for (name, mask) in masks {
                    put_name(&mut out, name)?;
                    put_u32(&mut out, mask.rows)?;
                    put_u32(&mut out, mask.cols)?;
                    out.extend(mask.frozen.iter().map(|&f| f as u8));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if &magic[..6] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        if &magic[6..] != VERSION {
            return Err(Error::UnsupportedVersion(String::from_utf8_lossy(&magic[6..]).into_owned()));
        }
        let len = r.u32()?;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in r.tensors()? {
            params.insert(name, t)?;
        }
        params::check_store(&config, &params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let moments = match r.flag()? {
            false => None,
            true => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let m = r.tensors()?.into_iter().collect();
                let v = r.tensors()?.into_iter().collect();
                Some(Moments { step, m, v })
            }
        };
        let masks = match r.flag()? {
            false => None,
            true => {
                let count = r.u32()?;
                let mut masks = Masks::new();
                for _ in 0..count {
                    let name = r.name()?;
                    let rows = r.u32()?;
                    let cols = r.u32()?;
                    let frozen = r.take(rows * cols)?.iter().map(|&b| b != 0).collect();
                    masks.insert(name, Mask { rows, cols, frozen });
                }
                Some(masks)
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, params, moments, masks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn write_tensors<'a>(
    out: &mut Vec<u8>,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor<f64>)>,
    count: usize,
    dtype: DType,
) -> Result<()> {
    put_u32(out, count)?;
    for (name, t) in tensors {
        put_name(out, name)?;
        out.push(dtype.tag());
        put_u32(out, t.rows())?;
        put_u32(out, t.cols())?;
        for &v in t.data() {
            match dtype {
                DType::F32 => (v as f32).write_le(out),
                DType::F64 => v.write_le(out),
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad section flag {b}"))),
        }
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()?;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f64>)>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.name()?;
            let tag = self.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let rows = self.u32()?;
            let cols = self.u32()?;
            let raw = self.take(rows * cols * dtype.size())?;
            let data = raw
                .chunks_exact(dtype.size())
                .map(|c| match dtype {
                    DType::F32 => f32::read_le(c) as f64,
                    DType::F64 => f64::read_le(c),
                })
                .collect();
            out.push((name, Tensor::new(rows, cols, data)?));
        }
        Ok(out)
    }
}
