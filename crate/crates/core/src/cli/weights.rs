//! `XEFW` weights files: named, group-tagged f32 tensors.
//!
//! Layout, all integers little-endian u32 unless noted:
//!
//! ```text
//! "XEFW" | version | count | count × { name_len | name (UTF-8) | group (u8) | rank | dims… | f32 data… }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::miniedge::{BackboneConfig, Model, ParameterGroup};

pub const MAGIC: &[u8; 4] = b"XEFW";
pub const VERSION: u32 = 1;

/// One decoded tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub group: ParameterGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.params().len())?;
    for p in model.params() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.group.tag());
        put_u32(&mut out, p.tensor.rank())?;
        for &d in p.tensor.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected XEFW".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = c.take(1)?[0];
        let group = ParameterGroup::from_tag(tag).ok_or_else(|| Error::Format(format!("{name}: bad group tag {tag}")))?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| Error::Format(format!("{name}: too large")))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        records.push(Record { name, group, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(records)
}

/// Rebuilds a model of topology `config` from decoded records. Names,
/// groups, order and shapes must match exactly.
pub fn model_from_records(config: &BackboneConfig, records: &[Record]) -> Result<Model> {
    let mut model = Model::build(config, 0)?;
    if model.params().len() != records.len() {
        return Err(Error::TopologyMismatch(format!(
            "file has {} tensors, config expects {}",
            records.len(),
            model.params().len()
        )));
    }
    for (p, r) in model.params_mut().iter_mut().zip(records) {
        if p.name != r.name || p.group != r.group || p.tensor.shape() != r.shape.as_slice() {
            return Err(Error::TopologyMismatch(format!(
                "expected {} [{}] {:?}, file has {} [{}] {:?}",
                p.name,
                p.group,
                p.tensor.shape(),
                r.name,
                r.group,
                r.shape
            )));
        }
        p.tensor = Tensor::new(r.shape.clone(), r.data.iter().map(|&v| f64::from(v)).collect())?;
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(config: &BackboneConfig, path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_records(config, &decode(&bytes)?)
}
