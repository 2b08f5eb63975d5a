//! Binary checkpoint format.
//!
//! ```text
//! "MLRN"                      magic, 4 bytes
//! u32 LE                      format version
//! u64 LE + UTF-8 JSON         model config
//! repeated until the trailer:
//!   u32 LE + UTF-8            tensor name
//!   u32 LE                    rank
//!   rank x u64 LE             dims
//!   prod(dims) x f64 LE       values, row-major
//! u32 LE                      CRC32 of every preceding byte
//! ```
//!
//! Running batch-norm statistics are stored as `<unit>.norm.running_mean` and
//! `<unit>.norm.running_var` rank-1 tensors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MLRN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);

    let mut write_tensor = |name: &str, shape: &[usize], values: &[f64]| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, tensor) in model.parameters() {
        write_tensor(&name, tensor.shape(), tensor.data());
    }
    for (name, stats) in model.buffers() {
        write_tensor(&format!("{name}.running_mean"), &[stats.mean.len()], &stats.mean);
        write_tensor(&format!("{name}.running_var"), &[stats.var.len()], &stats.var);
    }

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::checkpoint(
                field,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        usize::try_from(self.u64(field)?)
            .map_err(|_| Error::checkpoint(field, "length does not fit in memory"))
    }
}

/// Parses a checkpoint. Nothing is returned unless every field validates.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(Error::checkpoint("header", format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::checkpoint("magic", format!("expected \"MLRN\", found {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::checkpoint(
            "crc32",
            format!("stored {stored:#010x}, computed {actual:#010x} (corrupt or truncated file)"),
        ));
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let config_len = r.len("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let mut model = Model::build(config).map_err(|e| Error::checkpoint("config", e.to_string()))?;

    let mut table: HashMap<String, Tensor> = HashMap::new();
    while r.pos < body.len() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::checkpoint("tensor name", "not valid UTF-8"))?
            .to_string();
        let field = |what: &str| format!("tensor table entry {name:?} {what}");
        let rank = r.u32(&field("rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len(&field("dims"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::checkpoint(field("dims"), "element count overflows"))?;
        let raw = r.take(numel * 8, &field("values"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::checkpoint(field("dims"), e.to_string()))?;
        if table.insert(name.clone(), tensor).is_some() {
            return Err(Error::checkpoint(field("name"), "duplicate tensor"));
        }
    }

    let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = table
            .remove(name)
            .ok_or_else(|| Error::checkpoint(format!("tensor table entry {name:?}"), "missing"))?;
        if t.shape() != shape {
            return Err(Error::checkpoint(
                format!("tensor table entry {name:?} dims"),
                format!("expected {shape:?}, found {:?}", t.shape()),
            ));
        }
        Ok(t)
    };

    let expected: Vec<(String, Vec<usize>)> = model
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        loaded.push(fetch(name, shape)?);
    }
    let buffer_names: Vec<(String, usize)> = model
        .buffers()
        .into_iter()
        .map(|(n, rs)| (n, rs.mean.len()))
        .collect();
    let mut stats = Vec::with_capacity(buffer_names.len());
    for (name, c) in &buffer_names {
        let mean = fetch(&format!("{name}.running_mean"), &[*c])?.into_data();
        let var = fetch(&format!("{name}.running_var"), &[*c])?.into_data();
        stats.push((mean, var));
    }
    if let Some(extra) = table.keys().min() {
        return Err(Error::checkpoint(format!("tensor table entry {extra:?}"), "unexpected tensor"));
    }

    for (slot, tensor) in model.parameters_mut().into_iter().zip(loaded) {
        *slot = tensor;
    }
    for (layer, (mean, var)) in model.norm_layers_mut().into_iter().zip(stats) {
        layer.running.mean = mean;
        layer.running.var = var;
    }
    Ok(model)
}
