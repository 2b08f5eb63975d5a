//! Single-file dataset archive.
//!
//! ```text
//! "MLDS"                 magic
//! u32 LE                 format version
//! u64 LE + UTF-8 JSON    manifest (internal manifest form)
//! u64 LE                 number of pixel blocks
//! repeated:
//!   u64 LE + bytes       H x W x 3 RGB pixels of one image
//! u32 LE                 CRC32 of every preceding byte
//! ```
//!
//! Block `i` holds the pixels of manifest source `synthetic:i`.

use std::fs;
use std::path::Path;

use super::manifest::{DatasetManifest, ImageSource};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"MLDS";
pub const BUNDLE_VERSION: u32 = 1;

pub fn encode_bundle(manifest: &DatasetManifest, pixels: &[Vec<u8>]) -> Result<Vec<u8>> {
    validate_blocks(manifest, pixels)?;
    let json = manifest.to_json()?;
    let mut buf = Vec::with_capacity(json.len() + pixels.iter().map(|p| p.len() + 8).sum::<usize>() + 32);
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    buf.extend_from_slice(&(pixels.len() as u64).to_le_bytes());
    for block in pixels {
        buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
        buf.extend_from_slice(block);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<(DatasetManifest, Vec<Vec<u8>>)> {
    if bytes.len() < 4 + 4 + 8 + 8 + 4 {
        return Err(Error::bundle("header", format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::bundle("magic", "not a dataset bundle"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(Error::bundle("version", format!("unsupported version {version}")));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(Error::bundle("crc32", "checksum mismatch (corrupt or truncated file)"));
    }

    let mut pos = 8;
    let mut take = |n: usize, field: &str| -> Result<&[u8]> {
        if body.len() - pos < n {
            return Err(Error::bundle(field, "truncated"));
        }
        let out = &body[pos..pos + n];
        pos += n;
        Ok(out)
    };
    let read_len = |b: &[u8]| usize::try_from(u64::from_le_bytes(b.try_into().unwrap())).unwrap_or(usize::MAX);

    let json_len = read_len(take(8, "manifest length")?);
    let json = std::str::from_utf8(take(json_len, "manifest")?)
        .map_err(|_| Error::bundle("manifest", "not valid UTF-8"))?;
    let manifest = DatasetManifest::from_json(json)?;
    let count = read_len(take(8, "block count")?);
    let mut pixels = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let len = read_len(take(8, &format!("block {i} length"))?);
        pixels.push(take(len, &format!("block {i}"))?.to_vec());
    }
    if pos != body.len() {
        return Err(Error::bundle("trailer", "unexpected bytes after the last block"));
    }
    validate_blocks(&manifest, &pixels)?;
    Ok((manifest, pixels))
}

fn validate_blocks(manifest: &DatasetManifest, pixels: &[Vec<u8>]) -> Result<()> {
    for rec in &manifest.images {
        if let ImageSource::Synthetic(i) = rec.source {
            let block = pixels
                .get(i)
                .ok_or_else(|| Error::bundle("blocks", format!("image {} refers to missing block {i}", rec.id)))?;
            if block.len() != rec.width * rec.height * 3 {
                return Err(Error::bundle(
                    "blocks",
                    format!("block {i} has {} bytes, expected {}x{}x3", block.len(), rec.height, rec.width),
                ));
            }
        }
    }
    Ok(())
}

pub fn write_bundle(path: impl AsRef<Path>, manifest: &DatasetManifest, pixels: &[Vec<u8>]) -> Result<()> {
    fs::write(path, encode_bundle(manifest, pixels)?)?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Vec<u8>>)> {
    decode_bundle(&fs::read(path)?)
}
