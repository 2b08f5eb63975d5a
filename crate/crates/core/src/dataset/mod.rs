//! Data ingestion: COCO annotations, synthetic shapes, preprocessing and batching.

mod bundle;
mod categories;
mod coco;
mod manifest;
mod preprocess;
mod synthetic;

pub use bundle::{decode_bundle, encode_bundle, read_bundle, write_bundle};
pub use categories::{Category, CategoryTable};
pub use coco::parse_coco_annotations;
pub use manifest::{DatasetManifest, ImageRecord, ImageSource};
pub use preprocess::{preprocess, CHANNEL_MEAN, CHANNEL_STD};
pub use synthetic::{generate_synthetic, ShapeKind, SyntheticSpec};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::TargetMatrix;
use crate::tensor::Tensor;

/// A manifest with its images preprocessed to model input tensors `[3, H, W]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Tensor>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::Validation(format!(
                "{} manifest records but {} images",
                manifest.len(),
                images.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::shape(format!(
                    "images must share one shape, got {:?} and {:?}",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        Ok(Dataset { manifest, images })
    }

    /// Preprocesses raw pixel blocks (indexed by synthetic source) or image files
    /// referenced by the manifest.
    pub fn from_pixels(manifest: DatasetManifest, blocks: &[Vec<u8>], target: (usize, usize)) -> Result<Self> {
        let images = manifest
            .images
            .iter()
            .map(|rec| match &rec.source {
                ImageSource::Synthetic(i) => {
                    let block = blocks.get(*i).ok_or_else(|| {
                        Error::Validation(format!("image {} refers to missing pixel block {i}", rec.id))
                    })?;
                    preprocess(block, rec.height, rec.width, target)
                }
                ImageSource::File(path) => {
                    let (h, w, px) = read_ppm(path)?;
                    preprocess(&px, h, w, target)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn targets(&self) -> Result<TargetMatrix> {
        self.manifest.targets()
    }

    /// Iterates minibatches; with `shuffle` the order is a seeded permutation,
    /// otherwise ascending image id. The last batch may be smaller.
    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.manifest.images[i].id);
        if shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Batches {
            dataset: self,
            order,
            batch_size,
            next: 0,
        })
    }
}

/// One minibatch: stacked images, their targets as floats `[B, C]`, and dataset row indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let indices = self.order[self.next..end].to_vec();
        self.next = end;
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| &self.dataset.images[i]).collect();
        let images = Tensor::stack(&imgs).expect("dataset images share a shape");
        let classes = self.dataset.manifest.num_classes();
        let targets = indices
            .iter()
            .flat_map(|&i| self.dataset.manifest.images[i].labels.to_f64())
            .collect();
        let targets = Tensor::new(vec![indices.len(), classes], targets).expect("label widths validated");
        Some(Batch {
            images,
            targets,
            indices,
        })
    }
}

/// Reads a binary PPM (`P6`, maxval 255) into (height, width, RGB bytes).
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_ppm(&bytes).map_err(|m| Error::Validation(format!("{}: {m}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("only binary PPM (P6) images are supported".into());
    }
    let mut num = || -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| "bad PPM header number".to_string())
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(format!("PPM maxval must be 255, got {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("PPM has a zero dimension".into());
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() < w * h * 3 {
        return Err("truncated PPM pixel data".into());
    }
    Ok((h, w, data[..w * h * 3].to_vec()))
}

/// Writes interleaved RGB bytes as a binary PPM.
pub fn write_ppm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}
