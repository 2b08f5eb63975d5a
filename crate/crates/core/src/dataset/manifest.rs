use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::categories::{Category, CategoryTable};
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::metrics::TargetMatrix;

/// Where an image's pixels come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    File(String),
    /// Index into the pixel blocks of a dataset bundle.
    Synthetic(usize),
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::File(path) => f.write_str(path),
            ImageSource::Synthetic(i) => write!(f, "synthetic:{i}"),
        }
    }
}

impl FromStr for ImageSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic:") {
            Some(idx) => idx
                .parse()
                .map(ImageSource::Synthetic)
                .map_err(|_| Error::Schema(format!("bad synthetic source {s:?}"))),
            None => Ok(ImageSource::File(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: u64,
    pub source: ImageSource,
    pub width: usize,
    pub height: usize,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub categories: CategoryTable,
    pub images: Vec<ImageRecord>,
    pub split: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestJson {
    categories: Vec<Category>,
    images: Vec<ImageJson>,
    split: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageJson {
    id: u64,
    source: String,
    width: usize,
    height: usize,
    labels: Vec<usize>,
}

impl DatasetManifest {
    /// Validates label widths and id uniqueness.
    pub fn new(categories: CategoryTable, images: Vec<ImageRecord>, split: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for img in &images {
            if img.labels.len() != categories.len() {
                return Err(Error::Validation(format!(
                    "image {} has {} labels but there are {} categories",
                    img.id,
                    img.labels.len(),
                    categories.len()
                )));
            }
            if !seen.insert(img.id) {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
        }
        Ok(DatasetManifest {
            categories,
            images,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn targets(&self) -> Result<TargetMatrix> {
        let labels: Vec<LabelVector> = self.images.iter().map(|r| r.labels.clone()).collect();
        TargetMatrix::from_labels(&labels)
    }

    pub fn to_json(&self) -> Result<String> {
        let json = ManifestJson {
            categories: self.categories.entries().to_vec(),
            images: self
                .images
                .iter()
                .map(|r| ImageJson {
                    id: r.id,
                    source: r.source.to_string(),
                    width: r.width,
                    height: r.height,
                    labels: r.labels.indices(),
                })
                .collect(),
            split: self.split.clone(),
        };
        Ok(serde_json::to_string(&json)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: ManifestJson =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("manifest: {e}")))?;
        let categories = CategoryTable::new(json.categories)?;
        let images = json
            .images
            .into_iter()
            .map(|img| {
                Ok(ImageRecord {
                    id: img.id,
                    source: img.source.parse()?,
                    width: img.width,
                    height: img.height,
                    labels: LabelVector::from_indices(categories.len(), &img.labels)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(categories, images, json.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cats = CategoryTable::from_names(&["disk", "square", "cross"]).unwrap();
        let images = vec![
            ImageRecord {
                id: 0,
                source: ImageSource::Synthetic(0),
                width: 32,
                height: 32,
                labels: LabelVector::from_indices(3, &[0, 2]).unwrap(),
            },
            ImageRecord {
                id: 7,
                source: ImageSource::File("a/b.ppm".into()),
                width: 10,
                height: 20,
                labels: LabelVector::zeros(3),
            },
        ];
        let m = DatasetManifest::new(cats, images, "val").unwrap();
        let text = m.to_json().unwrap();
        assert!(text.contains(r#""source":"synthetic:0""#));
        assert_eq!(DatasetManifest::from_json(&text).unwrap(), m);
    }

    #[test]
    fn duplicate_image_ids_rejected() {
        let cats = CategoryTable::from_names(&["a"]).unwrap();
        let rec = ImageRecord {
            id: 1,
            source: ImageSource::Synthetic(0),
            width: 1,
            height: 1,
            labels: LabelVector::zeros(1),
        };
        assert!(DatasetManifest::new(cats, vec![rec.clone(), rec], "train").is_err());
    }
}
