//! Reader for the subset of COCO instance annotations that matters for
//! multilabel classification: which categories appear in which image.
//! Boxes, segmentations and crowd flags are ignored.

use std::collections::HashMap;

use serde_json::Value;

use super::categories::{Category, CategoryTable};
use super::manifest::{DatasetManifest, ImageRecord, ImageSource};
use crate::error::{DanglingReference, Error, Result};
use crate::labels::LabelVector;

pub fn parse_coco_annotations(bytes: &[u8], split: &str) -> Result<DatasetManifest> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| parse_error(bytes, &e))?;
    let root = doc
        .as_object()
        .ok_or_else(|| Error::Schema("top level must be a JSON object".into()))?;
    let array = |key: &str| -> Result<&Vec<Value>> {
        root.get(key)
            .ok_or_else(|| Error::Schema(format!("missing required array `{key}`")))?
            .as_array()
            .ok_or_else(|| Error::Schema(format!("`{key}` must be an array")))
    };
    let images = array("images")?;
    let annotations = array("annotations")?;
    let categories = array("categories")?;

    let categories = categories
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let at = format!("categories[{i}]");
            Ok(Category {
                id: uint(c, "id", &at)?,
                name: string(c, "name", &at)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = CategoryTable::new(categories)?;

    let mut records = Vec::with_capacity(images.len());
    let mut row_of_image: HashMap<u64, usize> = HashMap::new();
    for (i, img) in images.iter().enumerate() {
        let at = format!("images[{i}]");
        let id = uint(img, "id", &at)?;
        if row_of_image.insert(id, records.len()).is_some() {
            return Err(Error::Validation(format!("{at}: duplicate image id {id}")));
        }
        records.push(ImageRecord {
            id,
            source: ImageSource::File(string(img, "file_name", &at)?),
            width: uint(img, "width", &at)? as usize,
            height: uint(img, "height", &at)? as usize,
            labels: LabelVector::zeros(table.len()),
        });
    }

    let mut dangling = Vec::new();
    for (i, ann) in annotations.iter().enumerate() {
        let at = format!("annotations[{i}]");
        let image_id = uint(ann, "image_id", &at)?;
        let category_id = uint(ann, "category_id", &at)?;
        let row = row_of_image.get(&image_id);
        let col = table.column_of_id(category_id);
        match (row, col) {
            (Some(&row), Some(col)) => records[row].labels.set(col),
            _ => dangling.push(DanglingReference {
                annotation_index: i,
                image_id: row.is_none().then_some(image_id),
                category_id: col.is_none().then_some(category_id),
            }),
        }
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingReferences(dangling));
    }

    records.sort_by_key(|r| r.id);
    DatasetManifest::new(table, records, split)
}

fn parse_error(bytes: &[u8], e: &serde_json::Error) -> Error {
    let (line, column) = (e.line(), e.column());
    // serde_json reports 1-based line and column (column counted in bytes)
    let line_start: usize = bytes
        .split(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    Error::Parse {
        offset: (line_start + column.saturating_sub(1)).min(bytes.len()),
        line,
        column,
        message: e.to_string(),
    }
}

fn field<'a>(obj: &'a Value, key: &str, at: &str) -> Result<&'a Value> {
    obj.as_object()
        .ok_or_else(|| Error::Schema(format!("{at} must be an object")))?
        .get(key)
        .ok_or_else(|| Error::Schema(format!("{at}: missing field `{key}`")))
}

fn uint(obj: &Value, key: &str, at: &str) -> Result<u64> {
    field(obj, key, at)?
        .as_u64()
        .ok_or_else(|| Error::Schema(format!("{at}.{key} must be a non-negative integer")))
}

fn string(obj: &Value, key: &str, at: &str) -> Result<String> {
    field(obj, key, at)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Schema(format!("{at}.{key} must be a string")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_annotations_collapse() {
        let doc = br#"{
            "images": [{"id": 1, "file_name": "g.jpg", "width": 640, "height": 480}],
            "annotations": [
                {"image_id": 1, "category_id": 25, "bbox": [1, 2, 3, 4]},
                {"image_id": 1, "category_id": 25, "iscrowd": 0}
            ],
            "categories": [{"id": 24, "name": "zebra"}, {"id": 25, "name": "giraffe"}]
        }"#;
        let m = parse_coco_annotations(doc, "val").unwrap();
        assert_eq!(m.images[0].labels.bits(), &[0, 1]);
    }

    #[test]
    fn empty_annotations_give_zero_vectors() {
        let doc = br#"{"images": [{"id": 3, "file_name": "a", "width": 1, "height": 1}],
                       "annotations": [], "categories": [{"id": 1, "name": "x"}]}"#;
        let m = parse_coco_annotations(doc, "val").unwrap();
        assert_eq!(m.images[0].labels.bits(), &[0]);
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let doc = b"{\n  \"images\": [,]\n}";
        match parse_coco_annotations(doc, "val") {
            Err(Error::Parse { offset, line, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(doc[offset], b',');
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_array_is_schema_error() {
        let doc = br#"{"images": [], "categories": []}"#;
        assert!(matches!(
            parse_coco_annotations(doc, "val"),
            Err(Error::Schema(m)) if m.contains("annotations")
        ));
    }

    #[test]
    fn wrong_field_type_is_schema_error() {
        let doc = br#"{"images": [{"id": "1", "file_name": "a", "width": 1, "height": 1}],
                       "annotations": [], "categories": []}"#;
        assert!(matches!(
            parse_coco_annotations(doc, "val"),
            Err(Error::Schema(m)) if m.contains("images[0].id")
        ));
    }

    #[test]
    fn dangling_references_are_listed() {
        let doc = br#"{"images": [{"id": 1, "file_name": "a", "width": 1, "height": 1}],
                       "annotations": [{"image_id": 1, "category_id": 1},
                                       {"image_id": 2, "category_id": 1},
                                       {"image_id": 1, "category_id": 9},
                                       {"image_id": 5, "category_id": 8}],
                       "categories": [{"id": 1, "name": "x"}]}"#;
        match parse_coco_annotations(doc, "val") {
            Err(Error::DanglingReferences(refs)) => {
                assert_eq!(
                    refs,
                    vec![
                        DanglingReference { annotation_index: 1, image_id: Some(2), category_id: None },
                        DanglingReference { annotation_index: 2, image_id: None, category_id: Some(9) },
                        DanglingReference { annotation_index: 3, image_id: Some(5), category_id: Some(8) },
                    ]
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
