use mlrn::dataset::{
    decode_bundle, encode_bundle, generate_synthetic, parse_coco_annotations, Category, CategoryTable, Dataset,
    DatasetManifest, ImageRecord, ImageSource, SyntheticSpec,
};
use mlrn::error::DanglingReference;
use mlrn::labels::LabelVector;
use mlrn::Error;

const FIXTURE: &[u8] = include_bytes!("fixtures/coco_small.json");

fn expected_fixture_manifest() -> DatasetManifest {
    let cat = |id, name: &str| Category { id, name: name.into() };
    let categories = CategoryTable::new(vec![
        cat(1, "person"),
        cat(3, "car"),
        cat(18, "dog"),
        cat(24, "zebra"),
        cat(25, "giraffe"),
    ])
    .unwrap();
    let image = |id, file: &str, width, height, bits: [u8; 5]| ImageRecord {
        id,
        source: ImageSource::File(file.into()),
        width,
        height,
        labels: LabelVector::from_bits(bits.to_vec()).unwrap(),
    };
    let images = vec![
        image(7, "000000000007.jpg", 500, 375, [1, 1, 1, 0, 0]),
        image(19, "000000000019.jpg", 427, 640, [1, 0, 0, 0, 0]),
        image(42, "000000000042.jpg", 640, 480, [0, 0, 0, 1, 1]),
    ];
    DatasetManifest::new(categories, images, "val").unwrap()
}

#[test]
fn fixture_parses_to_expected_manifest() {
    assert_eq!(parse_coco_annotations(FIXTURE, "val").unwrap(), expected_fixture_manifest());
}

#[test]
fn truncated_fixture_is_a_parse_error() {
    let cut = &FIXTURE[..FIXTURE.len() / 2];
    match parse_coco_annotations(cut, "val") {
        Err(Error::Parse { offset, line, .. }) => {
            assert!(offset <= cut.len());
            assert!(line >= 1);
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn unknown_category_is_reported_with_annotation_index() {
    let text = std::str::from_utf8(FIXTURE).unwrap().replace("\"category_id\": 18", "\"category_id\": 99");
    match parse_coco_annotations(text.as_bytes(), "val") {
        Err(Error::DanglingReferences(refs)) => assert_eq!(
            refs,
            vec![DanglingReference {
                annotation_index: 5,
                image_id: None,
                category_id: Some(99)
            }]
        ),
        other => panic!("expected dangling references, got {other:?}"),
    }
}

#[test]
fn manifest_json_round_trip() {
    let m = expected_fixture_manifest();
    assert_eq!(DatasetManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    let (synthetic, _) = generate_synthetic(&SyntheticSpec::default(), 10, "train").unwrap();
    assert_eq!(DatasetManifest::from_json(&synthetic.to_json().unwrap()).unwrap(), synthetic);
}

#[test]
fn synthetic_class_frequencies_match_expectation() {
    // object count uniform on 1..=3, classes drawn without replacement from 4: E[freq] = 2/4
    let spec = SyntheticSpec { seed: 99, ..Default::default() };
    let (m, _) = generate_synthetic(&spec, 500, "train").unwrap();
    for class in 0..4 {
        let freq = m.images.iter().filter(|r| r.labels.get(class)).count() as f64 / 500.0;
        assert!((freq - 0.5).abs() <= 0.1, "class {class}: {freq}");
    }
}

#[test]
fn synthetic_generation_is_seeded() {
    let spec = SyntheticSpec { seed: 5, ..Default::default() };
    let a = generate_synthetic(&spec, 8, "train").unwrap();
    let b = generate_synthetic(&spec, 8, "train").unwrap();
    assert_eq!(encode_bundle(&a.0, &a.1).unwrap(), encode_bundle(&b.0, &b.1).unwrap());
}

#[test]
fn zero_images_is_rejected() {
    assert!(matches!(
        generate_synthetic(&SyntheticSpec::default(), 0, "train"),
        Err(Error::Config(_))
    ));
}

#[test]
fn bundle_feeds_a_dataset() {
    let (m, px) = generate_synthetic(&SyntheticSpec::default(), 6, "train").unwrap();
    let (m2, px2) = decode_bundle(&encode_bundle(&m, &px).unwrap()).unwrap();
    let set = Dataset::from_pixels(m2, &px2, (16, 16)).unwrap();
    assert_eq!(set.len(), 6);
    assert!(set.images.iter().all(|t| t.shape() == [3, 16, 16]));
    assert!(set.images.iter().flat_map(|t| t.data()).all(|v| (-1.0..=1.0).contains(v)));
    let covered: usize = set.batches(4, 1, true).unwrap().map(|b| b.indices.len()).sum();
    assert_eq!(covered, 6);
}
