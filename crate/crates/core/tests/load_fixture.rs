mod common;

use std::path::Path;

use chrono::NaiveDate;
use ehr_lift::cohort::{assign_index_dates, identify_cases, select_controls, CancerTypeMap, Horizon, Label};
use ehr_lift::event_store::{load_dataset, DatasetManifest, EventStore, MALIGNANCY_ROOT};
use ehr_lift::Error;

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn load(dir: &Path) -> ehr_lift::Result<EventStore> {
    load_dataset(&DatasetManifest::from_file(&dir.join("manifest.toml"))?)
}

fn copy_fixture(name: &str) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(common::fixture_dir(name)).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), tmp.path().join(entry.file_name())).unwrap();
    }
    tmp
}

#[test]
fn tiny_fixture_counts() {
    let store = load(&common::fixture_dir("tiny")).unwrap();
    let r = store.report();
    assert_eq!(r.persons, 3);
    assert_eq!(r.condition_events, 5);
    assert_eq!(r.drug_events, 1);
    assert_eq!(r.duplicates, 1);
    assert_eq!(r.unknown_concept, 1);
    assert_eq!(r.survey_records, 2);
    assert_eq!(r.carrier_records, 1);
    assert!(store.carrier_genes(3).unwrap().contains("BRCA2"));
    assert_eq!(store.cancer_map().get(&4180793).map(String::as_str), Some("pancreas"));
    assert!(store.descendants(MALIGNANCY_ROOT).unwrap().contains(&4180793));
}

#[test]
fn tiny_fixture_cases_and_controls() {
    let store = load(&common::fixture_dir("tiny")).unwrap();
    let types = CancerTypeMap::from_store(&store);
    let cases = identify_cases(&store, MALIGNANCY_ROOT, &types).unwrap().cases;
    assert_eq!(cases.len(), 1);
    assert_eq!(cases[0].person_id, 2);
    assert_eq!(cases[0].diagnosis_date, d("2020-03-31"));
    let controls = select_controls(&store, MALIGNANCY_ROOT).unwrap();
    assert_eq!(controls, [1, 3]);

    let (members, _) = assign_index_dates(&cases, &controls, &store, Horizon::ONE_YEAR).unwrap();
    let index: Vec<(u64, Label, NaiveDate)> = members.iter().map(|m| (m.person_id, m.label, m.index_date)).collect();
    assert_eq!(
        index,
        [
            (2, Label::Case, d("2019-03-31")),
            (1, Label::Control, d("2014-02-01")),
            (3, Label::Control, d("2016-09-09")),
        ]
    );
}

#[test]
fn dangling_person_is_reported_with_location() {
    let tmp = copy_fixture("tiny");
    let path = tmp.path().join("drug.csv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("42,1503297,2017-01-01\n");
    std::fs::write(&path, text).unwrap();
    match load(tmp.path()) {
        Err(Error::DanglingPerson { file, line, person_id }) => {
            assert!(file.ends_with("drug.csv"));
            assert_eq!(line, 3);
            assert_eq!(person_id, 42);
        }
        other => panic!("expected a dangling person error, got {other:?}"),
    }
}

#[test]
fn cancer_map_naming_an_unknown_concept_is_rejected() {
    let tmp = copy_fixture("tiny");
    std::fs::write(tmp.path().join("cancer_map.csv"), "concept_id,cancer_type\n999,lung\n").unwrap();
    let err = load(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("999"), "{err}");
}

#[test]
fn missing_required_column_is_malformed() {
    let tmp = copy_fixture("tiny");
    std::fs::write(tmp.path().join("carrier.csv"), "person_id\n3\n").unwrap();
    assert!(load(tmp.path()).is_err());
}
