//! Case/control identification, index dating and the minimum-history filter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_store::{months_before, ConceptId, EventStore, PersonId};
use crate::io::{create_csv, format_date, CsvTable};

/// Washout applied to a control's last recorded condition.
pub const CONTROL_WASHOUT_MONTHS: u32 = 24;
/// Shift from the 12-month index to the 36-month index.
pub const LONG_HORIZON_SHIFT_MONTHS: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Case,
    Control,
}

impl Label {
    pub fn is_case(self) -> bool {
        self == Label::Case
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Case => "case",
            Label::Control => "control",
        }
    }
}

/// Prediction horizon in months. Only 12 and 36 are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Horizon(u32);

impl Horizon {
    pub const ONE_YEAR: Horizon = Horizon(12);
    pub const THREE_YEAR: Horizon = Horizon(36);

    pub fn months(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for Horizon {
    type Error = Error;

    fn try_from(m: u32) -> Result<Self> {
        match m {
            12 | 36 => Ok(Horizon(m)),
            other => Err(Error::invalid(format!("horizon must be 12 or 36 months, got {other}"))),
        }
    }
}

impl From<Horizon> for u32 {
    fn from(h: Horizon) -> u32 {
        h.0
    }
}

/// Concept → cancer-type label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CancerTypeMap(BTreeMap<ConceptId, String>);

impl CancerTypeMap {
    pub fn new(entries: impl IntoIterator<Item = (ConceptId, String)>) -> Self {
        Self(entries.into_iter().collect())
    }

    pub fn from_store(store: &EventStore) -> Self {
        Self(store.cancer_map().clone())
    }

    pub fn get(&self, concept: ConceptId) -> Option<&str> {
        self.0.get(&concept).map(String::as_str)
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.0.values().map(String::as_str).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every mapped concept must sit under the malignancy root and carry a nonempty label.
    pub fn validate(&self, store: &EventStore, malignancy_root: ConceptId) -> Result<()> {
        let malignant = store.descendants(malignancy_root)?;
        for (concept, label) in &self.0 {
            if label.is_empty() {
                return Err(Error::invalid(format!("empty cancer type for concept {concept}")));
            }
            if !malignant.contains(concept) {
                return Err(Error::invalid(format!(
                    "cancer map concept {concept} is not a descendant of {malignancy_root}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRecord {
    pub person_id: PersonId,
    pub cancer_type: String,
    pub diagnosis_date: NaiveDate,
    pub ambiguous_type: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaseIdentification {
    pub cases: Vec<CaseRecord>,
    /// Persons with malignancy events whose earliest event maps to no cancer type.
    pub unclassified: Vec<PersonId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortMember {
    pub person_id: PersonId,
    pub label: Label,
    pub cancer_type: Option<String>,
    pub diagnosis_date: Option<NaiveDate>,
    pub index_date: NaiveDate,
    pub horizon: Horizon,
    pub ambiguous_type: bool,
}

impl CohortMember {
    pub fn is_case(&self) -> bool {
        self.label.is_case()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexReport {
    pub before_birth: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryReport {
    pub kept: usize,
    pub dropped: usize,
}

/// One row per person with at least one malignancy event, typed by the earliest such event.
///
/// Same-day ties between differently typed concepts resolve to the lowest
/// mapped concept id and are flagged `ambiguous_type`.
pub fn identify_cases(
    store: &EventStore,
    malignancy_root: ConceptId,
    type_map: &CancerTypeMap,
) -> Result<CaseIdentification> {
    if type_map.is_empty() {
        return Err(Error::invalid("cancer type map is empty"));
    }
    let malignant = store.descendants(malignancy_root)?;
    let mut out = CaseIdentification::default();
    for person in store.persons() {
        let events = store.conditions(person.person_id);
        let Some(first) = events.iter().find(|e| malignant.contains(&e.concept_id)) else {
            continue;
        };
        // Same-date events are sorted by concept id, so the first mapped one is the lowest.
        let mapped: Vec<(ConceptId, &str)> = events
            .iter()
            .filter(|e| e.date == first.date && malignant.contains(&e.concept_id))
            .filter_map(|e| type_map.get(e.concept_id).map(|t| (e.concept_id, t)))
            .collect();
        match mapped.first() {
            None => out.unclassified.push(person.person_id),
            Some(&(_, label)) => {
                let distinct: BTreeSet<&str> = mapped.iter().map(|&(_, t)| t).collect();
                out.cases.push(CaseRecord {
                    person_id: person.person_id,
                    cancer_type: label.to_string(),
                    diagnosis_date: first.date,
                    ambiguous_type: distinct.len() > 1,
                });
            }
        }
    }
    Ok(out)
}

/// Persons with no malignancy events and at least one condition event.
pub fn select_controls(store: &EventStore, malignancy_root: ConceptId) -> Result<Vec<PersonId>> {
    let malignant = store.descendants(malignancy_root)?;
    Ok(store
        .persons()
        .filter_map(|p| {
            let events = store.conditions(p.person_id);
            let clean = !events.is_empty() && events.iter().all(|e| !malignant.contains(&e.concept_id));
            clean.then_some(p.person_id)
        })
        .collect())
}

/// Index date of a case diagnosed on `diagnosis`.
pub fn case_index_date(diagnosis: NaiveDate, horizon: Horizon) -> NaiveDate {
    let one_year = months_before(diagnosis, 12);
    match horizon.months() {
        12 => one_year,
        _ => months_before(one_year, LONG_HORIZON_SHIFT_MONTHS),
    }
}

/// Index date of a control whose last recorded condition is on `last_condition`.
pub fn control_index_date(last_condition: NaiveDate, horizon: Horizon) -> NaiveDate {
    let one_year = months_before(last_condition, CONTROL_WASHOUT_MONTHS);
    match horizon.months() {
        12 => one_year,
        _ => months_before(one_year, LONG_HORIZON_SHIFT_MONTHS),
    }
}

/// Builds cohort members for one horizon. Members whose index date is not
/// strictly after their birth date are dropped and counted.
pub fn assign_index_dates(
    cases: &[CaseRecord],
    controls: &[PersonId],
    store: &EventStore,
    horizon: Horizon,
) -> Result<(Vec<CohortMember>, IndexReport)> {
    let mut report = IndexReport::default();
    let mut members = Vec::with_capacity(cases.len() + controls.len());
    for c in cases {
        let birth = store.person(c.person_id)?.birth_date;
        let index_date = case_index_date(c.diagnosis_date, horizon);
        if index_date <= birth {
            report.before_birth += 1;
            continue;
        }
        members.push(CohortMember {
            person_id: c.person_id,
            label: Label::Case,
            cancer_type: Some(c.cancer_type.clone()),
            diagnosis_date: Some(c.diagnosis_date),
            index_date,
            horizon,
            ambiguous_type: c.ambiguous_type,
        });
    }
    for &pid in controls {
        let birth = store.person(pid)?.birth_date;
        let last = store
            .last_condition_date(pid)
            .ok_or_else(|| Error::invalid(format!("control {pid} has no condition events")))?;
        let index_date = control_index_date(last, horizon);
        if index_date <= birth {
            report.before_birth += 1;
            continue;
        }
        members.push(CohortMember {
            person_id: pid,
            label: Label::Control,
            cancer_type: None,
            diagnosis_date: None,
            index_date,
            horizon,
            ambiguous_type: false,
        });
    }
    Ok((members, report))
}

/// Number of distinct (concept, date) condition events strictly before `index_date`.
pub fn prior_condition_count(store: &EventStore, person: PersonId, index_date: NaiveDate) -> usize {
    // Sorted by date: count the prefix.
    store
        .conditions(person)
        .partition_point(|e| e.date < index_date)
}

pub fn filter_min_history(
    members: Vec<CohortMember>,
    store: &EventStore,
    min_conditions: usize,
) -> (Vec<CohortMember>, HistoryReport) {
    let before = members.len();
    let kept: Vec<CohortMember> = members
        .into_iter()
        .filter(|m| prior_condition_count(store, m.person_id, m.index_date) >= min_conditions)
        .collect();
    let report = HistoryReport {
        kept: kept.len(),
        dropped: before - kept.len(),
    };
    (kept, report)
}

/// Cases of one cancer type plus the shared control pool, in input order.
pub fn cohort_for_type<'a>(members: &'a [CohortMember], cancer_type: &str) -> Vec<&'a CohortMember> {
    members
        .iter()
        .filter(|m| match m.label {
            Label::Control => true,
            Label::Case => m.cancer_type.as_deref() == Some(cancer_type),
        })
        .collect()
}

const COHORT_HEADER: [&str; 7] = [
    "person_id",
    "label",
    "cancer_type",
    "diagnosis_date",
    "index_date",
    "horizon_months",
    "flags",
];

pub fn write_cohort_csv(path: &Path, members: &[CohortMember]) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(COHORT_HEADER)?;
    for m in members {
        w.write_record([
            m.person_id.to_string(),
            m.label.as_str().to_string(),
            m.cancer_type.clone().unwrap_or_default(),
            m.diagnosis_date.map(format_date).unwrap_or_default(),
            format_date(m.index_date),
            m.horizon.months().to_string(),
            if m.ambiguous_type { "ambiguous_type".into() } else { String::new() },
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cohort_csv(path: &Path) -> Result<Vec<CohortMember>> {
    let mut t = CsvTable::open(path, &COHORT_HEADER)?;
    let mut out = Vec::new();
    t.for_each(|row| {
        let label = match row.str("label")? {
            "case" => Label::Case,
            "control" => Label::Control,
            other => return Err(row.malformed("label", &format!("unknown label `{other}`"))),
        };
        let cancer_type = Some(row.str("cancer_type")?.to_string()).filter(|s| !s.is_empty());
        let diagnosis_date = if row.str("diagnosis_date")?.is_empty() {
            None
        } else {
            Some(row.date("diagnosis_date")?)
        };
        let horizon = Horizon::try_from(row.parse::<u32>("horizon_months")?)
            .map_err(|e| row.malformed("horizon_months", &e.to_string()))?;
        out.push(CohortMember {
            person_id: row.parse("person_id")?,
            label,
            cancer_type,
            diagnosis_date,
            index_date: row.date("index_date")?,
            horizon,
            ambiguous_type: row.str("flags")?.split(';').any(|f| f == "ambiguous_type"),
        });
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_store::{Concept, ConceptDomain, Person, Sex, StoreParts, AncestryMode};

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn concept(id: ConceptId) -> Concept {
        Concept {
            concept_id: id,
            name: format!("c{id}"),
            domain: ConceptDomain::Condition,
        }
    }

    fn person(id: PersonId, birth: &str) -> Person {
        Person {
            person_id: id,
            birth_date: d(birth),
            sex: Sex::Female,
            race: String::new(),
            ethnicity: String::new(),
        }
    }

    // 443392 -> 100 (breast), 101 (lung), 102 (unmapped); 1..=9 ordinary conditions.
    fn fixture(conditions: Vec<(PersonId, ConceptId, NaiveDate)>, persons: Vec<Person>) -> EventStore {
        let mut concepts: Vec<Concept> = (1..=9).map(concept).collect();
        concepts.extend([443392, 100, 101, 102].map(concept));
        EventStore::from_parts(StoreParts {
            persons,
            concepts,
            ancestry: vec![(443392, 100), (443392, 101), (443392, 102)],
            ancestry_mode: AncestryMode::Direct,
            conditions,
            cancer_map: vec![(100, "breast".into()), (101, "lung".into())],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn earliest_malignancy_event_sets_type() {
        let s = fixture(
            vec![(1, 100, d("2020-01-01")), (1, 101, d("2021-01-01")), (1, 1, d("2015-01-01"))],
            vec![person(1, "1960-01-01")],
        );
        let ids = identify_cases(&s, 443392, &CancerTypeMap::from_store(&s)).unwrap();
        assert_eq!(
            ids.cases,
            vec![CaseRecord {
                person_id: 1,
                cancer_type: "breast".into(),
                diagnosis_date: d("2020-01-01"),
                ambiguous_type: false
            }]
        );
    }

    #[test]
    fn same_day_tie_is_lowest_concept_and_flagged() {
        let s = fixture(
            vec![(1, 101, d("2020-01-01")), (1, 100, d("2020-01-01"))],
            vec![person(1, "1960-01-01")],
        );
        let ids = identify_cases(&s, 443392, &CancerTypeMap::from_store(&s)).unwrap();
        assert_eq!(ids.cases[0].cancer_type, "breast");
        assert!(ids.cases[0].ambiguous_type);
    }

    #[test]
    fn unmapped_earliest_event_is_unclassified_and_not_control() {
        let s = fixture(
            vec![(1, 102, d("2019-01-01")), (1, 100, d("2020-01-01")), (2, 1, d("2020-01-01"))],
            vec![person(1, "1960-01-01"), person(2, "1960-01-01")],
        );
        let ids = identify_cases(&s, 443392, &CancerTypeMap::from_store(&s)).unwrap();
        assert!(ids.cases.is_empty());
        assert_eq!(ids.unclassified, vec![1]);
        assert_eq!(select_controls(&s, 443392).unwrap(), vec![2]);
    }

    #[test]
    fn controls_need_a_condition_and_no_malignancy() {
        let s = fixture(
            vec![(1, 1, d("2020-01-01")), (2, 100, d("2020-01-01"))],
            vec![person(1, "1960-01-01"), person(2, "1960-01-01"), person(3, "1960-01-01")],
        );
        assert_eq!(select_controls(&s, 443392).unwrap(), vec![1]);
        let ids = identify_cases(&s, 443392, &CancerTypeMap::from_store(&s)).unwrap();
        assert_eq!(ids.cases.len(), 1);
    }

    #[test]
    fn empty_type_map_is_rejected() {
        let s = fixture(vec![], vec![person(1, "1960-01-01")]);
        assert!(identify_cases(&s, 443392, &CancerTypeMap::default()).is_err());
    }

    #[test]
    fn index_dates_follow_horizon_rules() {
        let s = fixture(
            vec![(1, 100, d("2020-06-15")), (2, 1, d("2022-03-10"))],
            vec![person(1, "1960-01-01"), person(2, "1960-01-01")],
        );
        let cases = identify_cases(&s, 443392, &CancerTypeMap::from_store(&s)).unwrap().cases;
        let controls = select_controls(&s, 443392).unwrap();
        let (m12, _) = assign_index_dates(&cases, &controls, &s, Horizon::ONE_YEAR).unwrap();
        assert_eq!(m12[0].index_date, d("2019-06-15"));
        assert_eq!(m12[1].index_date, d("2020-03-10"));
        let (m36, _) = assign_index_dates(&cases, &controls, &s, Horizon::THREE_YEAR).unwrap();
        assert_eq!(m36[0].index_date, d("2017-06-15"));
        assert_eq!(m36[1].index_date, d("2018-03-10"));
    }

    #[test]
    fn index_before_birth_is_dropped() {
        let s = fixture(
            vec![(1, 100, d("2020-06-15"))],
            vec![person(1, "2019-12-01")],
        );
        let cases = identify_cases(&s, 443392, &CancerTypeMap::from_store(&s)).unwrap().cases;
        let (m, r) = assign_index_dates(&cases, &[], &s, Horizon::ONE_YEAR).unwrap();
        assert!(m.is_empty());
        assert_eq!(r.before_birth, 1);
    }

    #[test]
    fn horizon_rejects_other_values() {
        assert!(Horizon::try_from(24).is_err());
    }

    #[test]
    fn min_history_boundary() {
        // Person 1: 5 conditions before index; person 2: 4.
        let mut rows = Vec::new();
        for c in 1..=5 {
            rows.push((1, c, d(&format!("2015-0{c}-01"))));
        }
        for c in 1..=4 {
            rows.push((2, c, d(&format!("2015-0{c}-01"))));
        }
        rows.push((1, 6, d("2020-01-01")));
        rows.push((2, 6, d("2020-01-01")));
        let s = fixture(rows, vec![person(1, "1960-01-01"), person(2, "1960-01-01")]);
        let members: Vec<CohortMember> = [1, 2]
            .map(|pid| CohortMember {
                person_id: pid,
                label: Label::Control,
                cancer_type: None,
                diagnosis_date: None,
                index_date: d("2019-01-01"),
                horizon: Horizon::ONE_YEAR,
                ambiguous_type: false,
            })
            .to_vec();
        let (kept, report) = filter_min_history(members.clone(), &s, 5);
        assert_eq!(kept.iter().map(|m| m.person_id).collect::<Vec<_>>(), vec![1]);
        assert_eq!(report.dropped, 1);
        let (kept, _) = filter_min_history(members, &s, 0);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn cohort_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        let members = vec![
            CohortMember {
                person_id: 7,
                label: Label::Case,
                cancer_type: Some("lung".into()),
                diagnosis_date: Some(d("2020-06-15")),
                index_date: d("2019-06-15"),
                horizon: Horizon::ONE_YEAR,
                ambiguous_type: true,
            },
            CohortMember {
                person_id: 8,
                label: Label::Control,
                cancer_type: None,
                diagnosis_date: None,
                index_date: d("2018-01-31"),
                horizon: Horizon::ONE_YEAR,
                ambiguous_type: false,
            },
        ];
        write_cohort_csv(&path, &members).unwrap();
        assert_eq!(read_cohort_csv(&path).unwrap(), members);
    }
}
