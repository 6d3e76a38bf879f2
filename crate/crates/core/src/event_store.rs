//! In-memory OMOP-lite event store.
//!
//! The store is built once, from CSV files listed in a [`DatasetManifest`] or
//! from in-memory [`StoreParts`], and is immutable afterwards. Loading drops
//! rows with concept id 0 and exact duplicate events, counting both in the
//! [`LoadReport`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;

pub type PersonId = u64;
pub type ConceptId = u64;

/// OMOP concept id of "malignant neoplastic disease".
pub const MALIGNANCY_ROOT: ConceptId = 443392;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptDomain {
    Condition,
    Drug,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventDomain {
    Condition,
    Drug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl std::str::FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Sex::Male),
            "female" | "f" => Ok(Sex::Female),
            "unknown" | "u" | "" => Ok(Sex::Unknown),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

impl std::str::FromStr for ConceptDomain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "condition" => Ok(ConceptDomain::Condition),
            "drug" => Ok(ConceptDomain::Drug),
            "other" => Ok(ConceptDomain::Other),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        }
    }
}

impl ConceptDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            ConceptDomain::Condition => "condition",
            ConceptDomain::Drug => "drug",
            ConceptDomain::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub concept_id: ConceptId,
    pub name: String,
    pub domain: ConceptDomain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Person {
    pub person_id: PersonId,
    pub birth_date: NaiveDate,
    pub sex: Sex,
    pub race: String,
    pub ethnicity: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClinicalEvent {
    pub person_id: PersonId,
    pub concept_id: ConceptId,
    pub date: NaiveDate,
    pub domain: EventDomain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveyRecord {
    pub person_id: PersonId,
    pub item_code: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarrierRecord {
    pub person_id: PersonId,
    pub gene: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AncestryMode {
    /// The ancestry file already holds the transitive closure.
    #[default]
    Closure,
    /// The ancestry file holds direct parent/child edges only.
    Direct,
}

/// Files making up one dataset. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub person: PathBuf,
    pub condition: PathBuf,
    pub drug: PathBuf,
    pub concept: PathBuf,
    pub ancestry: PathBuf,
    #[serde(default)]
    pub ancestry_mode: AncestryMode,
    #[serde(default)]
    pub survey: Option<PathBuf>,
    #[serde(default)]
    pub carrier: Option<PathBuf>,
    #[serde(default)]
    pub cancer_map: Option<PathBuf>,
    /// Declared survey item codes. When absent, the codes present in the survey file are used.
    #[serde(default)]
    pub survey_items: Option<Vec<String>>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = crate::io::read_string(path)?;
        let mut manifest: DatasetManifest = toml::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Row counts kept and dropped while building the store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub persons: usize,
    pub condition_events: usize,
    pub drug_events: usize,
    pub survey_records: usize,
    pub carrier_records: usize,
    pub duplicates: usize,
    pub unknown_concept: usize,
    pub before_birth: usize,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.duplicates + self.unknown_concept + self.before_birth
    }
}

/// Raw material for an [`EventStore`]; validated and deduplicated by [`EventStore::from_parts`].
#[derive(Debug, Clone, Default)]
pub struct StoreParts {
    pub persons: Vec<Person>,
    pub concepts: Vec<Concept>,
    pub ancestry: Vec<(ConceptId, ConceptId)>,
    pub ancestry_mode: AncestryMode,
    pub conditions: Vec<(PersonId, ConceptId, NaiveDate)>,
    pub drugs: Vec<(PersonId, ConceptId, NaiveDate)>,
    pub surveys: Vec<SurveyRecord>,
    pub carriers: Vec<CarrierRecord>,
    pub cancer_map: Vec<(ConceptId, String)>,
    pub survey_items: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStore {
    persons: BTreeMap<PersonId, Person>,
    concepts: BTreeMap<ConceptId, Concept>,
    // Non-reflexive closure: ancestor -> strict descendants.
    closure: BTreeMap<ConceptId, BTreeSet<ConceptId>>,
    conditions: BTreeMap<PersonId, Vec<ClinicalEvent>>,
    drugs: BTreeMap<PersonId, Vec<ClinicalEvent>>,
    surveys: BTreeMap<PersonId, Vec<SurveyRecord>>,
    carriers: BTreeMap<PersonId, BTreeSet<String>>,
    survey_items: BTreeSet<String>,
    cancer_map: BTreeMap<ConceptId, String>,
    report: LoadReport,
}

// Used for the origin-less error messages of in-memory parts.
const MEMORY: &str = "<memory>";

/// Loads, validates, deduplicates and indexes the dataset named by `manifest`.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<EventStore> {
    let mut parts = StoreParts {
        ancestry_mode: manifest.ancestry_mode,
        survey_items: manifest.survey_items.clone(),
        ..Default::default()
    };

    let mut t = CsvTable::open(
        &manifest.resolve(&manifest.person),
        &["person_id", "birth_date", "sex", "race", "ethnicity"],
    )?;
    let mut seen_person = BTreeSet::new();
    t.for_each(|row| {
        let person_id: PersonId = row.parse("person_id")?;
        if person_id == 0 {
            return Err(row.malformed("person_id", "must be positive"));
        }
        if !seen_person.insert(person_id) {
            return Err(row.malformed("person_id", "duplicate person_id"));
        }
        parts.persons.push(Person {
            person_id,
            birth_date: row.date("birth_date")?,
            sex: row.parse("sex")?,
            race: row.str("race")?.to_string(),
            ethnicity: row.str("ethnicity")?.to_string(),
        });
        Ok(())
    })?;

    let mut t = CsvTable::open(
        &manifest.resolve(&manifest.concept),
        &["concept_id", "name", "domain"],
    )?;
    let mut seen_concept = BTreeSet::new();
    t.for_each(|row| {
        let concept_id: ConceptId = row.parse("concept_id")?;
        if concept_id == 0 {
            // Reserved for "unknown"; never stored.
            return Ok(());
        }
        if !seen_concept.insert(concept_id) {
            return Err(row.malformed("concept_id", "duplicate concept_id"));
        }
        parts.concepts.push(Concept {
            concept_id,
            name: row.str("name")?.to_string(),
            domain: row.parse("domain")?,
        });
        Ok(())
    })?;

    let mut t = CsvTable::open(
        &manifest.resolve(&manifest.ancestry),
        &["ancestor_id", "descendant_id"],
    )?;
    t.for_each(|row| {
        let a: ConceptId = row.parse("ancestor_id")?;
        let d: ConceptId = row.parse("descendant_id")?;
        for (field, id) in [("ancestor_id", a), ("descendant_id", d)] {
            if !seen_concept.contains(&id) {
                return Err(row.malformed(field, &format!("concept {id} not in concept table")));
            }
        }
        parts.ancestry.push((a, d));
        Ok(())
    })?;

    for (path, sink) in [
        (&manifest.condition, &mut parts.conditions),
        (&manifest.drug, &mut parts.drugs),
    ] {
        let mut t = CsvTable::open(&manifest.resolve(path), &["person_id", "concept_id", "date"])?;
        t.for_each(|row| {
            let person_id: PersonId = row.parse("person_id")?;
            if !seen_person.contains(&person_id) {
                return Err(Error::DanglingPerson {
                    file: row.file().to_string(),
                    line: row.line,
                    person_id,
                });
            }
            sink.push((person_id, row.parse("concept_id")?, row.date("date")?));
            Ok(())
        })?;
    }

    if let Some(path) = &manifest.survey {
        let mut t = CsvTable::open(&manifest.resolve(path), &["person_id", "item_code", "value"])?;
        let declared: Option<BTreeSet<&str>> = manifest
            .survey_items
            .as_ref()
            .map(|v| v.iter().map(String::as_str).collect());
        t.for_each(|row| {
            let person_id: PersonId = row.parse("person_id")?;
            if !seen_person.contains(&person_id) {
                return Err(Error::DanglingPerson {
                    file: row.file().to_string(),
                    line: row.line,
                    person_id,
                });
            }
            let item_code = row.str("item_code")?.to_string();
            if let Some(declared) = &declared {
                if !declared.contains(item_code.as_str()) {
                    return Err(row.malformed("item_code", "item code not declared in manifest"));
                }
            }
            parts.surveys.push(SurveyRecord {
                person_id,
                item_code,
                value: row.str("value")?.to_string(),
            });
            Ok(())
        })?;
    }

    if let Some(path) = &manifest.carrier {
        let mut t = CsvTable::open(&manifest.resolve(path), &["person_id", "gene"])?;
        t.for_each(|row| {
            let person_id: PersonId = row.parse("person_id")?;
            if !seen_person.contains(&person_id) {
                return Err(Error::DanglingPerson {
                    file: row.file().to_string(),
                    line: row.line,
                    person_id,
                });
            }
            let gene = row.str("gene")?;
            if gene.is_empty() {
                return Err(row.malformed("gene", "empty gene symbol"));
            }
            parts.carriers.push(CarrierRecord {
                person_id,
                gene: gene.to_ascii_uppercase(),
            });
            Ok(())
        })?;
    }

    if let Some(path) = &manifest.cancer_map {
        let mut t = CsvTable::open(&manifest.resolve(path), &["concept_id", "cancer_type"])?;
        t.for_each(|row| {
            let concept_id: ConceptId = row.parse("concept_id")?;
            let label = row.str("cancer_type")?;
            if label.is_empty() {
                return Err(row.malformed("cancer_type", "empty label"));
            }
            if !seen_concept.contains(&concept_id) {
                return Err(row.malformed(
                    "concept_id",
                    &format!("concept {concept_id} not in concept table"),
                ));
            }
            parts.cancer_map.push((concept_id, label.to_string()));
            Ok(())
        })?;
    }

    EventStore::from_parts(parts)
}

impl EventStore {
    /// Builds a store from in-memory rows, applying the same validation and
    /// deduplication as [`load_dataset`].
    pub fn from_parts(parts: StoreParts) -> Result<Self> {
        let mut report = LoadReport::default();

        let mut persons = BTreeMap::new();
        for p in parts.persons {
            if p.person_id == 0 {
                return Err(Error::invalid("person_id must be positive"));
            }
            let id = p.person_id;
            if persons.insert(id, p).is_some() {
                return Err(Error::invalid(format!("duplicate person_id {id}")));
            }
        }
        report.persons = persons.len();

        let mut concepts = BTreeMap::new();
        for c in parts.concepts {
            if c.concept_id == 0 {
                continue;
            }
            let id = c.concept_id;
            if concepts.insert(id, c).is_some() {
                return Err(Error::invalid(format!("duplicate concept_id {id}")));
            }
        }

        for &(a, d) in &parts.ancestry {
            for id in [a, d] {
                if !concepts.contains_key(&id) {
                    return Err(Error::UnknownConcept(id));
                }
            }
        }
        let closure = match parts.ancestry_mode {
            AncestryMode::Closure => {
                let mut m: BTreeMap<ConceptId, BTreeSet<ConceptId>> = BTreeMap::new();
                for (a, d) in parts.ancestry {
                    if a != d {
                        m.entry(a).or_default().insert(d);
                    }
                }
                m
            }
            AncestryMode::Direct => transitive_closure(&parts.ancestry),
        };

        let conditions = index_events(
            parts.conditions,
            EventDomain::Condition,
            &persons,
            &mut report,
        )?;
        let drugs = index_events(parts.drugs, EventDomain::Drug, &persons, &mut report)?;
        report.condition_events = conditions.values().map(Vec::len).sum();
        report.drug_events = drugs.values().map(Vec::len).sum();

        let survey_items: BTreeSet<String> = match parts.survey_items {
            Some(items) => items.into_iter().collect(),
            None => parts.surveys.iter().map(|s| s.item_code.clone()).collect(),
        };
        let mut surveys: BTreeMap<PersonId, Vec<SurveyRecord>> = BTreeMap::new();
        for s in parts.surveys {
            if !persons.contains_key(&s.person_id) {
                return Err(Error::DanglingPerson {
                    file: MEMORY.into(),
                    line: 0,
                    person_id: s.person_id,
                });
            }
            if !survey_items.contains(&s.item_code) {
                return Err(Error::UnknownSurveyItem(s.item_code));
            }
            report.survey_records += 1;
            surveys.entry(s.person_id).or_default().push(s);
        }
        for v in surveys.values_mut() {
            v.sort_by(|a, b| (&a.item_code, &a.value).cmp(&(&b.item_code, &b.value)));
        }

        let mut carriers: BTreeMap<PersonId, BTreeSet<String>> = BTreeMap::new();
        for c in parts.carriers {
            if !persons.contains_key(&c.person_id) {
                return Err(Error::DanglingPerson {
                    file: MEMORY.into(),
                    line: 0,
                    person_id: c.person_id,
                });
            }
            let gene = c.gene.trim().to_ascii_uppercase();
            if gene.is_empty() {
                return Err(Error::invalid("empty carrier gene symbol"));
            }
            if carriers.entry(c.person_id).or_default().insert(gene) {
                report.carrier_records += 1;
            }
        }

        let mut cancer_map = BTreeMap::new();
        for (concept_id, label) in parts.cancer_map {
            if label.is_empty() {
                return Err(Error::invalid(format!("empty cancer type for concept {concept_id}")));
            }
            if !concepts.contains_key(&concept_id) {
                return Err(Error::UnknownConcept(concept_id));
            }
            cancer_map.insert(concept_id, label);
        }

        Ok(Self {
            persons,
            concepts,
            closure,
            conditions,
            drugs,
            surveys,
            carriers,
            survey_items,
            cancer_map,
            report,
        })
    }

    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    pub fn persons(&self) -> impl Iterator<Item = &Person> {
        self.persons.values()
    }

    pub fn person(&self, id: PersonId) -> Result<&Person> {
        self.persons.get(&id).ok_or(Error::UnknownPerson(id))
    }

    pub fn num_persons(&self) -> usize {
        self.persons.len()
    }

    pub fn concept(&self, id: ConceptId) -> Option<&Concept> {
        self.concepts.get(&id)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    /// Condition events of a person, sorted by (date, concept).
    pub fn conditions(&self, person: PersonId) -> &[ClinicalEvent] {
        self.conditions.get(&person).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Drug events of a person, sorted by (date, concept).
    pub fn drugs(&self, person: PersonId) -> &[ClinicalEvent] {
        self.drugs.get(&person).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn surveys(&self, person: PersonId) -> &[SurveyRecord] {
        self.surveys.get(&person).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn carrier_genes(&self, person: PersonId) -> Option<&BTreeSet<String>> {
        self.carriers.get(&person)
    }

    pub fn survey_items(&self) -> &BTreeSet<String> {
        &self.survey_items
    }

    pub fn cancer_map(&self) -> &BTreeMap<ConceptId, String> {
        &self.cancer_map
    }

    /// All descendants of `root`, including `root` itself.
    pub fn descendants(&self, root: ConceptId) -> Result<BTreeSet<ConceptId>> {
        if !self.concepts.contains_key(&root) {
            return Err(Error::UnknownConcept(root));
        }
        let mut out = self.closure.get(&root).cloned().unwrap_or_default();
        out.insert(root);
        Ok(out)
    }

    /// Union of `descendants` over several roots.
    pub fn expand(&self, roots: &[ConceptId]) -> Result<BTreeSet<ConceptId>> {
        let mut out = BTreeSet::new();
        for &r in roots {
            out.extend(self.descendants(r)?);
        }
        Ok(out)
    }

    /// Earliest condition date of `person` whose concept is in `concepts`.
    pub fn first_event_date(
        &self,
        person: PersonId,
        concepts: &BTreeSet<ConceptId>,
    ) -> Result<Option<NaiveDate>> {
        self.person(person)?;
        Ok(first_in(self.conditions(person), concepts))
    }

    pub fn last_condition_date(&self, person: PersonId) -> Option<NaiveDate> {
        self.conditions(person).last().map(|e| e.date)
    }
}

pub(crate) fn first_in(events: &[ClinicalEvent], concepts: &BTreeSet<ConceptId>) -> Option<NaiveDate> {
    // Events are date-sorted, so the first hit is the minimum.
    events
        .iter()
        .find(|e| concepts.contains(&e.concept_id))
        .map(|e| e.date)
}

fn index_events(
    rows: Vec<(PersonId, ConceptId, NaiveDate)>,
    domain: EventDomain,
    persons: &BTreeMap<PersonId, Person>,
    report: &mut LoadReport,
) -> Result<BTreeMap<PersonId, Vec<ClinicalEvent>>> {
    let mut by_person: BTreeMap<PersonId, BTreeSet<(NaiveDate, ConceptId)>> = BTreeMap::new();
    for (person_id, concept_id, date) in rows {
        let person = persons.get(&person_id).ok_or(Error::DanglingPerson {
            file: MEMORY.into(),
            line: 0,
            person_id,
        })?;
        if concept_id == 0 {
            report.unknown_concept += 1;
            continue;
        }
        if date < person.birth_date {
            report.before_birth += 1;
            continue;
        }
        if !by_person.entry(person_id).or_default().insert((date, concept_id)) {
            report.duplicates += 1;
        }
    }
    Ok(by_person
        .into_iter()
        .map(|(person_id, set)| {
            let events = set
                .into_iter()
                .map(|(date, concept_id)| ClinicalEvent {
                    person_id,
                    concept_id,
                    date,
                    domain,
                })
                .collect();
            (person_id, events)
        })
        .collect())
}

fn transitive_closure(edges: &[(ConceptId, ConceptId)]) -> BTreeMap<ConceptId, BTreeSet<ConceptId>> {
    let mut children: BTreeMap<ConceptId, Vec<ConceptId>> = BTreeMap::new();
    for &(a, d) in edges {
        if a != d {
            children.entry(a).or_default().push(d);
        }
    }
    let mut out = BTreeMap::new();
    for &root in children.keys() {
        let mut seen = BTreeSet::new();
        let mut stack = children[&root].clone();
        while let Some(c) = stack.pop() {
            if c != root && seen.insert(c) {
                if let Some(next) = children.get(&c) {
                    stack.extend(next.iter().copied());
                }
            }
        }
        out.insert(root, seen);
    }
    out
}

/// Calendar-month subtraction; the day is clamped to the end of the target month.
pub fn months_before(date: NaiveDate, months: u32) -> NaiveDate {
    date.checked_sub_months(Months::new(months))
        .expect("date arithmetic stays within chrono's range")
}

/// Whole years elapsed from `birth` to `at` (birthday-based).
pub fn age_in_years(birth: NaiveDate, at: NaiveDate) -> i32 {
    let mut years = at.year() - birth.year();
    if (at.month(), at.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    years
}
