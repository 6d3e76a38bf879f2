//! Declarative traditional risk factors, evaluated per cohort member at the index date.

use std::borrow::Borrow;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::CohortMember;
use crate::error::{Error, Result};
use crate::event_store::{age_in_years, first_in, ConceptId, EventStore, PersonId};
use crate::io::create_csv;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskFactorSpec {
    /// Attained age at index within `[min_years, max_years]`; no upper bound when `max_years` is absent.
    AgeRange {
        min_years: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_years: Option<u32>,
    },
    SurveyFlag {
        item_code: String,
        accepted_values: Vec<String>,
    },
    /// First diagnosis under any of `roots` strictly before index.
    ConditionPrior { roots: Vec<ConceptId> },
    CarrierGenes { genes: Vec<String> },
    /// First type-2 diabetes diagnosis before index with no diabetes medication before that diagnosis.
    NewOnsetDiabetes {
        t2d_roots: Vec<ConceptId>,
        medication_roots: Vec<ConceptId>,
    },
    AllOf { specs: Vec<RiskFactorSpec> },
    AnyOf { specs: Vec<RiskFactorSpec> },
}

impl RiskFactorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RiskFactorSpec::AgeRange { min_years, max_years } => {
                if let Some(max) = max_years {
                    if min_years > max {
                        return Err(Error::Config(format!(
                            "age range min {min_years} exceeds max {max}"
                        )));
                    }
                }
            }
            RiskFactorSpec::SurveyFlag { item_code, accepted_values } => {
                if item_code.is_empty() || accepted_values.is_empty() {
                    return Err(Error::Config("survey flag needs an item code and accepted values".into()));
                }
            }
            RiskFactorSpec::ConditionPrior { roots } => {
                if roots.is_empty() {
                    return Err(Error::Config("condition_prior needs at least one root".into()));
                }
            }
            RiskFactorSpec::CarrierGenes { genes } => {
                if genes.is_empty() || genes.iter().any(|g| g.trim().is_empty()) {
                    return Err(Error::Config("carrier_genes needs nonempty gene symbols".into()));
                }
            }
            RiskFactorSpec::NewOnsetDiabetes { t2d_roots, medication_roots } => {
                if t2d_roots.is_empty() || medication_roots.is_empty() {
                    return Err(Error::Config("new_onset_diabetes needs T2D and medication roots".into()));
                }
            }
            RiskFactorSpec::AllOf { specs } | RiskFactorSpec::AnyOf { specs } => {
                if specs.is_empty() {
                    return Err(Error::Config("empty all_of/any_of".into()));
                }
                for s in specs {
                    s.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// A named entry of the risk-factor registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedRiskFactor {
    pub name: String,
    /// Cancer types this factor is evaluated for; empty means all.
    #[serde(default)]
    pub cancer_types: Vec<String>,
    pub spec: RiskFactorSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskFactorRegistry {
    #[serde(default, rename = "risk_factor")]
    pub factors: Vec<NamedRiskFactor>,
}

const DEFAULT_REGISTRY: &str = include_str!("../assets/riskfactors.cfg");

impl RiskFactorRegistry {
    pub fn parse(text: &str) -> Result<Self> {
        let reg: RiskFactorRegistry = toml::from_str(text)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_string(path)?)
    }

    /// The editable default registry. Concept roots in it are starting points to check
    /// against the local vocabulary.
    pub fn defaults() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("bundled registry parses")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("registry serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for f in &self.factors {
            if f.name.is_empty() {
                return Err(Error::Config("risk factor with empty name".into()));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate risk factor `{}`", f.name)));
            }
            f.spec.validate()?;
        }
        Ok(())
    }

    pub fn for_cancer_type<'a>(&'a self, cancer_type: &'a str) -> impl Iterator<Item = &'a NamedRiskFactor> + 'a {
        self.factors
            .iter()
            .filter(move |f| f.cancer_types.is_empty() || f.cancer_types.iter().any(|t| t == cancer_type))
    }
}

/// One boolean per member, aligned with the member slice it was computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagVector {
    pub spec_name: String,
    pub person_ids: Vec<PersonId>,
    pub flags: Vec<bool>,
}

impl FlagVector {
    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

enum Compiled {
    Age { min: i32, max: Option<i32> },
    Survey { item: String, values: BTreeSet<String> },
    Prior(BTreeSet<ConceptId>),
    Carrier(BTreeSet<String>),
    Nod { t2d: BTreeSet<ConceptId>, meds: BTreeSet<ConceptId> },
    All(Vec<Compiled>),
    Any(Vec<Compiled>),
}

fn compile(spec: &RiskFactorSpec, store: &EventStore) -> Result<Compiled> {
    spec.validate()?;
    Ok(match spec {
        RiskFactorSpec::AgeRange { min_years, max_years } => Compiled::Age {
            min: *min_years as i32,
            max: max_years.map(|m| m as i32),
        },
        RiskFactorSpec::SurveyFlag { item_code, accepted_values } => {
            if !store.survey_items().contains(item_code) {
                return Err(Error::UnknownSurveyItem(item_code.clone()));
            }
            Compiled::Survey {
                item: item_code.clone(),
                values: accepted_values.iter().cloned().collect(),
            }
        }
        RiskFactorSpec::ConditionPrior { roots } => Compiled::Prior(store.expand(roots)?),
        RiskFactorSpec::CarrierGenes { genes } => {
            Compiled::Carrier(genes.iter().map(|g| g.trim().to_ascii_uppercase()).collect())
        }
        RiskFactorSpec::NewOnsetDiabetes { t2d_roots, medication_roots } => Compiled::Nod {
            t2d: store.expand(t2d_roots)?,
            meds: store.expand(medication_roots)?,
        },
        RiskFactorSpec::AllOf { specs } => {
            Compiled::All(specs.iter().map(|s| compile(s, store)).collect::<Result<_>>()?)
        }
        RiskFactorSpec::AnyOf { specs } => {
            Compiled::Any(specs.iter().map(|s| compile(s, store)).collect::<Result<_>>()?)
        }
    })
}

impl Compiled {
    fn eval(&self, m: &CohortMember, store: &EventStore) -> Result<bool> {
        let pid = m.person_id;
        Ok(match self {
            Compiled::Age { min, max } => {
                let age = age_in_years(store.person(pid)?.birth_date, m.index_date);
                age >= *min && max.is_none_or(|mx| age <= mx)
            }
            Compiled::Survey { item, values } => store
                .surveys(pid)
                .iter()
                .any(|s| &s.item_code == item && values.contains(&s.value)),
            Compiled::Prior(set) => {
                first_in(store.conditions(pid), set).is_some_and(|d| d < m.index_date)
            }
            Compiled::Carrier(genes) => store
                .carrier_genes(pid)
                .is_some_and(|g| !g.is_disjoint(genes)),
            Compiled::Nod { t2d, meds } => match first_in(store.conditions(pid), t2d) {
                Some(first_t2d) if first_t2d < m.index_date => !store
                    .drugs(pid)
                    .iter()
                    .any(|e| e.date < first_t2d && meds.contains(&e.concept_id)),
                _ => false,
            },
            Compiled::All(parts) => {
                for p in parts {
                    if !p.eval(m, store)? {
                        return Ok(false);
                    }
                }
                true
            }
            Compiled::Any(parts) => {
                for p in parts {
                    if p.eval(m, store)? {
                        return Ok(true);
                    }
                }
                false
            }
        })
    }
}

/// Evaluates `spec` for every member at the member's index date.
pub fn evaluate_spec<M: Borrow<CohortMember>>(
    name: &str,
    spec: &RiskFactorSpec,
    members: &[M],
    store: &EventStore,
) -> Result<FlagVector> {
    let compiled = compile(spec, store)?;
    let mut flags = Vec::with_capacity(members.len());
    let mut person_ids = Vec::with_capacity(members.len());
    for m in members {
        let m = m.borrow();
        person_ids.push(m.person_id);
        flags.push(compiled.eval(m, store)?);
    }
    Ok(FlagVector {
        spec_name: name.to_string(),
        person_ids,
        flags,
    })
}

/// Fraction of members flagged.
pub fn coverage_of(flags: &FlagVector) -> Result<f64> {
    if flags.flags.is_empty() {
        return Err(Error::invalid("coverage of an empty member list"));
    }
    Ok(flags.flagged_count() as f64 / flags.flags.len() as f64)
}

pub fn write_flags_csv(path: &Path, vectors: &[FlagVector]) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["person_id", "spec_name", "flagged"])?;
    for v in vectors {
        for (pid, f) in v.person_ids.iter().zip(&v.flags) {
            w.write_record([pid.to_string(), v.spec_name.clone(), u8::from(*f).to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_flags_csv`]; vectors keep file order.
pub fn read_flags_csv(path: &Path) -> Result<Vec<FlagVector>> {
    let mut out: Vec<FlagVector> = Vec::new();
    let mut t = crate::io::CsvTable::open(path, &["person_id", "spec_name", "flagged"])?;
    t.for_each(|row| {
        let name = row.str("spec_name")?;
        let flagged = match row.str("flagged")? {
            "1" => true,
            "0" => false,
            _ => return Err(row.malformed("flagged", "expected 0 or 1")),
        };
        let pid = row.parse("person_id")?;
        match out.iter_mut().find(|v| v.spec_name == name) {
            Some(v) => {
                v.person_ids.push(pid);
                v.flags.push(flagged);
            }
            None => out.push(FlagVector {
                spec_name: name.to_string(),
                person_ids: vec![pid],
                flags: vec![flagged],
            }),
        }
        Ok(())
    })?;
    Ok(out)
}
