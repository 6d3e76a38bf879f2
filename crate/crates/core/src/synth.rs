//! Synthetic OMOP-lite datasets with planted, known risk structure, and
//! Monte-Carlo oracles for the lift achievable on them.
//!
//! Each person's outcome is drawn from a logistic model over binary signal
//! conditions and planted flags (carrier genes, survey answers). The
//! intercept and the flag coefficients are calibrated so that the population
//! prevalence and each flag's expected lift hit their configured targets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{auroc, lift_at_coverage};
use crate::event_store::{
    months_before, AncestryMode, CarrierRecord, Concept, ConceptDomain, ConceptId, DatasetManifest, Person,
    PersonId, Sex, StoreParts, SurveyRecord, MALIGNANCY_ROOT,
};
use crate::io::{create_csv, format_date, write_string};
use crate::learners::sigmoid;
use crate::risk_factors::{NamedRiskFactor, RiskFactorRegistry, RiskFactorSpec};

pub const BACKGROUND_CONCEPT_BASE: ConceptId = 1_000_000;
pub const SIGNAL_CONCEPT_BASE: ConceptId = 2_000_000;
pub const CANCER_CONCEPT_BASE: ConceptId = 3_000_000;
pub const DRUG_CONCEPT_BASE: ConceptId = 4_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalConcept {
    /// Probability that a person carries the condition.
    pub rate: f64,
    pub log_odds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantedRecord {
    Carrier { gene: String },
    Survey { item_code: String, value: String },
}

/// A binary flag entering the outcome model, calibrated to a target lift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFlag {
    pub name: String,
    pub rate: f64,
    /// Expected P(case | flag) / P(case).
    pub enrichment: f64,
    pub record: PlantedRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CancerTypeWeight {
    pub label: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub persons: usize,
    pub background_concepts: usize,
    pub zipf_exponent: f64,
    pub signals: Vec<SignalConcept>,
    pub prevalence: f64,
    pub min_conditions: usize,
    pub max_conditions: usize,
    pub lookback_years: u32,
    /// Months between a case's last non-cancer condition and its diagnosis.
    pub diagnosis_gap_months: u32,
    pub flags: Vec<PlantedFlag>,
    pub cancer_types: Vec<CancerTypeWeight>,
    pub drug_concepts: usize,
    pub max_drugs: usize,
    pub calibration_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            persons: 10_000,
            background_concepts: 2_000,
            zipf_exponent: 1.1,
            signals: (0..10)
                .map(|j| SignalConcept {
                    rate: 0.05,
                    log_odds: 0.8 + 0.2 * j as f64,
                })
                .collect(),
            prevalence: 0.10,
            min_conditions: 6,
            max_conditions: 20,
            lookback_years: 8,
            diagnosis_gap_months: 13,
            flags: vec![
                PlantedFlag {
                    name: "carrier".into(),
                    rate: 0.01,
                    enrichment: 4.71,
                    record: PlantedRecord::Carrier { gene: "BRCA2".into() },
                },
                PlantedFlag {
                    name: "fh_pancreas".into(),
                    rate: 0.02,
                    enrichment: 2.0,
                    record: PlantedRecord::Survey {
                        item_code: "FH_PANCREAS".into(),
                        value: "yes".into(),
                    },
                },
            ],
            cancer_types: vec![CancerTypeWeight {
                label: "pancreas".into(),
                weight: 1.0,
            }],
            drug_concepts: 50,
            max_drugs: 3,
            calibration_samples: 1_000_000,
            seed: 0,
        }
    }
}

// Diagnosis and last-visit dates fall in this window.
const ANCHOR_START: (i32, u32, u32) = (2016, 1, 1);
const ANCHOR_END: (i32, u32, u32) = (2022, 12, 31);
const MIN_AGE_YEARS: u32 = 40;
const MAX_AGE_YEARS: u32 = 80;
const MAX_FLAGS: usize = 8;
const MAX_SIGNALS: usize = 64;

fn ymd((y, m, d): (i32, u32, u32)) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid constant date")
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.persons == 0 {
            return bad("persons must be positive".into());
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence {} outside (0, 1)", self.prevalence));
        }
        if self.min_conditions < 6 || self.max_conditions < self.min_conditions {
            return bad("conditions per person need 6 <= min <= max".into());
        }
        if self.signals.len() > self.background_concepts || self.signals.len() > MAX_SIGNALS {
            return bad(format!(
                "{} signal concepts; at most min(background_concepts, {MAX_SIGNALS})",
                self.signals.len()
            ));
        }
        if self.background_concepts < 2 * self.max_conditions {
            return bad("background_concepts must be at least twice max_conditions".into());
        }
        if self.zipf_exponent <= 0.0 {
            return bad("zipf_exponent must be positive".into());
        }
        for s in &self.signals {
            if !(0.0..=1.0).contains(&s.rate) || !s.log_odds.is_finite() {
                return bad("signal rate must be in [0, 1] and log-odds finite".into());
            }
        }
        if self.flags.len() > MAX_FLAGS {
            return bad(format!("at most {MAX_FLAGS} planted flags"));
        }
        for f in &self.flags {
            if !(f.rate > 0.0 && f.rate < 1.0) {
                return bad(format!("flag `{}` rate outside (0, 1)", f.name));
            }
            if !(f.enrichment > 0.0 && f.enrichment < 1.0 / self.prevalence) {
                return bad(format!(
                    "flag `{}` enrichment {} is not below 1/prevalence",
                    f.name, f.enrichment
                ));
            }
        }
        if self.diagnosis_gap_months < 13 {
            return bad("diagnosis_gap_months must be at least 13".into());
        }
        if self.lookback_years == 0 || self.lookback_years >= MIN_AGE_YEARS {
            return bad(format!("lookback_years must be in 1..{MIN_AGE_YEARS}"));
        }
        // Controls need room for the washout before their last visit.
        if self.lookback_years * 12 <= self.diagnosis_gap_months + 12 {
            return bad("lookback window shorter than the pre-index gap".into());
        }
        if self.cancer_types.is_empty() || self.cancer_types.iter().any(|c| c.label.is_empty() || c.weight <= 0.0) {
            return bad("cancer_types needs labelled entries with positive weight".into());
        }
        if self.calibration_samples == 0 {
            return bad("calibration_samples must be positive".into());
        }
        Ok(())
    }
}

/// Coefficients of the outcome model after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub intercept: f64,
    pub flag_log_odds: Vec<f64>,
    /// Expected prevalence and per-flag lift under the calibrated coefficients.
    pub prevalence: f64,
    pub flag_lifts: Vec<f64>,
}

struct Covariates {
    signals: Vec<bool>,
    flags: Vec<bool>,
}

fn draw_covariates(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Covariates {
    Covariates {
        signals: config.signals.iter().map(|s| rng.gen_bool(s.rate)).collect(),
        flags: config.flags.iter().map(|f| rng.gen_bool(f.rate)).collect(),
    }
}

fn signal_margin(config: &SynthConfig, signals: &[bool]) -> f64 {
    config
        .signals
        .iter()
        .zip(signals)
        .filter(|(_, &x)| x)
        .map(|(s, _)| s.log_odds)
        .sum()
}

fn margin(config: &SynthConfig, cal: &Calibration, cov: &Covariates) -> f64 {
    cal.intercept
        + signal_margin(config, &cov.signals)
        + cal
            .flag_log_odds
            .iter()
            .zip(&cov.flags)
            .filter(|(_, &f)| f)
            .map(|(b, _)| b)
            .sum::<f64>()
}

/// Signal-margin distribution (from a Monte-Carlo sample) crossed with the exact
/// flag distribution, flags being independent of signals.
struct MarginTable {
    signal: Vec<(f64, f64)>,
    flag_rates: Vec<f64>,
}

impl MarginTable {
    fn new(config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for _ in 0..config.calibration_samples {
            let mut mask = 0u64;
            for (j, s) in config.signals.iter().enumerate() {
                if rng.gen_bool(s.rate) {
                    mask |= 1 << j;
                }
            }
            *counts.entry(mask).or_default() += 1;
        }
        let total = config.calibration_samples as f64;
        let signal = counts
            .into_iter()
            .map(|(mask, n)| {
                let m: f64 = (0..config.signals.len())
                    .filter(|j| mask >> j & 1 == 1)
                    .map(|j| config.signals[j].log_odds)
                    .sum();
                (m, n as f64 / total)
            })
            .collect();
        Self {
            signal,
            flag_rates: config.flags.iter().map(|f| f.rate).collect(),
        }
    }

    /// (E[p], E[p · flag_j] for each j).
    fn moments(&self, intercept: f64, flag_beta: &[f64]) -> (f64, Vec<f64>) {
        let nf = self.flag_rates.len();
        let mut mean = 0.0;
        let mut joint = vec![0.0; nf];
        for combo in 0..(1usize << nf) {
            let mut weight = 1.0;
            let mut offset = intercept;
            for (j, (&rate, &beta)) in self.flag_rates.iter().zip(flag_beta).enumerate() {
                if combo >> j & 1 == 1 {
                    weight *= rate;
                    offset += beta;
                } else {
                    weight *= 1.0 - rate;
                }
            }
            let e: f64 = self.signal.iter().map(|&(m, w)| w * sigmoid(offset + m)).sum::<f64>() * weight;
            mean += e;
            for (j, v) in joint.iter_mut().enumerate() {
                if combo >> j & 1 == 1 {
                    *v += e;
                }
            }
        }
        (mean, joint)
    }

    fn intercept_for(&self, prevalence: f64, flag_beta: &[f64]) -> Result<f64> {
        bisect(-40.0, 40.0, |b| self.moments(b, flag_beta).0 - prevalence)
            .ok_or_else(|| Error::Config(format!("cannot reach prevalence {prevalence}")))
    }

    fn lifts(&self, intercept: f64, flag_beta: &[f64]) -> (f64, Vec<f64>) {
        let (mean, joint) = self.moments(intercept, flag_beta);
        let lifts = joint
            .iter()
            .zip(&self.flag_rates)
            .map(|(j, r)| j / r / mean)
            .collect();
        (mean, lifts)
    }
}

/// Root of an increasing function on `[lo, hi]`; `None` when not bracketed.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> Option<f64> {
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Solves for the intercept and flag coefficients by coordinate-wise bisection.
pub fn calibrate(config: &SynthConfig) -> Result<Calibration> {
    config.validate()?;
    let table = MarginTable::new(config);
    let mut beta = vec![0.0; config.flags.len()];
    for _ in 0..100 {
        let mut moved = 0.0f64;
        for j in 0..beta.len() {
            let target = config.flags[j].enrichment;
            let solve = |b: f64| -> f64 {
                let mut trial = beta.clone();
                trial[j] = b;
                match table.intercept_for(config.prevalence, &trial) {
                    Ok(b0) => table.lifts(b0, &trial).1[j] - target,
                    Err(_) => f64::NAN,
                }
            };
            let b = bisect(-20.0, 20.0, solve).ok_or_else(|| {
                Error::Config(format!(
                    "flag `{}` enrichment {target} unreachable at prevalence {}",
                    config.flags[j].name, config.prevalence
                ))
            })?;
            moved = moved.max((b - beta[j]).abs());
            beta[j] = b;
        }
        if moved < 1e-10 {
            break;
        }
    }
    let intercept = table.intercept_for(config.prevalence, &beta)?;
    let (prevalence, flag_lifts) = table.lifts(intercept, &beta);
    Ok(Calibration {
        intercept,
        flag_log_odds: beta,
        prevalence,
        flag_lifts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub person_id: PersonId,
    pub true_probability: f64,
    pub label: bool,
}

/// An in-memory synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub parts: StoreParts,
    pub truth: Vec<TruthRow>,
    pub calibration: Calibration,
    pub config: SynthConfig,
}

struct PersonDraw {
    person: Person,
    truth: TruthRow,
    conditions: Vec<(ConceptId, NaiveDate)>,
    drugs: Vec<(ConceptId, NaiveDate)>,
    flags: Vec<bool>,
}

fn uniform_date(rng: &mut ChaCha8Rng, start: NaiveDate, end: NaiveDate) -> NaiveDate {
    let span = (end - start).num_days().max(0) as u64;
    start + Days::new(rng.gen_range(0..=span))
}

fn draw_person(
    pid: PersonId,
    config: &SynthConfig,
    cal: &Calibration,
    zipf: &Zipf<f64>,
    type_weights: &[f64],
) -> Result<PersonDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(pid);
    let cov = draw_covariates(&mut rng, config);
    let p = sigmoid(margin(config, cal, &cov));
    let label = rng.gen_bool(p);

    let anchor = uniform_date(&mut rng, ymd(ANCHOR_START), ymd(ANCHOR_END));
    // Feature conditions end strictly before the index date of either label.
    let feature_end = if label {
        months_before(anchor, config.diagnosis_gap_months)
    } else {
        months_before(anchor, config.diagnosis_gap_months + 12)
    };
    let feature_start = months_before(anchor, config.lookback_years * 12);
    if feature_end <= feature_start {
        return Err(Error::Config("infeasible date layout: empty feature window".into()));
    }

    let age_days = rng.gen_range(MIN_AGE_YEARS * 365..=MAX_AGE_YEARS * 365);
    let birth_date = anchor - Days::new(age_days as u64);
    let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };

    let n_signals = cov.signals.iter().filter(|&&x| x).count();
    let n_total = rng.gen_range(config.min_conditions..=config.max_conditions).max(n_signals);
    let mut chosen: Vec<ConceptId> = cov
        .signals
        .iter()
        .enumerate()
        .filter(|(_, &x)| x)
        .map(|(j, _)| SIGNAL_CONCEPT_BASE + j as ConceptId)
        .collect();
    while chosen.len() < n_total {
        let c = BACKGROUND_CONCEPT_BASE + zipf.sample(&mut rng) as ConceptId;
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    let mut conditions: Vec<(ConceptId, NaiveDate)> = chosen
        .into_iter()
        .map(|c| (c, uniform_date(&mut rng, feature_start, feature_end)))
        .collect();
    if label {
        let total: f64 = type_weights.iter().sum();
        let mut u = rng.gen_range(0.0..total);
        let mut t = type_weights.len() - 1;
        for (i, w) in type_weights.iter().enumerate() {
            if u < *w {
                t = i;
                break;
            }
            u -= w;
        }
        conditions.push((CANCER_CONCEPT_BASE + t as ConceptId, anchor));
    } else {
        // Last recorded visit; fixes the control index date.
        let c = BACKGROUND_CONCEPT_BASE + zipf.sample(&mut rng) as ConceptId;
        conditions.push((c, anchor));
    }
    conditions.sort();

    let n_drugs = if config.drug_concepts == 0 { 0 } else { rng.gen_range(0..=config.max_drugs) };
    let mut drugs: Vec<(ConceptId, NaiveDate)> = (0..n_drugs)
        .map(|_| {
            let c = DRUG_CONCEPT_BASE + rng.gen_range(1..=config.drug_concepts) as ConceptId;
            (c, uniform_date(&mut rng, feature_start, feature_end))
        })
        .collect();
    drugs.sort();
    drugs.dedup();

    Ok(PersonDraw {
        person: Person {
            person_id: pid,
            birth_date,
            sex,
            race: "unknown".into(),
            ethnicity: "unknown".into(),
        },
        truth: TruthRow {
            person_id: pid,
            true_probability: p,
            label,
        },
        conditions,
        drugs,
        flags: cov.flags,
    })
}

fn concept(id: ConceptId, name: String, domain: ConceptDomain) -> Concept {
    Concept {
        concept_id: id,
        name,
        domain,
    }
}

/// Draws the full dataset. Persons are generated in parallel from per-person
/// RNG streams, so the output does not depend on the thread count.
pub fn synthesize(config: &SynthConfig) -> Result<SynthDataset> {
    let calibration = calibrate(config)?;
    let zipf = Zipf::new(config.background_concepts as u64, config.zipf_exponent)
        .map_err(|e| Error::Config(format!("zipf: {e}")))?;
    let weights: Vec<f64> = config.cancer_types.iter().map(|c| c.weight).collect();
    let draws: Vec<PersonDraw> = (1..=config.persons as PersonId)
        .into_par_iter()
        .map(|pid| draw_person(pid, config, &calibration, &zipf, &weights))
        .collect::<Result<_>>()?;

    let mut parts = StoreParts {
        ancestry_mode: AncestryMode::Direct,
        ..Default::default()
    };
    parts.concepts.push(concept(
        MALIGNANCY_ROOT,
        "Malignant neoplastic disease".into(),
        ConceptDomain::Condition,
    ));
    for i in 1..=config.background_concepts {
        parts.concepts.push(concept(
            BACKGROUND_CONCEPT_BASE + i as ConceptId,
            format!("Background condition {i}"),
            ConceptDomain::Condition,
        ));
    }
    for j in 0..config.signals.len() {
        parts.concepts.push(concept(
            SIGNAL_CONCEPT_BASE + j as ConceptId,
            format!("Signal condition {j}"),
            ConceptDomain::Condition,
        ));
    }
    for (t, c) in config.cancer_types.iter().enumerate() {
        let id = CANCER_CONCEPT_BASE + t as ConceptId;
        parts
            .concepts
            .push(concept(id, format!("Malignant neoplasm of {}", c.label), ConceptDomain::Condition));
        parts.ancestry.push((MALIGNANCY_ROOT, id));
        parts.cancer_map.push((id, c.label.clone()));
    }
    for i in 1..=config.drug_concepts {
        parts.concepts.push(concept(
            DRUG_CONCEPT_BASE + i as ConceptId,
            format!("Drug {i}"),
            ConceptDomain::Drug,
        ));
    }
    let survey_items: Vec<String> = config
        .flags
        .iter()
        .filter_map(|f| match &f.record {
            PlantedRecord::Survey { item_code, .. } => Some(item_code.clone()),
            PlantedRecord::Carrier { .. } => None,
        })
        .collect();
    parts.survey_items = Some(survey_items);

    let mut truth = Vec::with_capacity(draws.len());
    for d in draws {
        let pid = d.person.person_id;
        parts.conditions.extend(d.conditions.iter().map(|&(c, t)| (pid, c, t)));
        parts.drugs.extend(d.drugs.iter().map(|&(c, t)| (pid, c, t)));
        for (flag, &on) in config.flags.iter().zip(&d.flags) {
            match &flag.record {
                PlantedRecord::Carrier { gene } => {
                    if on {
                        parts.carriers.push(CarrierRecord {
                            person_id: pid,
                            gene: gene.clone(),
                        });
                    }
                }
                PlantedRecord::Survey { item_code, value } => parts.surveys.push(SurveyRecord {
                    person_id: pid,
                    item_code: item_code.clone(),
                    value: if on { value.clone() } else { negative_answer(value).into() },
                }),
            }
        }
        parts.persons.push(d.person);
        truth.push(d.truth);
    }
    Ok(SynthDataset {
        parts,
        truth,
        calibration,
        config: config.clone(),
    })
}

fn negative_answer(value: &str) -> &'static str {
    if value == "no" {
        "none"
    } else {
        "no"
    }
}

impl SynthDataset {
    pub fn prevalence(&self) -> f64 {
        self.truth.iter().filter(|t| t.label).count() as f64 / self.truth.len() as f64
    }

    /// Risk-factor registry matching the planted flags, evaluated for every cancer type.
    pub fn planted_registry(&self) -> RiskFactorRegistry {
        let factors = self
            .config
            .flags
            .iter()
            .map(|f| NamedRiskFactor {
                name: f.name.clone(),
                cancer_types: Vec::new(),
                spec: match &f.record {
                    PlantedRecord::Carrier { gene } => RiskFactorSpec::CarrierGenes { genes: vec![gene.clone()] },
                    PlantedRecord::Survey { item_code, value } => RiskFactorSpec::SurveyFlag {
                        item_code: item_code.clone(),
                        accepted_values: vec![value.clone()],
                    },
                },
            })
            .collect();
        RiskFactorRegistry { factors }
    }

    /// Writes the CSV tables, `manifest.toml`, `truth.csv` and `riskfactors.toml` into `dir`.
    /// Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = &self.parts;
        let mut w = create_csv(&dir.join("person.csv"))?;
        w.write_record(["person_id", "birth_date", "sex", "race", "ethnicity"])?;
        for x in &p.persons {
            w.write_record([
                x.person_id.to_string(),
                format_date(x.birth_date),
                x.sex.as_str().into(),
                x.race.clone(),
                x.ethnicity.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        for (name, events) in [("condition.csv", &p.conditions), ("drug.csv", &p.drugs)] {
            let mut w = create_csv(&dir.join(name))?;
            w.write_record(["person_id", "concept_id", "date"])?;
            for (pid, c, t) in events {
                w.write_record([pid.to_string(), c.to_string(), format_date(*t)])?;
            }
            w.flush().map_err(|e| Error::io(dir, e))?;
        }

        let mut w = create_csv(&dir.join("concept.csv"))?;
        w.write_record(["concept_id", "name", "domain"])?;
        for c in &p.concepts {
            w.write_record([c.concept_id.to_string(), c.name.clone(), c.domain.as_str().into()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = create_csv(&dir.join("ancestry.csv"))?;
        w.write_record(["ancestor_id", "descendant_id"])?;
        for (a, d) in &p.ancestry {
            w.write_record([a.to_string(), d.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = create_csv(&dir.join("survey.csv"))?;
        w.write_record(["person_id", "item_code", "value"])?;
        for s in &p.surveys {
            w.write_record([s.person_id.to_string(), s.item_code.clone(), s.value.clone()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = create_csv(&dir.join("carrier.csv"))?;
        w.write_record(["person_id", "gene"])?;
        for c in &p.carriers {
            w.write_record([c.person_id.to_string(), c.gene.clone()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = create_csv(&dir.join("cancer_map.csv"))?;
        w.write_record(["concept_id", "cancer_type"])?;
        for (c, t) in &p.cancer_map {
            w.write_record([c.to_string(), t.clone()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = create_csv(&dir.join("truth.csv"))?;
        w.write_record(["person_id", "true_probability", "label"])?;
        for t in &self.truth {
            w.write_record([
                t.person_id.to_string(),
                t.true_probability.to_string(),
                u8::from(t.label).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let manifest = DatasetManifest {
            person: "person.csv".into(),
            condition: "condition.csv".into(),
            drug: "drug.csv".into(),
            concept: "concept.csv".into(),
            ancestry: "ancestry.csv".into(),
            ancestry_mode: AncestryMode::Direct,
            survey: Some("survey.csv".into()),
            carrier: Some("carrier.csv".into()),
            cancer_map: Some("cancer_map.csv".into()),
            survey_items: p.survey_items.clone(),
            base_dir: PathBuf::new(),
        };
        let path = dir.join("manifest.toml");
        write_string(&path, &manifest.to_toml())?;
        write_string(&dir.join("riskfactors.toml"), &self.planted_registry().to_toml())?;
        write_string(&dir.join("calibration.json"), &serde_json::to_string_pretty(&self.calibration)?)?;
        Ok(path)
    }
}

/// Monte-Carlo estimate of a ranker's lift and AUROC on realized labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub coverage: f64,
    pub lift: f64,
    pub auroc: f64,
    /// Standard error of `lift`, from independent batches.
    pub standard_error: f64,
    pub auroc_standard_error: f64,
    pub samples: usize,
}

const ORACLE_BATCHES: usize = 20;

struct Simulated {
    probability: f64,
    flags: Vec<bool>,
    label: bool,
}

fn simulate(config: &SynthConfig, cal: &Calibration, n: usize, seed: u64, batch: usize) -> Vec<Simulated> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    (0..n)
        .map(|_| {
            let cov = draw_covariates(&mut rng, config);
            let probability = sigmoid(margin(config, cal, &cov));
            let label = rng.gen_bool(probability);
            Simulated {
                probability,
                flags: cov.flags,
                label,
            }
        })
        .collect()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Lift at coverage `q` of ranking by the true probability, averaged over
/// independent batches of `mc_samples / 20` simulated persons.
pub fn oracle_lift(config: &SynthConfig, q: f64, mc_samples: usize, seed: u64) -> Result<OracleResult> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("coverage {q} outside (0, 1]")));
    }
    let cal = calibrate(config)?;
    let per_batch = mc_samples / ORACLE_BATCHES;
    if per_batch == 0 {
        return Err(Error::invalid(format!("need at least {ORACLE_BATCHES} Monte-Carlo samples")));
    }
    let results: Vec<(f64, f64)> = (0..ORACLE_BATCHES)
        .into_par_iter()
        .map(|b| {
            let sims = simulate(config, &cal, per_batch, seed, b);
            let scores: Vec<f64> = sims.iter().map(|s| s.probability).collect();
            let labels: Vec<bool> = sims.iter().map(|s| s.label).collect();
            let ids: Vec<PersonId> = (0..sims.len() as PersonId).collect();
            let lift = lift_at_coverage(&scores, &labels, &ids, q)?.point.lift;
            Ok((lift, auroc(&scores, &labels)?))
        })
        .collect::<Result<_>>()?;
    let lifts: Vec<f64> = results.iter().map(|r| r.0).collect();
    let aurocs: Vec<f64> = results.iter().map(|r| r.1).collect();
    let (lift, standard_error) = mean_and_se(&lifts);
    let (auroc, auroc_standard_error) = mean_and_se(&aurocs);
    Ok(OracleResult {
        coverage: q,
        lift,
        auroc,
        standard_error,
        auroc_standard_error,
        samples: per_batch * ORACLE_BATCHES,
    })
}

/// Realized lift of one planted flag, with its coverage, by the same batch scheme.
pub fn oracle_flag_lift(config: &SynthConfig, flag: &str, mc_samples: usize, seed: u64) -> Result<OracleResult> {
    let j = config
        .flags
        .iter()
        .position(|f| f.name == flag)
        .ok_or_else(|| Error::invalid(format!("no planted flag named `{flag}`")))?;
    let cal = calibrate(config)?;
    let per_batch = mc_samples / ORACLE_BATCHES;
    if per_batch == 0 {
        return Err(Error::invalid(format!("need at least {ORACLE_BATCHES} Monte-Carlo samples")));
    }
    let results: Vec<(f64, f64, f64)> = (0..ORACLE_BATCHES)
        .into_par_iter()
        .map(|b| {
            let sims = simulate(config, &cal, per_batch, seed, b);
            let flags: Vec<bool> = sims.iter().map(|s| s.flags[j]).collect();
            let labels: Vec<bool> = sims.iter().map(|s| s.label).collect();
            let scores: Vec<f64> = flags.iter().map(|&f| f64::from(u8::from(f))).collect();
            let point = crate::evaluation::lift_of_flags(&flags, &labels)?;
            Ok((point.lift, point.coverage, auroc(&scores, &labels)?))
        })
        .collect::<Result<_>>()?;
    let lifts: Vec<f64> = results.iter().map(|r| r.0).collect();
    let aurocs: Vec<f64> = results.iter().map(|r| r.2).collect();
    let (lift, standard_error) = mean_and_se(&lifts);
    let (auroc, auroc_standard_error) = mean_and_se(&aurocs);
    Ok(OracleResult {
        coverage: results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64,
        lift,
        auroc,
        standard_error,
        auroc_standard_error,
        samples: per_batch * ORACLE_BATCHES,
    })
}
