//! End-to-end runs. Stages execute in a fixed order and persist their
//! artifacts under the output directory, so each can be rerun on its own:
//!
//! ```text
//! synth     data/                      (only with a [synth] section)
//! cohort    cohort/members_h{H}.csv, cohort/flags_{type}_h{H}.csv, cohort/summary.json
//! train     train/{type}_h{H}/folds.csv, oof_{model}.csv, model_{model}_fold{k}.json,
//!           shap_summary_{model}.csv, ranking_{model}.csv
//! evaluate  evaluate/evaluation.json
//! report    report/table1.csv, report/table1.json, report/auroc.csv, report/liftcurve.csv
//! ```
//!
//! `run_manifest.json` records the config hash, every stage's inputs and
//! outputs, and a sha256 of each output file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    aggregate_rankings, linear_shap, tree_shap, write_ranking, write_shap_summary, FoldAttribution,
};
use crate::cohort::{
    assign_index_dates, filter_min_history, identify_cases, read_cohort_csv, select_controls, write_cohort_csv,
    CancerTypeMap, CohortMember, Horizon,
};
use crate::error::{Error, Result, StageContext};
use crate::evaluation::{
    auroc, bootstrap_compare_less, combined_lift_curve, coverage_grid, fold_ci, lift_at_coverage, lift_of_flags,
    mann_whitney_less, model_lift_curve, threshold_range, ConfidenceInterval, CurvePoint, LiftCurve, LiftPoint,
};
use crate::event_store::{load_dataset, ConceptId, DatasetManifest, EventStore, PersonId, MALIGNANCY_ROOT};
use crate::features::{build_vocabulary, vectorize};
use crate::io::{create_csv, read_string, sha256_file, sha256_hex, write_string, CsvTable};
use crate::learners::{
    ingest_external_scores, stratified_kfold, train_gbdt, train_logreg, FoldAssignment, GbdtConfig, LogRegConfig,
    ModelFile, RiskModel,
};
use crate::risk_factors::{evaluate_spec, read_flags_csv, write_flags_csv, FlagVector, RiskFactorRegistry};
use crate::synth::{synthesize, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gbdt,
    Logreg,
    /// Scores read from `external_scores`; not trained here.
    External,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gbdt => "gbdt",
            ModelKind::Logreg => "logreg",
            ModelKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start: f64,
    pub step: f64,
    pub points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            start: 0.01,
            step: 0.01,
            points: 50,
        }
    }
}

fn default_horizons() -> Vec<Horizon> {
    vec![Horizon::ONE_YEAR]
}
fn default_root() -> ConceptId {
    MALIGNANCY_ROOT
}
fn default_min_conditions() -> usize {
    5
}
fn default_folds() -> usize {
    5
}
fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Gbdt]
}
fn default_resamples() -> usize {
    1000
}

/// A run configuration. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest; omit when a `[synth]` section generates the data.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Risk-factor registry; defaults to the planted flags for synthetic data,
    /// otherwise the bundled registry.
    #[serde(default)]
    pub risk_factors: Option<PathBuf>,
    pub cancer_types: Vec<String>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<Horizon>,
    #[serde(default = "default_root")]
    pub malignancy_root: ConceptId,
    #[serde(default = "default_min_conditions")]
    pub min_conditions: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub external_scores: Option<PathBuf>,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    /// Test rows attributed per fold; all when absent.
    #[serde(default)]
    pub shap_max_instances: Option<usize>,
    #[serde(default)]
    pub coverage_grid: GridConfig,
    #[serde(default)]
    pub gbdt: GbdtConfig,
    #[serde(default)]
    pub logreg: LogRegConfig,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&read_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Replaces the run seed, and the generator seed when data are synthetic.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gbdt.seed = seed;
        self.logreg.seed = seed;
        if let Some(s) = self.synth.as_mut() {
            s.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match (&self.manifest, &self.synth) {
            (Some(_), Some(_)) => return bad("set either `manifest` or `[synth]`, not both"),
            (None, None) => return bad("one of `manifest` or `[synth]` is required"),
            _ => {}
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.cancer_types.is_empty() {
            return bad("cancer_types is empty");
        }
        if has_duplicates(&self.cancer_types) {
            return bad("duplicate entries in cancer_types");
        }
        if self.horizons.is_empty() || has_duplicates(&self.horizons) {
            return bad("horizons must be nonempty and distinct");
        }
        if self.models.is_empty() || has_duplicates(&self.models) {
            return bad("models must be nonempty and distinct");
        }
        if self.models.contains(&ModelKind::External) != self.external_scores.is_some() {
            return bad("the `external` model and `external_scores` go together");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples must be positive");
        }
        if self.shap_max_instances == Some(0) {
            return bad("shap_max_instances must be positive when set");
        }
        let g = self.coverage_grid;
        let grid = self.grid();
        if g.points == 0 || g.step <= 0.0 || grid.iter().any(|&q| !(q > 0.0 && q <= 1.0 + 1e-12)) {
            return bad("coverage grid must lie in (0, 1] with a positive step");
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let g = self.coverage_grid;
        coverage_grid(g.start, g.step, g.points)
            .into_iter()
            .map(|q| (q * 1e9).round() / 1e9)
            .map(|q| q.min(1.0))
            .collect()
    }

    /// sha256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn has_duplicates<T: Ord>(items: &[T]) -> bool {
    let mut v: Vec<&T> = items.iter().collect();
    v.sort();
    v.windows(2).any(|w| w[0] == w[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Cohort,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Synth, Stage::Cohort, Stage::Train, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cohort => "cohort",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Artifacts of earlier stages, relative to the output directory.
    pub inputs: Vec<String>,
    /// Files read from outside the output directory, as named in the config.
    pub external_inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    /// sha256 per output file.
    pub checksums: BTreeMap<String, String>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

impl RunManifest {
    pub fn read(out: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_string(&out.join(RUN_MANIFEST))?)?)
    }

    /// True when every input of every stage is an output of an earlier stage.
    pub fn is_acyclic(&self) -> bool {
        let mut produced: Vec<&str> = Vec::new();
        for s in &self.stages {
            if s.inputs.iter().any(|i| !produced.contains(&i.as_str())) {
                return false;
            }
            produced.extend(s.outputs.iter().map(String::as_str));
        }
        true
    }
}

/// Output-directory handle for one run.
struct Run<'a> {
    config: &'a RunConfig,
    out: PathBuf,
    hash: String,
}

struct Recorder {
    record: StageRecord,
}

impl Recorder {
    fn new(stage: Stage) -> Self {
        Self {
            record: StageRecord {
                stage: stage.name().into(),
                inputs: Vec::new(),
                external_inputs: Vec::new(),
                outputs: Vec::new(),
            },
        }
    }

    fn input(&mut self, rel: &str) {
        if !self.record.inputs.iter().any(|i| i == rel) {
            self.record.inputs.push(rel.to_string());
        }
    }

    fn external(&mut self, p: &Path) {
        let s = p.display().to_string();
        if !self.record.external_inputs.contains(&s) {
            self.record.external_inputs.push(s);
        }
    }

    fn output(&mut self, rel: &str) {
        self.record.outputs.push(rel.to_string());
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn group_dir(cancer_type: &str, h: Horizon) -> String {
    format!("train/{}_h{}", slug(cancer_type), h.months())
}

fn members_file(h: Horizon) -> String {
    format!("cohort/members_h{}.csv", h.months())
}

fn flags_file(cancer_type: &str, h: Horizon) -> String {
    format!("cohort/flags_{}_h{}.csv", slug(cancer_type), h.months())
}

const EVALUATION_FILE: &str = "evaluate/evaluation.json";

impl<'a> Run<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn dataset_manifest(&self, rec: &mut Recorder) -> Result<DatasetManifest> {
        match (&self.config.synth, &self.config.manifest) {
            (Some(_), _) => {
                rec.input("data/manifest.toml");
                DatasetManifest::from_file(&self.path("data/manifest.toml"))
            }
            (None, Some(m)) => {
                rec.external(m);
                DatasetManifest::from_file(&self.config.resolve(m))
            }
            (None, None) => Err(Error::Config("no dataset configured".into())),
        }
    }

    fn registry(&self, rec: &mut Recorder) -> Result<RiskFactorRegistry> {
        if let Some(p) = &self.config.risk_factors {
            rec.external(p);
            RiskFactorRegistry::from_file(&self.config.resolve(p))
        } else if self.config.synth.is_some() {
            rec.input("data/riskfactors.toml");
            RiskFactorRegistry::from_file(&self.path("data/riskfactors.toml"))
        } else {
            Ok(RiskFactorRegistry::defaults())
        }
    }

    fn load_store(&self, rec: &mut Recorder) -> Result<EventStore> {
        let manifest = self.dataset_manifest(rec)?;
        let store = load_dataset(&manifest)?;
        let known = CancerTypeMap::from_store(&store);
        let labels = known.labels();
        for t in &self.config.cancer_types {
            if !labels.contains(t.as_str()) {
                return Err(Error::Config(format!(
                    "unknown cancer type `{t}`; the cancer map defines {:?}",
                    labels
                )));
            }
        }
        Ok(store)
    }

    fn stage_synth(&self, rec: &mut Recorder) -> Result<()> {
        let Some(cfg) = &self.config.synth else {
            return Ok(());
        };
        let ds = synthesize(cfg)?;
        ds.write(&self.path("data"))?;
        for f in [
            "person.csv",
            "condition.csv",
            "drug.csv",
            "concept.csv",
            "ancestry.csv",
            "survey.csv",
            "carrier.csv",
            "cancer_map.csv",
            "truth.csv",
            "calibration.json",
            "riskfactors.toml",
            "manifest.toml",
        ] {
            rec.output(&format!("data/{f}"));
        }
        Ok(())
    }

    fn stage_cohort(&self, rec: &mut Recorder) -> Result<()> {
        let store = self.load_store(rec)?;
        let registry = self.registry(rec)?;
        let type_map = CancerTypeMap::from_store(&store);
        type_map.validate(&store, self.config.malignancy_root)?;
        let ident = identify_cases(&store, self.config.malignancy_root, &type_map)?;
        let controls = select_controls(&store, self.config.malignancy_root)?;

        let mut summary = CohortSummary {
            config_hash: self.hash.clone(),
            load: store.report().clone(),
            cases_identified: ident.cases.len(),
            unclassified: ident.unclassified.len(),
            controls_selected: controls.len(),
            horizons: Vec::new(),
        };
        for &h in &self.config.horizons {
            let (members, index_report) = assign_index_dates(&ident.cases, &controls, &store, h)?;
            let (members, history) = filter_min_history(members, &store, self.config.min_conditions);
            let rel = members_file(h);
            write_cohort_csv(&self.path(&rel), &members)?;
            rec.output(&rel);
            let mut groups = Vec::new();
            for t in &self.config.cancer_types {
                let group: Vec<&CohortMember> = cohort_members(&members, t);
                let cases = group.iter().filter(|m| m.is_case()).count();
                let vectors: Vec<FlagVector> = registry
                    .for_cancer_type(t)
                    .map(|f| evaluate_spec(&f.name, &f.spec, &group, &store))
                    .collect::<Result<_>>()?;
                let rel = flags_file(t, h);
                write_flags_csv(&self.path(&rel), &vectors)?;
                rec.output(&rel);
                groups.push(GroupSummary {
                    cancer_type: t.clone(),
                    cases,
                    controls: group.len() - cases,
                    risk_factor_coverage: vectors
                        .iter()
                        .map(|v| (v.spec_name.clone(), v.flagged_count() as f64 / v.flags.len().max(1) as f64))
                        .collect(),
                });
            }
            summary.horizons.push(HorizonSummary {
                horizon_months: h.months(),
                index_before_birth: index_report.before_birth,
                history_kept: history.kept,
                history_dropped: history.dropped,
                groups,
            });
        }
        write_string(&self.path("cohort/summary.json"), &serde_json::to_string_pretty(&summary)?)?;
        rec.output("cohort/summary.json");
        Ok(())
    }

    fn stage_train(&self, rec: &mut Recorder) -> Result<()> {
        let store = self.load_store(rec)?;
        for &h in &self.config.horizons {
            let rel = members_file(h);
            rec.input(&rel);
            let all = read_cohort_csv(&self.path(&rel))?;
            for t in &self.config.cancer_types {
                let members: Vec<CohortMember> = cohort_members(&all, t).into_iter().cloned().collect();
                self.train_group(&store, t, h, &members, rec)?;
            }
        }
        Ok(())
    }

    fn train_group(
        &self,
        store: &EventStore,
        cancer_type: &str,
        h: Horizon,
        members: &[CohortMember],
        rec: &mut Recorder,
    ) -> Result<()> {
        let cfg = self.config;
        let labels: Vec<bool> = members.iter().map(|m| m.is_case()).collect();
        let ids: Vec<PersonId> = members.iter().map(|m| m.person_id).collect();
        let cases = labels.iter().filter(|&&y| y).count();
        if cases < cfg.folds || labels.len() - cases < cfg.folds {
            return Err(Error::invalid(format!(
                "{cancer_type} at {} months has {cases} cases and {} controls; {} folds need at least {} of each",
                h.months(),
                labels.len() - cases,
                cfg.folds,
                cfg.folds
            )));
        }
        let folds = stratified_kfold(&labels, cfg.folds, cfg.seed)?;
        let dir = group_dir(cancer_type, h);
        write_folds_csv(&self.path(&format!("{dir}/folds.csv")), &ids, &folds)?;
        rec.output(&format!("{dir}/folds.csv"));

        let external = match &cfg.external_scores {
            Some(p) => {
                rec.external(p);
                Some(ingest_external_scores(&cfg.resolve(p), &ids)?)
            }
            None => None,
        };

        let per_fold: Vec<FoldOutput> = (0..cfg.folds)
            .into_par_iter()
            .map(|k| self.train_fold(store, members, &folds, k, external.as_deref()))
            .collect::<Result<_>>()?;

        for kind in &cfg.models {
            let name = kind.as_str();
            let mut oof = vec![0.0; members.len()];
            let mut attributions = Vec::new();
            for (k, fo) in per_fold.iter().enumerate() {
                let m = &fo.models[kind];
                for (&i, &s) in fo.test.iter().zip(&m.scores) {
                    oof[i] = s;
                }
                if let Some(file) = &m.file {
                    let rel = format!("{dir}/model_{name}_fold{k}.json");
                    write_string(&self.path(&rel), &file.to_json())?;
                    rec.output(&rel);
                }
                if let Some(a) = &m.attribution {
                    attributions.push(a.clone());
                }
            }
            let rel = format!("{dir}/oof_{name}.csv");
            write_oof_csv(&self.path(&rel), &ids, &folds, &oof)?;
            rec.output(&rel);
            if !attributions.is_empty() {
                let rel = format!("{dir}/shap_summary_{name}.csv");
                write_shap_summary(&self.path(&rel), &attributions, store)?;
                rec.output(&rel);
                let rel = format!("{dir}/ranking_{name}.csv");
                write_ranking(&self.path(&rel), &aggregate_rankings(&attributions)?)?;
                rec.output(&rel);
            }
        }
        Ok(())
    }

    fn train_fold(
        &self,
        store: &EventStore,
        members: &[CohortMember],
        folds: &FoldAssignment,
        k: usize,
        external: Option<&[f64]>,
    ) -> Result<FoldOutput> {
        let cfg = self.config;
        let train_idx = folds.train_indices(k);
        let test_idx = folds.test_indices(k);
        let train: Vec<&CohortMember> = train_idx.iter().map(|&i| &members[i]).collect();
        let test: Vec<&CohortMember> = test_idx.iter().map(|&i| &members[i]).collect();
        // Vocabulary from the training split only.
        let vocab = build_vocabulary(&train, store)?;
        let x_train = vectorize(&train, store, &vocab);
        let x_test = vectorize(&test, store, &vocab);
        let shap_rows = cfg.shap_max_instances.unwrap_or(usize::MAX).min(test.len());

        let mut models = BTreeMap::new();
        for &kind in &cfg.models {
            let out = match kind {
                ModelKind::Gbdt => {
                    let ens = train_gbdt(&x_train, &cfg.gbdt)?;
                    let vectors: Vec<_> = (0..shap_rows)
                        .into_par_iter()
                        .map(|i| tree_shap(&ens, &x_test, i))
                        .collect::<Result<_>>()?;
                    let model = RiskModel::Gbdt(ens);
                    ModelOutput {
                        scores: model.predict_margin(&x_test)?,
                        attribution: Some(FoldAttribution::from_vectors(&vocab, &vectors)),
                        file: Some(ModelFile::new(model, &vocab)),
                    }
                }
                ModelKind::Logreg => {
                    let lr = train_logreg(&x_train, &cfg.logreg)?;
                    let background = x_train.column_means();
                    let vectors: Vec<_> = (0..shap_rows)
                        .map(|i| linear_shap(&lr, x_test.row(i), &background))
                        .collect::<Result<_>>()?;
                    let model = RiskModel::LogReg(lr);
                    ModelOutput {
                        scores: model.predict_margin(&x_test)?,
                        attribution: Some(FoldAttribution::from_vectors(&vocab, &vectors)),
                        file: Some(ModelFile::new(model, &vocab)),
                    }
                }
                ModelKind::External => ModelOutput {
                    scores: test_idx.iter().map(|&i| external.expect("validated")[i]).collect(),
                    attribution: None,
                    file: None,
                },
            };
            models.insert(kind, out);
        }
        Ok(FoldOutput { test: test_idx, models })
    }

    fn stage_evaluate(&self, rec: &mut Recorder) -> Result<()> {
        let cfg = self.config;
        let grid = cfg.grid();
        let mut groups = Vec::new();
        for &h in &cfg.horizons {
            let rel = members_file(h);
            rec.input(&rel);
            let all = read_cohort_csv(&self.path(&rel))?;
            for t in &cfg.cancer_types {
                let members: Vec<&CohortMember> = cohort_members(&all, t);
                let dir = group_dir(t, h);
                rec.input(&format!("{dir}/folds.csv"));
                let folds = read_folds_csv(&self.path(&format!("{dir}/folds.csv")), &members, cfg.folds)?;
                let flags_rel = flags_file(t, h);
                rec.input(&flags_rel);
                let flags = read_flags_csv(&self.path(&flags_rel))?;
                let mut scores = BTreeMap::new();
                for kind in &cfg.models {
                    let rel = format!("{dir}/oof_{}.csv", kind.as_str());
                    rec.input(&rel);
                    scores.insert(*kind, read_oof_csv(&self.path(&rel), &members)?);
                }
                groups.push(evaluate_group(t, h, &members, &folds, &flags, &scores, &grid, cfg)?);
            }
        }
        let report = EvalReport {
            config_hash: self.hash.clone(),
            groups,
        };
        write_string(&self.path(EVALUATION_FILE), &serde_json::to_string_pretty(&report)?)?;
        rec.output(EVALUATION_FILE);
        Ok(())
    }

    fn stage_report(&self, rec: &mut Recorder) -> Result<()> {
        rec.input(EVALUATION_FILE);
        let report: EvalReport = serde_json::from_str(&read_string(&self.path(EVALUATION_FILE))?)?;
        let rows = emit_report(&report);
        write_table1_csv(&self.path("report/table1.csv"), &rows)?;
        rec.output("report/table1.csv");
        let json = Table1 {
            config_hash: self.hash.clone(),
            rows,
        };
        write_string(&self.path("report/table1.json"), &serde_json::to_string_pretty(&json)?)?;
        rec.output("report/table1.json");
        write_auroc_csv(&self.path("report/auroc.csv"), &report)?;
        rec.output("report/auroc.csv");
        write_liftcurve_csv(&self.path("report/liftcurve.csv"), &report)?;
        rec.output("report/liftcurve.csv");
        Ok(())
    }

    fn run_stage(&self, stage: Stage) -> Result<()> {
        let mut rec = Recorder::new(stage);
        let result = match stage {
            Stage::Synth => self.stage_synth(&mut rec),
            Stage::Cohort => self.stage_cohort(&mut rec),
            Stage::Train => self.stage_train(&mut rec),
            Stage::Evaluate => self.stage_evaluate(&mut rec),
            Stage::Report => self.stage_report(&mut rec),
        };
        result.stage(stage.name())?;
        self.record(rec.record).stage(stage.name())
    }

    fn record(&self, record: StageRecord) -> Result<()> {
        let mut manifest = match RunManifest::read(&self.out) {
            Ok(m) if m.config_hash == self.hash => m,
            _ => RunManifest {
                config_hash: self.hash.clone(),
                seed: self.config.seed,
                stages: Vec::new(),
                checksums: BTreeMap::new(),
            },
        };
        manifest.stages.retain(|s| s.stage != record.stage);
        manifest.stages.push(record);
        let order = |name: &str| Stage::ALL.iter().position(|s| s.name() == name).unwrap_or(usize::MAX);
        manifest.stages.sort_by_key(|s| order(&s.stage));
        manifest.checksums.clear();
        for s in &manifest.stages {
            for o in &s.outputs {
                let p = self.path(o);
                if p.exists() {
                    manifest.checksums.insert(o.clone(), sha256_file(&p)?);
                }
            }
        }
        write_string(&self.out.join(RUN_MANIFEST), &serde_json::to_string_pretty(&manifest)?)
    }
}

fn cohort_members<'m>(all: &'m [CohortMember], cancer_type: &str) -> Vec<&'m CohortMember> {
    crate::cohort::cohort_for_type(all, cancer_type)
}

struct ModelOutput {
    scores: Vec<f64>,
    attribution: Option<FoldAttribution>,
    file: Option<ModelFile>,
}

struct FoldOutput {
    test: Vec<usize>,
    models: BTreeMap<ModelKind, ModelOutput>,
}

fn write_folds_csv(path: &Path, ids: &[PersonId], folds: &FoldAssignment) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["person_id", "fold"])?;
    for (p, f) in ids.iter().zip(&folds.folds) {
        w.write_record([p.to_string(), f.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_folds_csv(path: &Path, members: &[&CohortMember], k: usize) -> Result<FoldAssignment> {
    let mut rows = Vec::new();
    let mut t = CsvTable::open(path, &["person_id", "fold"])?;
    t.for_each(|row| {
        rows.push((row.parse::<PersonId>("person_id")?, row.parse::<usize>("fold")?));
        Ok(())
    })?;
    check_alignment(path, members, rows.iter().map(|r| r.0))?;
    if rows.iter().any(|r| r.1 >= k) {
        return Err(Error::invalid(format!("{}: fold index out of range", path.display())));
    }
    Ok(FoldAssignment {
        k,
        seed: 0,
        folds: rows.into_iter().map(|r| r.1).collect(),
    })
}

fn write_oof_csv(path: &Path, ids: &[PersonId], folds: &FoldAssignment, scores: &[f64]) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["person_id", "fold", "score"])?;
    for ((p, f), s) in ids.iter().zip(&folds.folds).zip(scores) {
        w.write_record([p.to_string(), f.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_oof_csv(path: &Path, members: &[&CohortMember]) -> Result<Vec<f64>> {
    let mut rows = Vec::new();
    let mut t = CsvTable::open(path, &["person_id", "score"])?;
    t.for_each(|row| {
        rows.push((row.parse::<PersonId>("person_id")?, row.parse::<f64>("score")?));
        Ok(())
    })?;
    check_alignment(path, members, rows.iter().map(|r| r.0))?;
    Ok(rows.into_iter().map(|r| r.1).collect())
}

fn check_alignment(path: &Path, members: &[&CohortMember], ids: impl ExactSizeIterator<Item = PersonId>) -> Result<()> {
    if ids.len() != members.len() || !ids.zip(members).all(|(a, m)| a == m.person_id) {
        return Err(Error::invalid(format!(
            "{} does not match the cohort; rerun the earlier stages",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub config_hash: String,
    pub load: crate::event_store::LoadReport,
    pub cases_identified: usize,
    pub unclassified: usize,
    pub controls_selected: usize,
    pub horizons: Vec<HorizonSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon_months: u32,
    pub index_before_birth: usize,
    pub history_kept: usize,
    pub history_dropped: usize,
    pub groups: Vec<GroupSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub cancer_type: String,
    pub cases: usize,
    pub controls: usize,
    pub risk_factor_coverage: Vec<(String, f64)>,
}

/// Evaluation results for every cancer type and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub groups: Vec<GroupResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub cancer_type: String,
    pub horizon_months: u32,
    pub members: usize,
    pub cases: usize,
    pub models: Vec<ModelResult>,
    pub risk_factors: Vec<RiskFactorResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub auroc: ConfidenceInterval,
    pub fold_auroc: Vec<f64>,
    /// Model-alone lift per grid coverage, averaged over folds.
    pub curve: Vec<CurveSummary>,
}

/// Fold-averaged lift at one grid coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub target: f64,
    pub coverage: f64,
    pub lift: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskFactorResult {
    pub name: String,
    /// Fraction of the whole cohort flagged.
    pub coverage: f64,
    /// Lift over the whole cohort.
    pub pooled_lift: Option<f64>,
    /// Folds where the factor flags at least one test member.
    pub folds_evaluated: Vec<usize>,
    pub fold_lift: Vec<f64>,
    pub fold_coverage: Vec<f64>,
    pub lift: Option<ConfidenceInterval>,
    pub comparisons: Vec<Comparison>,
}

/// The risk factor against one model, fold by fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: String,
    /// Model lift at each fold's risk-factor coverage.
    pub fold_lift_ehr: Vec<f64>,
    pub lift_ehr: Option<ConfidenceInterval>,
    /// One-sided Mann-Whitney p that risk-factor lifts are below model lifts.
    pub p_ehr: Option<f64>,
    pub p_ehr_bootstrap: Option<f64>,
    /// Union curve, averaged over folds.
    pub combined_curve: Vec<CurveSummary>,
    pub combined_max_target: Option<f64>,
    pub combined_max_coverage: Option<f64>,
    pub fold_lift_combined: Vec<f64>,
    pub lift_combined_max: Option<ConfidenceInterval>,
    pub p_combined: Option<f64>,
    /// Largest grid coverage at which the model's mean lift stays at or above the factor's mean lift.
    pub ehr_max_coverage_at_rf_lift: Option<f64>,
}

const LIFT_RANGE: (f64, f64) = (0.0, f64::INFINITY);

fn summarize_curves(curves: &[LiftCurve]) -> Vec<CurveSummary> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let k = curves.len() as f64;
    (0..first.points.len())
        .map(|i| {
            let mean = |f: fn(&LiftPoint) -> f64| curves.iter().map(|c| f(&c.points[i].point)).sum::<f64>() / k;
            CurveSummary {
                target: first.points[i].target,
                coverage: mean(|p| p.coverage),
                lift: mean(|p| p.lift),
                recall: mean(|p| p.recall),
            }
        })
        .collect()
}

fn as_curve(name: &str, summary: &[CurveSummary]) -> LiftCurve {
    LiftCurve {
        criterion: name.to_string(),
        points: summary
            .iter()
            .map(|s| CurvePoint {
                target: s.target,
                point: LiftPoint {
                    coverage: s.coverage,
                    lift: s.lift,
                    recall: s.recall,
                    flagged_count: 0,
                    case_count_flagged: 0,
                },
            })
            .collect(),
    }
}

fn ci(values: &[f64], range: (f64, f64)) -> Option<ConfidenceInterval> {
    fold_ci(values, Some(range)).ok()
}

#[allow(clippy::too_many_arguments)]
fn evaluate_group(
    cancer_type: &str,
    h: Horizon,
    members: &[&CohortMember],
    folds: &FoldAssignment,
    flags: &[FlagVector],
    scores: &BTreeMap<ModelKind, Vec<f64>>,
    grid: &[f64],
    cfg: &RunConfig,
) -> Result<GroupResult> {
    let labels: Vec<bool> = members.iter().map(|m| m.is_case()).collect();
    let ids: Vec<PersonId> = members.iter().map(|m| m.person_id).collect();
    let tests: Vec<Vec<usize>> = (0..folds.k).map(|k| folds.test_indices(k)).collect();
    let pick = |v: &[f64], idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| v[i]).collect() };
    let pick_b = |v: &[bool], idx: &[usize]| -> Vec<bool> { idx.iter().map(|&i| v[i]).collect() };
    let pick_id = |idx: &[usize]| -> Vec<PersonId> { idx.iter().map(|&i| ids[i]).collect() };

    let mut models = Vec::new();
    let mut model_curves: BTreeMap<ModelKind, Vec<CurveSummary>> = BTreeMap::new();
    for (&kind, s) in scores {
        let per_fold: Vec<(f64, LiftCurve)> = tests
            .iter()
            .map(|idx| {
                let (s, y, p) = (pick(s, idx), pick_b(&labels, idx), pick_id(idx));
                Ok((auroc(&s, &y)?, model_lift_curve(&s, &y, &p, grid)?))
            })
            .collect::<Result<_>>()?;
        let fold_auroc: Vec<f64> = per_fold.iter().map(|f| f.0).collect();
        let curves: Vec<LiftCurve> = per_fold.into_iter().map(|f| f.1).collect();
        let curve = summarize_curves(&curves);
        model_curves.insert(kind, curve.clone());
        models.push(ModelResult {
            model: kind.as_str().into(),
            auroc: fold_ci(&fold_auroc, Some((0.0, 1.0)))?,
            fold_auroc,
            curve,
        });
    }

    let mut risk_factors = Vec::new();
    for fv in flags {
        if fv.person_ids != ids {
            return Err(Error::invalid(format!("flags for `{}` do not match the cohort", fv.spec_name)));
        }
        let flagged = fv.flagged_count();
        let pooled_lift = if flagged > 0 { Some(lift_of_flags(&fv.flags, &labels)?.lift) } else { None };
        let mut folds_evaluated = Vec::new();
        let mut fold_lift = Vec::new();
        let mut fold_coverage = Vec::new();
        for (k, idx) in tests.iter().enumerate() {
            let f = pick_b(&fv.flags, idx);
            if f.iter().any(|&x| x) {
                let p = lift_of_flags(&f, &pick_b(&labels, idx))?;
                folds_evaluated.push(k);
                fold_lift.push(p.lift);
                fold_coverage.push(p.coverage);
            }
        }
        let rf_ci = ci(&fold_lift, LIFT_RANGE);
        let mut comparisons = Vec::new();
        for (&kind, s) in scores {
            let mut fold_lift_ehr = Vec::new();
            let mut union_curves = Vec::new();
            for (j, &k) in folds_evaluated.iter().enumerate() {
                let idx = &tests[k];
                let (sc, y, p) = (pick(s, idx), pick_b(&labels, idx), pick_id(idx));
                fold_lift_ehr.push(lift_at_coverage(&sc, &y, &p, fold_coverage[j])?.point.lift);
                union_curves.push(combined_lift_curve(&pick_b(&fv.flags, idx), &sc, &y, &p, grid)?);
            }
            let combined_curve = summarize_curves(&union_curves);
            let (combined_max_target, combined_max_coverage, fold_lift_combined) = if combined_curve.is_empty() {
                (None, None, Vec::new())
            } else {
                let (best, _) = crate::evaluation::max_combined_lift(&as_curve("combined", &combined_curve), None)?;
                let at = combined_curve.iter().position(|c| c.target == best.target).expect("point from curve");
                (
                    Some(best.target),
                    Some(best.point.coverage),
                    union_curves.iter().map(|c| c.points[at].point.lift).collect::<Vec<_>>(),
                )
            };
            let p_of = |other: &[f64]| {
                if fold_lift.is_empty() {
                    None
                } else {
                    mann_whitney_less(&fold_lift, other).ok()
                }
            };
            let mean_rf = rf_ci.map(|c| c.mean).or(pooled_lift);
            comparisons.push(Comparison {
                model: kind.as_str().into(),
                lift_ehr: ci(&fold_lift_ehr, LIFT_RANGE),
                p_ehr: p_of(&fold_lift_ehr),
                p_ehr_bootstrap: if fold_lift.is_empty() {
                    None
                } else {
                    Some(bootstrap_compare_less(&fold_lift, &fold_lift_ehr, cfg.bootstrap_resamples, cfg.seed)?)
                },
                fold_lift_ehr,
                combined_curve,
                combined_max_target,
                combined_max_coverage,
                lift_combined_max: ci(&fold_lift_combined, LIFT_RANGE),
                p_combined: p_of(&fold_lift_combined),
                fold_lift_combined,
                ehr_max_coverage_at_rf_lift: mean_rf
                    .and_then(|target| threshold_range(&as_curve("model", &model_curves[&kind]), target)),
            });
        }
        risk_factors.push(RiskFactorResult {
            name: fv.spec_name.clone(),
            coverage: flagged as f64 / fv.flags.len().max(1) as f64,
            pooled_lift,
            folds_evaluated,
            fold_lift,
            fold_coverage,
            lift: rf_ci,
            comparisons,
        });
    }
    Ok(GroupResult {
        cancer_type: cancer_type.to_string(),
        horizon_months: h.months(),
        members: members.len(),
        cases: labels.iter().filter(|&&y| y).count(),
        models,
        risk_factors,
    })
}

/// One row of the clinical-utility table: a risk factor against one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub cancer_type: String,
    pub horizon_months: u32,
    pub model: String,
    pub risk_factor: String,
    pub coverage: f64,
    pub lift_rf: Option<ConfidenceInterval>,
    pub lift_ehr: Option<ConfidenceInterval>,
    pub p_ehr: Option<f64>,
    pub significant_ehr: bool,
    pub lift_combined_max: Option<ConfidenceInterval>,
    pub combined_coverage: Option<f64>,
    pub p_combined: Option<f64>,
    pub significant_combined: bool,
    pub ehr_max_coverage_at_rf_lift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub config_hash: String,
    pub rows: Vec<Table1Row>,
}

/// Flattens an evaluation into table rows; significance is p < 0.05.
pub fn emit_report(report: &EvalReport) -> Vec<Table1Row> {
    let mut rows = Vec::new();
    for g in &report.groups {
        for rf in &g.risk_factors {
            for c in &rf.comparisons {
                rows.push(Table1Row {
                    cancer_type: g.cancer_type.clone(),
                    horizon_months: g.horizon_months,
                    model: c.model.clone(),
                    risk_factor: rf.name.clone(),
                    coverage: rf.coverage,
                    lift_rf: rf.lift,
                    lift_ehr: c.lift_ehr,
                    p_ehr: c.p_ehr,
                    significant_ehr: c.p_ehr.is_some_and(|p| p < 0.05),
                    lift_combined_max: c.lift_combined_max,
                    combined_coverage: c.combined_max_coverage,
                    p_combined: c.p_combined,
                    significant_combined: c.p_combined.is_some_and(|p| p < 0.05),
                    ehr_max_coverage_at_rf_lift: c.ehr_max_coverage_at_rf_lift,
                });
            }
        }
    }
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ci_cells(c: Option<ConfidenceInterval>) -> [String; 3] {
    [opt(c.map(|c| c.mean)), opt(c.map(|c| c.lower)), opt(c.map(|c| c.upper))]
}

pub const TABLE1_HEADER: [&str; 20] = [
    "cancer_type",
    "horizon_months",
    "model",
    "risk_factor",
    "coverage",
    "lift_rf",
    "lift_rf_lower",
    "lift_rf_upper",
    "lift_ehr",
    "lift_ehr_lower",
    "lift_ehr_upper",
    "p_ehr",
    "significant_ehr",
    "lift_combined_max",
    "lift_combined_lower",
    "lift_combined_upper",
    "combined_coverage",
    "p_combined",
    "significant_combined",
    "ehr_max_coverage_at_rf_lift",
];

pub fn write_table1_csv(path: &Path, rows: &[Table1Row]) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(TABLE1_HEADER)?;
    for r in rows {
        let mut rec = vec![
            r.cancer_type.clone(),
            r.horizon_months.to_string(),
            r.model.clone(),
            r.risk_factor.clone(),
            r.coverage.to_string(),
        ];
        rec.extend(ci_cells(r.lift_rf));
        rec.extend(ci_cells(r.lift_ehr));
        rec.push(opt(r.p_ehr));
        rec.push(r.significant_ehr.to_string());
        rec.extend(ci_cells(r.lift_combined_max));
        rec.push(opt(r.combined_coverage));
        rec.push(opt(r.p_combined));
        rec.push(r.significant_combined.to_string());
        rec.push(opt(r.ehr_max_coverage_at_rf_lift));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_auroc_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["cancer_type", "horizon_months", "model", "auroc", "auroc_lower", "auroc_upper"])?;
    for g in &report.groups {
        for m in &g.models {
            w.write_record([
                g.cancer_type.clone(),
                g.horizon_months.to_string(),
                m.model.clone(),
                m.auroc.mean.to_string(),
                m.auroc.lower.to_string(),
                m.auroc.upper.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_liftcurve_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["cancer_type", "horizon_months", "criterion", "coverage", "lift", "recall"])?;
    let mut row = |g: &GroupResult, criterion: &str, c: f64, l: f64, r: f64| {
        w.write_record([
            g.cancer_type.clone(),
            g.horizon_months.to_string(),
            criterion.to_string(),
            c.to_string(),
            l.to_string(),
            r.to_string(),
        ])
    };
    for g in &report.groups {
        for m in &g.models {
            for p in &m.curve {
                row(g, &m.model, p.coverage, p.lift, p.recall)?;
            }
        }
        for rf in &g.risk_factors {
            if let Some(l) = rf.pooled_lift {
                row(g, &rf.name, rf.coverage, l, l * rf.coverage)?;
            }
            for c in &rf.comparisons {
                let name = format!("{}+{}", c.model, rf.name);
                for p in &c.combined_curve {
                    row(g, &name, p.coverage, p.lift, p.recall)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs a single stage against an output directory.
pub fn run_stage(config: &RunConfig, out: &Path, stage: Stage) -> Result<()> {
    config.validate()?;
    let run = Run {
        config,
        out: out.to_path_buf(),
        hash: config.hash(),
    };
    run.run_stage(stage)
}

/// Runs every stage in order and returns the run manifest.
pub fn run_pipeline(config: &RunConfig, out: &Path) -> Result<RunManifest> {
    config.validate()?;
    let run = Run {
        config,
        out: out.to_path_buf(),
        hash: config.hash(),
    };
    // Cancer types are checked against the cancer map before any cohort work.
    if config.synth.is_none() {
        let mut rec = Recorder::new(Stage::Cohort);
        run.load_store(&mut rec).stage(Stage::Cohort.name())?;
    }
    for stage in Stage::ALL {
        if stage == Stage::Synth && config.synth.is_none() {
            continue;
        }
        run.run_stage(stage)?;
    }
    RunManifest::read(out)
}
