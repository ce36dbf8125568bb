//! API catalog and robotic handbook, indexed for retrieval.
//!
//! APIs are indexed by their usage narrative; handbook procedures by their
//! trigger examples joined with the title. Both corpora are JSON lines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder};
use crate::vector_index::{FlatIndex, IndexEntry, IndexError, RetrievalEvalCase};

pub const API_FILE: &str = "apis.jsonl";
pub const HANDBOOK_FILE: &str = "handbook.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";

pub const DEFAULT_K_API: usize = 5;
pub const DEFAULT_K_HANDBOOK: usize = 1;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("procedure {task_id:?} references unknown API {api_name:?}")]
    DanglingApi { task_id: String, api_name: String },
    #[error("procedure {task_id:?} passes unknown parameter {param:?} to {api_name:?}")]
    UnknownParam {
        task_id: String,
        api_name: String,
        param: String,
    },
    #[error("the API catalog is empty")]
    EmptyCatalog,
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("retrieval depth k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Enum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub param_name: String,
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCatalogEntry {
    pub name: String,
    pub usage: String,
    pub param_schema: Vec<ParamSpec>,
    pub description: String,
}

impl ApiCatalogEntry {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.param_schema.iter().find(|p| p.param_name == name)
    }

    fn validate(&self) -> Result<(), KbError> {
        let invalid = |reason: String| KbError::InvalidRecord {
            id: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(invalid("API name is empty".into()));
        }
        if self.usage.trim().is_empty() {
            return Err(invalid("usage is empty".into()));
        }
        let mut names = HashSet::new();
        for p in &self.param_schema {
            if !names.insert(p.param_name.as_str()) {
                return Err(invalid(format!(
                    "parameter {:?} declared twice",
                    p.param_name
                )));
            }
            if p.param_type == ParamType::Enum
                && p.enum_values.as_ref().is_none_or(|v| v.is_empty())
            {
                return Err(invalid(format!(
                    "enum parameter {:?} lists no values",
                    p.param_name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureStep {
    pub api_name: String,
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandbookProcedure {
    pub task_id: String,
    pub title: String,
    pub trigger_examples: Vec<String>,
    pub steps: Vec<ProcedureStep>,
    #[serde(default)]
    pub notes: String,
}

impl HandbookProcedure {
    pub fn index_text(&self) -> String {
        let mut parts: Vec<&str> = self.trigger_examples.iter().map(String::as_str).collect();
        parts.push(&self.title);
        parts.join(" ")
    }
}

/// Ranked retrieval results for one instruction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub apis: Vec<ApiCatalogEntry>,
    pub api_scores: Vec<f64>,
    pub procedures: Vec<HandbookProcedure>,
    pub procedure_scores: Vec<f64>,
}

impl RetrievedContext {
    pub fn api_names(&self) -> Vec<String> {
        self.apis.iter().map(|a| a.name.clone()).collect()
    }

    pub fn procedure_ids(&self) -> Vec<String> {
        self.procedures.iter().map(|p| p.task_id.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalTarget {
    Api,
    Handbook,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub query: String,
    pub relevant_ids: BTreeSet<String>,
    pub target: RetrievalTarget,
}

impl RetrievalQuery {
    pub fn to_case(&self) -> RetrievalEvalCase {
        RetrievalEvalCase {
            query: self.query.clone(),
            relevant_ids: self.relevant_ids.clone(),
        }
    }
}

/// Reads a JSON lines file, reporting parse failures with 1-based line
/// numbers. Blank lines are skipped.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| KbError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_queries(path: &Path) -> Result<Vec<RetrievalQuery>, KbError> {
    let queries: Vec<RetrievalQuery> = read_jsonl(path)?;
    for q in &queries {
        if q.relevant_ids.is_empty() {
            return Err(KbError::InvalidRecord {
                id: q.query.clone(),
                reason: "relevant_ids is empty".into(),
            });
        }
    }
    Ok(queries)
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    apis: Vec<ApiCatalogEntry>,
    procedures: Vec<HandbookProcedure>,
    api_index: FlatIndex,
    handbook_index: FlatIndex,
    embedder: Embedder,
}

impl KnowledgeBase {
    /// Loads `apis.jsonl` and `handbook.jsonl`.
    pub fn load_corpora(
        api_path: &Path,
        handbook_path: &Path,
        embedder: Embedder,
    ) -> Result<Self, KbError> {
        let apis = read_jsonl(api_path)?;
        let procedures = read_jsonl(handbook_path)?;
        Self::from_records(apis, procedures, embedder)
    }

    pub fn load_dir(dir: &Path, embedder: Embedder) -> Result<Self, KbError> {
        Self::load_corpora(&dir.join(API_FILE), &dir.join(HANDBOOK_FILE), embedder)
    }

    pub fn from_records(
        apis: Vec<ApiCatalogEntry>,
        procedures: Vec<HandbookProcedure>,
        embedder: Embedder,
    ) -> Result<Self, KbError> {
        validate_corpora(&apis, &procedures)?;
        let dimension = embedder.dimension();
        let api_index = FlatIndex::build(
            dimension,
            apis.iter()
                .enumerate()
                .map(|(i, api)| {
                    Ok(IndexEntry {
                        id: api.name.clone(),
                        vector: embedder.embed_text(&api.usage)?,
                        payload_ref: i.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, KbError>>()?,
        )?;
        let handbook_index = FlatIndex::build(
            dimension,
            procedures
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Ok(IndexEntry {
                        id: p.task_id.clone(),
                        vector: embedder.embed_text(&p.index_text())?,
                        payload_ref: i.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, KbError>>()?,
        )?;
        Ok(Self {
            apis,
            procedures,
            api_index,
            handbook_index,
            embedder,
        })
    }

    pub fn apis(&self) -> &[ApiCatalogEntry] {
        &self.apis
    }

    pub fn procedures(&self) -> &[HandbookProcedure] {
        &self.procedures
    }

    pub fn api(&self, name: &str) -> Option<&ApiCatalogEntry> {
        self.apis.iter().find(|a| a.name == name)
    }

    pub fn api_index(&self) -> &FlatIndex {
        &self.api_index
    }

    pub fn handbook_index(&self) -> &FlatIndex {
        &self.handbook_index
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn index_for(&self, target: RetrievalTarget) -> &FlatIndex {
        match target {
            RetrievalTarget::Api => &self.api_index,
            RetrievalTarget::Handbook => &self.handbook_index,
        }
    }

    /// UAR: top-k catalog entries for an instruction.
    pub fn retrieve_apis(
        &self,
        instruction: &str,
        k: usize,
    ) -> Result<Vec<(&ApiCatalogEntry, f64)>, KbError> {
        if k == 0 {
            return Err(KbError::ZeroK);
        }
        let query = self.embedder.embed_text(instruction)?;
        Ok(self
            .api_index
            .top_k(&query, k)?
            .into_iter()
            .map(|hit| (self.resolve_api(&hit.id), hit.score))
            .collect())
    }

    /// RHR: top-k handbook procedures for an instruction.
    pub fn retrieve_procedures(
        &self,
        instruction: &str,
        k: usize,
    ) -> Result<Vec<(&HandbookProcedure, f64)>, KbError> {
        if k == 0 {
            return Err(KbError::ZeroK);
        }
        let query = self.embedder.embed_text(instruction)?;
        Ok(self
            .handbook_index
            .top_k(&query, k)?
            .into_iter()
            .map(|hit| (self.resolve_procedure(&hit.id), hit.score))
            .collect())
    }

    /// Runs UAR and/or RHR; a `None` depth skips that retriever.
    pub fn retrieve(
        &self,
        instruction: &str,
        k_api: Option<usize>,
        k_handbook: Option<usize>,
    ) -> Result<RetrievedContext, KbError> {
        let mut ctx = RetrievedContext::default();
        if let Some(k) = k_api {
            for (api, score) in self.retrieve_apis(instruction, k)? {
                ctx.apis.push(api.clone());
                ctx.api_scores.push(score);
            }
        }
        if let Some(k) = k_handbook {
            for (proc_, score) in self.retrieve_procedures(instruction, k)? {
                ctx.procedures.push(proc_.clone());
                ctx.procedure_scores.push(score);
            }
        }
        Ok(ctx)
    }

    fn resolve_api(&self, id: &str) -> &ApiCatalogEntry {
        self.api(id).expect("index ids come from the catalog")
    }

    fn resolve_procedure(&self, id: &str) -> &HandbookProcedure {
        self.procedures
            .iter()
            .find(|p| p.task_id == id)
            .expect("index ids come from the handbook")
    }
}

/// Checks uniqueness and referential integrity across both corpora.
pub fn validate_corpora(
    apis: &[ApiCatalogEntry],
    procedures: &[HandbookProcedure],
) -> Result<(), KbError> {
    if apis.is_empty() {
        return Err(KbError::EmptyCatalog);
    }
    let mut names = HashSet::new();
    for api in apis {
        api.validate()?;
        if !names.insert(api.name.as_str()) {
            return Err(KbError::DuplicateId(api.name.clone()));
        }
    }
    let mut task_ids = HashSet::new();
    for p in procedures {
        if !task_ids.insert(p.task_id.as_str()) {
            return Err(KbError::DuplicateId(p.task_id.clone()));
        }
        if p.steps.is_empty() {
            return Err(KbError::InvalidRecord {
                id: p.task_id.clone(),
                reason: "procedure has no steps".into(),
            });
        }
        for step in &p.steps {
            let api = apis
                .iter()
                .find(|a| a.name == step.api_name)
                .ok_or_else(|| KbError::DanglingApi {
                    task_id: p.task_id.clone(),
                    api_name: step.api_name.clone(),
                })?;
            if let Some(param) = step.args.keys().find(|k| api.param(k).is_none()) {
                return Err(KbError::UnknownParam {
                    task_id: p.task_id.clone(),
                    api_name: api.name.clone(),
                    param: param.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Default corpus directory shipped with the repository.
pub fn fixture_corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> KnowledgeBase {
        KnowledgeBase::load_dir(&fixture_corpus_dir(), Embedder::default()).unwrap()
    }

    fn records() -> (Vec<ApiCatalogEntry>, Vec<HandbookProcedure>) {
        let dir = fixture_corpus_dir();
        (
            read_jsonl(&dir.join(API_FILE)).unwrap(),
            read_jsonl(&dir.join(HANDBOOK_FILE)).unwrap(),
        )
    }

    #[test]
    fn fixture_loads_with_expected_sizes() {
        let kb = fixture();
        assert_eq!(kb.api_index().len(), 12);
        assert_eq!(kb.handbook_index().len(), 6);
    }

    #[test]
    fn fixture_apis_match_simulator_surface() {
        let kb = fixture();
        for api in kb.apis() {
            let params = crate::robot_sim::api_params(&api.name)
                .unwrap_or_else(|| panic!("{} missing from simulator", api.name));
            let declared: Vec<_> = api
                .param_schema
                .iter()
                .map(|p| p.param_name.as_str())
                .collect();
            let simulated: Vec<_> = params.iter().map(|(n, _)| *n).collect();
            assert_eq!(declared, simulated, "{}", api.name);
        }
        assert_eq!(kb.apis().len(), crate::robot_sim::API_SURFACE.len());
    }

    #[test]
    fn dangling_reference_names_the_api() {
        let (apis, mut procs) = records();
        procs[0].steps[1].api_name = "warp_drive".into();
        let err = KnowledgeBase::from_records(apis, procs, Embedder::default()).unwrap_err();
        assert!(matches!(&err, KbError::DanglingApi { api_name, .. } if api_name == "warp_drive"));
        assert!(err.to_string().contains("warp_drive"));
    }

    #[test]
    fn unknown_param_and_duplicates_rejected() {
        let (apis, mut procs) = records();
        procs[0].steps[0].args.insert("colour".into(), "red".into());
        assert!(matches!(
            KnowledgeBase::from_records(apis.clone(), procs, Embedder::default()),
            Err(KbError::UnknownParam { .. })
        ));

        let (_, procs) = records();
        let mut dup = apis.clone();
        dup.push(apis[0].clone());
        assert!(matches!(
            KnowledgeBase::from_records(dup, procs.clone(), Embedder::default()),
            Err(KbError::DuplicateId(_))
        ));

        let mut procs2 = procs.clone();
        procs2.push(procs[0].clone());
        assert!(matches!(
            KnowledgeBase::from_records(apis, procs2, Embedder::default()),
            Err(KbError::DuplicateId(_))
        ));
    }

    #[test]
    fn empty_catalog_and_bad_enum_rejected() {
        let (mut apis, procs) = records();
        assert!(matches!(
            KnowledgeBase::from_records(vec![], vec![], Embedder::default()),
            Err(KbError::EmptyCatalog)
        ));
        apis[0].param_schema[0].enum_values = Some(vec![]);
        assert!(matches!(
            KnowledgeBase::from_records(apis, procs, Embedder::default()),
            Err(KbError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn empty_api_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(API_FILE), "").unwrap();
        fs::copy(
            fixture_corpus_dir().join(HANDBOOK_FILE),
            dir.path().join(HANDBOOK_FILE),
        )
        .unwrap();
        assert!(matches!(
            KnowledgeBase::load_dir(dir.path(), Embedder::default()),
            Err(KbError::EmptyCatalog)
        ));
    }

    #[test]
    fn parse_errors_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let good = fs::read_to_string(fixture_corpus_dir().join(API_FILE)).unwrap();
        let mut lines: Vec<&str> = good.lines().collect();
        lines.insert(2, "{not json");
        fs::write(dir.path().join(API_FILE), lines.join("\n")).unwrap();
        fs::copy(
            fixture_corpus_dir().join(HANDBOOK_FILE),
            dir.path().join(HANDBOOK_FILE),
        )
        .unwrap();
        match KnowledgeBase::load_dir(dir.path(), Embedder::default()) {
            Err(KbError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn usage_text_retrieves_its_api_first() {
        let kb = fixture();
        for api in kb.apis() {
            let hits = kb.retrieve_apis(&api.usage, 1).unwrap();
            assert_eq!(hits[0].0.name, api.name);
        }
    }

    #[test]
    fn thyroid_instruction_retrieves_core_apis() {
        let kb = fixture();
        let names: Vec<_> = kb
            .retrieve_apis("scan the patient's thyroid", 5)
            .unwrap()
            .into_iter()
            .map(|(a, _)| a.name.as_str())
            .collect();
        for expected in ["select_probe", "apply_gel", "start_scan"] {
            assert!(names.contains(&expected), "{names:?}");
        }
    }

    #[test]
    fn full_depth_returns_whole_catalog() {
        let kb = fixture();
        let hits = kb.retrieve_apis("anything", kb.apis().len()).unwrap();
        assert_eq!(hits.len(), 12);
        assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn procedures_retrieved_by_trigger() {
        let kb = fixture();
        for p in kb.procedures() {
            for trigger in &p.trigger_examples {
                let hits = kb.retrieve_procedures(trigger, 1).unwrap();
                assert_eq!(hits[0].0.task_id, p.task_id, "{trigger}");
            }
        }
        let hits = kb
            .retrieve_procedures("please perform a liver ultrasound", 1)
            .unwrap();
        assert_eq!(hits[0].0.task_id, "liver_scan");
        assert!(matches!(
            kb.retrieve_procedures("x", 0),
            Err(KbError::ZeroK)
        ));
        assert!(matches!(kb.retrieve_apis("x", 0), Err(KbError::ZeroK)));
    }

    #[test]
    fn retrieve_respects_disabled_retrievers() {
        let kb = fixture();
        let ctx = kb.retrieve("scan the heart", None, Some(1)).unwrap();
        assert!(ctx.apis.is_empty());
        assert_eq!(ctx.procedure_ids(), vec!["cardiac_scan"]);
        let again = kb.retrieve("scan the heart", Some(5), Some(1)).unwrap();
        assert_eq!(
            again,
            kb.retrieve("scan the heart", Some(5), Some(1)).unwrap()
        );
        assert_eq!(again.apis.len(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn every_dangling_reference_is_caught(proc_idx in 0usize..6, step_seed in 0usize..64, name in "[a-z_]{3,12}") {
            let (apis, mut procs) = records();
            prop_assume!(!apis.iter().any(|a| a.name == name));
            let p = &mut procs[proc_idx];
            let step = step_seed % p.steps.len();
            p.steps[step].api_name = name.clone();
            let is_dangling = matches!(
                validate_corpora(&apis, &procs),
                Err(KbError::DanglingApi { api_name, .. }) if api_name == name
            );
            prop_assert!(is_dangling);
        }
    }
}
