//! Experiment orchestration: configuration, reproducible runs, ablation
//! suites, evidence-count segmentation and explanation scoring.
//!
//! A run writes everything under `<output_dir>/<run_id>/`:
//!
//! ```text
//! manifest.json            inputs, digests, per-seed metrics, artifact paths
//! metrics.json metrics.txt per-seed and mean scores
//! partitions.jsonl         stance partitions (TBE-3, IBE-4)
//! justifications.jsonl     justification pairs (TBE-3, IBE-4)
//! understandings.jsonl     claim understandings (TBE-2, IBE-2, IBE-3)
//! seed-<s>/predictions.jsonl
//! seed-<s>/metrics.json
//! ```
//!
//! Every jsonl line carries `run_id` next to the record's `claim_id`. For
//! predictions that is the run id; stage outputs carry the manifest's
//! `stage_run_id` so runs sharing stage outputs hold identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    embed, Backend, BackendError, BackendParams, Embedder, HttpBackend, MockBackend, MockFallback, MockRule,
    ResponseCache, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, ENV_BACKEND_KEY, ENV_BACKEND_URL,
};
use crate::corpus::{
    load_corpus, load_corpus_with_sidecar, sha256_hex, ClaimRecord, Corpus, CorpusError, DatasetKind, LabelScheme,
    Split,
};
use crate::entail::{
    classify_evidence, consolidate, generate_understanding, run_ibe, EntailError, ExperimentMode, JustificationPair,
    Pipeline, PredictionRecord, StageBackend, StancePartition, Understanding,
};
use crate::metrics::{
    format_label_table, format_prf_table, macro_prf, segment_report, subjective_aggregate, ExplanationScores,
    LabelMetrics, MetricsError, MetricsReport, SegmentReport, SubjectiveMeans,
};
use crate::promptkit::{bindings, parse_subjective, PromptError, TemplateId, TemplateSet};
use crate::verdict::{
    build_input, featurize, predict, save_model, train, AblationMode, Example, ExternalPredictor, Materials,
    PredictorInput, TrainConfig, VerdictError, DEFAULT_FEATURE_DIM,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Entail(#[from] EntailError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Verdict(#[from] VerdictError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{stage} failed for claim {claim_id}: {reason}")]
    StageFailed {
        stage: String,
        claim_id: String,
        reason: String,
    },
    #[error("run not found: {0}")]
    RunNotFound(String),
    #[error("no gold explanation for claim {0}")]
    AlignmentError(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

impl RunnerError {
    /// Process exit code: 2 config, 3 backend, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::ConfigInvalid(_) | RunnerError::Prompt(_) => 2,
            RunnerError::Entail(e) => match e {
                EntailError::Backend { .. } | EntailError::EmptyCompletion { .. } => 3,
                EntailError::Prompt(_) | EntailError::NotInference(_) => 2,
                EntailError::PartitionMismatch { .. } => 4,
            },
            RunnerError::Backend(BackendError::Config(_)) => 2,
            RunnerError::Backend(_) | RunnerError::StageFailed { .. } => 3,
            RunnerError::Verdict(e) => match e {
                VerdictError::InvalidConfig(_)
                | VerdictError::AblationNotApplicable { .. }
                | VerdictError::NotTrainable(_) => 2,
                VerdictError::External(_) => 3,
                _ => 4,
            },
            RunnerError::Corpus(_)
            | RunnerError::Metrics(_)
            | RunnerError::RunNotFound(_)
            | RunnerError::AlignmentError(_)
            | RunnerError::Io { .. } => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |e| RunnerError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Cache namespace; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default = "default_fallback")]
    pub fallback: MockFallback,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<MockRule>,
    /// Tab-separated `<request digest>\t<reply>` script for the mock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

fn default_fallback() -> MockFallback {
    MockFallback::Echo
}

impl BackendConfig {
    pub fn mock<S: Into<String>>(model_name: S) -> Self {
        Self {
            kind: BackendKind::Mock,
            id: None,
            model_name: model_name.into(),
            url: None,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
            timeout_secs: None,
            fallback: MockFallback::Echo,
            rules: Vec::new(),
            script: None,
        }
    }

    pub fn backend_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| match self.kind {
            BackendKind::Mock => "mock".to_string(),
            BackendKind::Http => "http".to_string(),
        })
    }

    pub fn params(&self) -> BackendParams {
        BackendParams {
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, RunnerError> {
        let id = self.backend_id();
        match self.kind {
            BackendKind::Mock => {
                let mut mock = MockBackend::new(id, self.fallback.clone()).with_rules(self.rules.clone());
                if let Some(script) = &self.script {
                    mock = mock.load_script(script)?;
                }
                Ok(Arc::new(mock))
            }
            BackendKind::Http => {
                let url = match &self.url {
                    Some(u) => u.clone(),
                    None => std::env::var(ENV_BACKEND_URL).map_err(|_| {
                        RunnerError::ConfigInvalid(format!("http backend needs `url` or {ENV_BACKEND_URL}"))
                    })?,
                };
                let mut http = HttpBackend::new(id, url)?.with_api_key(std::env::var(ENV_BACKEND_KEY).ok());
                if let Some(secs) = self.timeout_secs {
                    http = http.with_timeout(std::time::Duration::from_secs(secs))?;
                }
                Ok(Arc::new(http))
            }
        }
    }

    fn digest_view(&self) -> Result<Value, RunnerError> {
        let script = match &self.script {
            Some(p) => Some(sha256_hex(&fs::read(p).map_err(io_err(p))?)),
            None => None,
        };
        Ok(serde_json::json!({
            "kind": self.kind,
            "id": self.backend_id(),
            "model_name": self.model_name,
            "url": self.url,
            "temperature": format!("{:?}", self.temperature),
            "max_tokens": self.max_tokens,
            "seed": self.seed,
            "fallback": self.fallback,
            "rules": self.rules,
            "script": script,
        }))
    }
}

/// Per-stage backend overrides; unset stages use the default backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBackends {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stance: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    /// `liar-raw` or `raw-fc`; read from the `.scheme` sidecar when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    /// Custom label list, least to most truthful. Overrides `scheme`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    #[serde(default = "default_ablation")]
    pub ablation: AblationMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_kind: Option<DatasetKind>,
    #[serde(default)]
    pub save_model: bool,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub stages: StageBackends,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_predictor: Option<ExternalPredictor>,
}

fn default_ablation() -> AblationMode {
    AblationMode::Full
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

fn default_parallelism() -> usize {
    4
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend_url: Option<String>,
    pub parallelism: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, RunnerError> {
        let mut config: ExperimentConfig =
            toml::from_str(text).map_err(|e| RunnerError::ConfigInvalid(e.to_string()))?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(|e| RunnerError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.path);
        if let Some(p) = self.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.template_dir.as_mut() {
            fix(p);
        }
        for b in self.backend_configs_mut() {
            if let Some(p) = b.script.as_mut() {
                fix(p);
            }
        }
    }

    fn backend_configs_mut(&mut self) -> impl Iterator<Item = &mut BackendConfig> {
        std::iter::once(&mut self.backend).chain(
            [
                &mut self.stages.stance,
                &mut self.stages.generate,
                &mut self.stages.verdict,
                &mut self.stages.judge,
            ]
            .into_iter()
            .flatten(),
        )
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(url) = &o.backend_url {
            for b in self.backend_configs_mut() {
                if b.kind == BackendKind::Http {
                    b.url = Some(url.clone());
                }
            }
        }
        if let Some(p) = o.parallelism {
            self.parallelism = p;
        }
        if let Some(dir) = &o.cache_dir {
            self.cache_dir = Some(dir.clone());
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::ConfigInvalid(m));
        if self.ablation != AblationMode::Full && self.mode != ExperimentMode::Tbe3 {
            return bad(format!("ablation {} requires mode TBE-3, got {}", self.ablation, self.mode));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.feature_dim == 0 || self.feature_dim > u32::MAX as usize {
            return bad("feature_dim out of range".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.mode.is_training() && self.external_predictor.is_none() {
            self.train.validate().map_err(|e| RunnerError::ConfigInvalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn scheme(&self) -> Result<Option<LabelScheme>, RunnerError> {
        if let Some(labels) = &self.corpus.labels {
            let name = self.corpus.scheme.clone().unwrap_or_else(|| "custom".into());
            return Ok(Some(LabelScheme::new(name, labels.clone())?));
        }
        match &self.corpus.scheme {
            Some(name) => LabelScheme::by_name(name)
                .map(Some)
                .ok_or_else(|| RunnerError::ConfigInvalid(format!("unknown scheme {name:?}"))),
            None => Ok(None),
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus, RunnerError> {
        Ok(match self.scheme()? {
            Some(scheme) => load_corpus(&self.corpus.path, &scheme)?,
            None => load_corpus_with_sidecar(&self.corpus.path)?,
        })
    }

    pub fn templates(&self) -> Result<TemplateSet, RunnerError> {
        Ok(match &self.template_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        })
    }

    fn stage_config(&self, stage: &str) -> &BackendConfig {
        let o = match stage {
            "stance" => &self.stages.stance,
            "generate" => &self.stages.generate,
            "verdict" => &self.stages.verdict,
            _ => &self.stages.judge,
        };
        o.as_ref().unwrap_or(&self.backend)
    }

    /// Backends, cache and templates described by this config.
    pub fn build_pipeline(&self) -> Result<Pipeline, RunnerError> {
        let default = self.backend.build()?;
        let stage = |name: &str| -> Result<StageBackend, RunnerError> {
            let cfg = self.stage_config(name);
            let backend = if std::ptr::eq(cfg, &self.backend) {
                default.clone()
            } else {
                cfg.build()?
            };
            Ok(StageBackend::new(backend, cfg.params()))
        };
        let cache = match &self.cache_dir {
            Some(dir) => Some(Arc::new(ResponseCache::open(dir)?)),
            None => None,
        };
        Ok(Pipeline {
            stance: stage("stance")?,
            generate: stage("generate")?,
            verdict: stage("verdict")?,
            cache,
            templates: self.templates()?,
        })
    }

    pub fn build_judge(&self) -> Result<StageBackend, RunnerError> {
        let cfg = self.stage_config("judge");
        Ok(StageBackend::new(cfg.build()?, cfg.params()))
    }

    /// Digest over the inputs of the generation stages only: corpus,
    /// templates, mode and the stance and generation backends. Runs that
    /// differ only in ablation, seeds or training share it.
    pub fn stage_digest(&self, corpus_digest: &str, templates: &TemplateSet) -> Result<String, RunnerError> {
        let view = serde_json::json!({
            "mode": self.mode,
            "corpus": corpus_digest,
            "scheme": self.scheme()?,
            "stance": self.stage_config("stance").digest_view()?,
            "generate": self.stage_config("generate").digest_view()?,
            "verdict": if self.mode.is_training() { Value::Null } else { self.stage_config("verdict").digest_view()? },
            "templates": templates.digests(),
        });
        Ok(sha256_hex(view.to_string().as_bytes()))
    }

    /// Digest over everything that can change a run's outputs. Output,
    /// cache and template locations and parallelism are excluded; the
    /// corpus, templates and mock scripts enter by content.
    pub fn digest(&self, corpus_digest: &str, templates: &TemplateSet) -> Result<String, RunnerError> {
        let mut stages = BTreeMap::new();
        for name in ["stance", "generate", "verdict", "judge"] {
            stages.insert(name, self.stage_config(name).digest_view()?);
        }
        let scheme = self.scheme()?;
        let view = serde_json::json!({
            "mode": self.mode,
            "ablation": self.ablation,
            "seeds": self.seeds,
            "feature_dim": self.feature_dim,
            "dataset_kind": self.dataset_kind,
            "save_model": self.save_model,
            "corpus": corpus_digest,
            "scheme": scheme,
            "train": {
                "learning_rate": format!("{:?}", self.train.learning_rate),
                "batch_size": self.train.batch_size,
                "patience": self.train.patience,
                "max_epochs": self.train.max_epochs,
                "l2": format!("{:?}", self.train.l2),
            },
            "stages": stages,
            "templates": templates.digests(),
            "external_predictor": self.external_predictor,
        });
        Ok(sha256_hex(view.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "state")]
pub enum RunStatus {
    Complete,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mp: f64,
    pub mr: f64,
    pub mf1: f64,
    pub n: usize,
    pub parse_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSummary {
    pub mp: f64,
    pub mr: f64,
    pub mf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub status: RunStatus,
    pub mode: ExperimentMode,
    pub ablation: AblationMode,
    pub config_digest: String,
    /// Key of the stage outputs (`stage-<hex>`); shared by runs that
    /// differ only in ablation, seeds or training.
    pub stage_run_id: String,
    pub corpus_path: PathBuf,
    pub corpus_digest: String,
    pub scheme: LabelScheme,
    pub dataset_kind: DatasetKind,
    pub template_digests: BTreeMap<String, String>,
    /// Stage name -> `backend id/model name`.
    pub backend_models: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    /// Artifact name -> path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    pub seed_metrics: Vec<SeedSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<MeanSummary>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn artifact(&self, run_dir: &Path, name: &str) -> Option<PathBuf> {
        self.artifacts.get(name).map(|p| run_dir.join(p))
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// `tbe-3-full-<12 hex>`.
pub fn run_id(mode: ExperimentMode, ablation: AblationMode, config_digest: &str) -> String {
    format!(
        "{}-{}-{}",
        mode.as_str().to_lowercase(),
        ablation,
        &config_digest[..12.min(config_digest.len())]
    )
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Writes one JSON object per item with `run_id` added.
pub fn write_keyed_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    run_id: &str,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), RunnerError> {
    let mut out = String::new();
    for item in items {
        let mut v = serde_json::to_value(item).expect("record serializes");
        if let Value::Object(map) = &mut v {
            map.insert("run_id".into(), Value::String(run_id.to_string()));
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a file written by [`write_keyed_jsonl`]; returns `(run_id, item)`.
pub fn read_keyed_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(String, T)>, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: String| RunnerError::Io {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let mut v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let run_id = v
            .as_object_mut()
            .and_then(|m| m.remove("run_id"))
            .and_then(|r| r.as_str().map(str::to_string))
            .unwrap_or_default();
        out.push((run_id, serde_json::from_value(v).map_err(|e| bad(e.to_string()))?));
    }
    Ok(out)
}

/// Stage outputs keyed by claim id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageArtifacts {
    pub partitions: BTreeMap<String, StancePartition>,
    pub justifications: BTreeMap<String, JustificationPair>,
    pub understandings: BTreeMap<String, Understanding>,
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool, RunnerError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| RunnerError::ConfigInvalid(format!("thread pool: {e}")))
}

fn stage_failure(stage: &str, claim_id: &str, reason: impl ToString) -> RunnerError {
    RunnerError::StageFailed {
        stage: stage.to_string(),
        claim_id: claim_id.to_string(),
        reason: reason.to_string(),
    }
}

/// Runs `f` over the records on the pool; results keep record order.
fn par_records<T: Send>(
    pool: &rayon::ThreadPool,
    records: &[&ClaimRecord],
    f: impl Fn(&ClaimRecord) -> Result<T, EntailError> + Sync + Send,
) -> Vec<Result<T, EntailError>> {
    pool.install(|| records.par_iter().map(|r| f(r)).collect())
}

/// Splits results into successes and the first failure.
fn settle<T>(results: Vec<Result<T, EntailError>>) -> (Vec<T>, Option<EntailError>) {
    let mut ok = Vec::new();
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                first.get_or_insert(e);
            }
        }
    }
    (ok, first)
}

/// Stage 1 over `records`. A partition with backend failures counts as a
/// failed record; the successful partitions are returned either way.
pub fn stage1(
    records: &[&ClaimRecord],
    pipeline: &Pipeline,
    parallelism: usize,
) -> (Vec<StancePartition>, Option<RunnerError>) {
    let pool = match thread_pool(parallelism) {
        Ok(p) => p,
        Err(e) => return (Vec::new(), Some(e)),
    };
    let (parts, err) = settle(par_records(&pool, records, |r| classify_evidence(r, pipeline)));
    let mut err = err.map(RunnerError::from);
    if err.is_none() {
        if let Some(p) = parts.iter().find(|p| !p.errors.is_empty()) {
            let (i, reason) = p.errors.iter().next().expect("non-empty");
            err = Some(stage_failure("stance", &p.claim_id, format!("evidence {i}: {reason}")));
        }
    }
    (parts, err)
}

/// Stage 2 over `records`, using their partitions.
pub fn stage2(
    records: &[&ClaimRecord],
    partitions: &BTreeMap<String, StancePartition>,
    pipeline: &Pipeline,
    parallelism: usize,
) -> (Vec<JustificationPair>, Option<RunnerError>) {
    let pool = match thread_pool(parallelism) {
        Ok(p) => p,
        Err(e) => return (Vec::new(), Some(e)),
    };
    if let Some(r) = records.iter().find(|r| !partitions.contains_key(&r.id)) {
        return (Vec::new(), Some(stage_failure("consolidate", &r.id, "no stance partition")));
    }
    let (pairs, err) = settle(par_records(&pool, records, |r| consolidate(r, &partitions[&r.id], pipeline)));
    (pairs, err.map(RunnerError::from))
}

fn understandings(
    records: &[&ClaimRecord],
    pipeline: &Pipeline,
    parallelism: usize,
) -> (Vec<Understanding>, Option<RunnerError>) {
    let pool = match thread_pool(parallelism) {
        Ok(p) => p,
        Err(e) => return (Vec::new(), Some(e)),
    };
    let (u, err) = settle(par_records(&pool, records, |r| generate_understanding(r, pipeline)));
    (u, err.map(RunnerError::from))
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    corpus: &'a Corpus,
    pipeline: &'a Pipeline,
    manifest: RunManifest,
    run_dir: PathBuf,
}

impl RunContext<'_> {
    fn record_artifact(&mut self, name: &str, rel: &str) {
        self.manifest.artifacts.insert(name.to_string(), rel.to_string());
    }

    fn write_stage<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), RunnerError> {
        let rel = format!("{name}.jsonl");
        write_keyed_jsonl(&self.run_dir.join(&rel), &self.manifest.stage_run_id, items)?;
        self.record_artifact(name, &rel);
        Ok(())
    }

    fn write_manifest(&mut self) -> Result<(), RunnerError> {
        self.manifest.finished_at_ms = now_ms();
        write_json(&self.run_dir.join(MANIFEST_FILE), &self.manifest)
    }

    /// Marks the run failed, flushes the manifest and passes the error on.
    fn fail(&mut self, err: RunnerError) -> RunnerError {
        log::error!("run {} failed: {err}", self.manifest.run_id);
        self.manifest.status = RunStatus::Failed { reason: err.to_string() };
        if let Err(e) = self.write_manifest() {
            log::error!("could not write manifest: {e}");
        }
        err
    }
}

/// Builds the run context and creates its directory.
fn open_run<'a>(
    config: &'a ExperimentConfig,
    corpus: &'a Corpus,
    pipeline: &'a Pipeline,
) -> Result<RunContext<'a>, RunnerError> {
    config.validate()?;
    let config_digest = config.digest(&corpus.provenance.digest, &pipeline.templates)?;
    let id = run_id(config.mode, config.ablation, &config_digest);
    let stage_digest = config.stage_digest(&corpus.provenance.digest, &pipeline.templates)?;
    let run_dir = config.output_dir.join(&id);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let describe = |s: &StageBackend| format!("{}/{}", s.backend.id(), s.params.model_name);
    let backend_models = BTreeMap::from([
        ("stance".to_string(), describe(&pipeline.stance)),
        ("generate".to_string(), describe(&pipeline.generate)),
        ("verdict".to_string(), describe(&pipeline.verdict)),
    ]);
    let manifest = RunManifest {
        run_id: id,
        status: RunStatus::Failed {
            reason: "in progress".into(),
        },
        mode: config.mode,
        ablation: config.ablation,
        config_digest,
        stage_run_id: format!("stage-{}", &stage_digest[..12]),
        corpus_path: corpus.provenance.path.clone(),
        corpus_digest: corpus.provenance.digest.clone(),
        scheme: corpus.scheme.clone(),
        dataset_kind: config.dataset_kind.unwrap_or_else(|| DatasetKind::for_scheme(&corpus.scheme)),
        template_digests: pipeline.templates.digests(),
        backend_models,
        seeds: config.seeds.clone(),
        started_at_ms: now_ms(),
        finished_at_ms: 0,
        artifacts: BTreeMap::new(),
        seed_metrics: Vec::new(),
        mean: None,
        config: config.clone(),
    };
    Ok(RunContext {
        config,
        corpus,
        pipeline,
        manifest,
        run_dir,
    })
}

/// Records the mode needs generated materials for: every split for
/// training modes, test only for inference modes.
fn material_records(corpus: &Corpus, mode: ExperimentMode) -> Vec<&ClaimRecord> {
    if mode.is_training() {
        corpus.records.iter().collect()
    } else {
        corpus.split_view(Split::Test)
    }
}

/// Computes the stage outputs a training mode consumes. Inference modes
/// produce theirs inside the prompted flow and get an empty set here.
pub fn compute_materials(
    config: &ExperimentConfig,
    corpus: &Corpus,
    pipeline: &Pipeline,
) -> Result<StageArtifacts, RunnerError> {
    let mut out = StageArtifacts::default();
    let records = material_records(corpus, config.mode);
    match config.mode {
        ExperimentMode::Tbe2 => {
            let (u, err) = understandings(&records, pipeline, config.parallelism);
            if let Some(e) = err {
                return Err(e);
            }
            out.understandings = u.into_iter().map(|u| (u.claim_id.clone(), u)).collect();
        }
        ExperimentMode::Tbe3 => {
            let (parts, err) = stage1(&records, pipeline, config.parallelism);
            if let Some(e) = err {
                return Err(e);
            }
            out.partitions = parts.into_iter().map(|p| (p.claim_id.clone(), p)).collect();
            let (pairs, err) = stage2(&records, &out.partitions, pipeline, config.parallelism);
            if let Some(e) = err {
                return Err(e);
            }
            out.justifications = pairs.into_iter().map(|p| (p.claim_id.clone(), p)).collect();
        }
        _ => {}
    }
    Ok(out)
}

/// Runs one experiment end to end with backends built from the config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest, RunnerError> {
    config.validate()?;
    let corpus = config.load_corpus()?;
    let pipeline = config.build_pipeline()?;
    run_experiment_with(config, &corpus, &pipeline, None)
}

/// Runs one experiment with a caller-supplied pipeline. Precomputed
/// materials are reused instead of calling the backend again.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    corpus: &Corpus,
    pipeline: &Pipeline,
    materials: Option<&StageArtifacts>,
) -> Result<RunManifest, RunnerError> {
    let mut ctx = open_run(config, corpus, pipeline)?;
    log::info!("run {} ({} seeds)", ctx.manifest.run_id, config.seeds.len());
    let result = if config.mode.is_training() {
        run_training(&mut ctx, materials)
    } else {
        run_inference(&mut ctx)
    };
    match result {
        Ok(()) => {
            ctx.manifest.status = RunStatus::Complete;
            ctx.write_manifest()?;
            Ok(ctx.manifest)
        }
        Err(e) => Err(ctx.fail(e)),
    }
}

fn run_training(ctx: &mut RunContext<'_>, materials: Option<&StageArtifacts>) -> Result<(), RunnerError> {
    let config = ctx.config;
    let corpus = ctx.corpus;
    for split in Split::ALL {
        if corpus.split_view(split).is_empty() {
            return Err(RunnerError::Corpus(CorpusError::SchemaViolation {
                index: 0,
                reason: format!("{split} split is empty"),
            }));
        }
    }
    let computed;
    let materials = match materials {
        Some(m) => m,
        None => {
            computed = compute_stage_with_flags(ctx)?;
            &computed
        }
    };
    if config.mode == ExperimentMode::Tbe3 {
        let parts: Vec<_> = corpus.records.iter().filter_map(|r| materials.partitions.get(&r.id)).collect();
        let pairs: Vec<_> = corpus.records.iter().filter_map(|r| materials.justifications.get(&r.id)).collect();
        ctx.write_stage("partitions", &parts)?;
        ctx.write_stage("justifications", &pairs)?;
    }
    if config.mode == ExperimentMode::Tbe2 {
        let u: Vec<_> = corpus.records.iter().filter_map(|r| materials.understandings.get(&r.id)).collect();
        ctx.write_stage("understandings", &u)?;
    }

    let text_of = |r: &ClaimRecord| -> Result<String, RunnerError> {
        let m = Materials {
            understanding: materials.understandings.get(&r.id).map(|u| u.text.as_str()),
            justifications: materials.justifications.get(&r.id),
        };
        Ok(build_input(r, &m, config.mode, config.ablation)?)
    };
    let inputs = |split: Split| -> Result<Vec<(&ClaimRecord, String)>, RunnerError> {
        corpus
            .split_view(split)
            .into_iter()
            .map(|r| Ok((r, text_of(r)?)))
            .collect()
    };
    let (train_in, val_in, test_in) = (inputs(Split::Train)?, inputs(Split::Val)?, inputs(Split::Test)?);
    let scheme = &corpus.scheme;
    let examples = |rows: &[(&ClaimRecord, String)]| -> Vec<Example> {
        rows.iter()
            .map(|(r, text)| Example {
                features: featurize(text, config.feature_dim),
                label: scheme.index_of(&r.label).expect("labels resolved at load"),
            })
            .collect()
    };
    let native = config.external_predictor.is_none();
    let (train_x, val_x, test_x) = if native {
        (examples(&train_in), examples(&val_in), examples(&test_in))
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let seed_dir_rel = format!("seed-{seed}");
        let seed_dir = ctx.run_dir.join(&seed_dir_rel);
        fs::create_dir_all(&seed_dir).map_err(io_err(&seed_dir))?;
        let train_config = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let predicted: Vec<String> = match &config.external_predictor {
            None => {
                let outcome = train(&train_x, &val_x, &train_config, scheme)?;
                write_json(&seed_dir.join("history.json"), &outcome.history)?;
                ctx.record_artifact(&format!("{seed_dir_rel}/history"), &format!("{seed_dir_rel}/history.json"));
                if config.save_model {
                    let mut model = outcome.model.clone();
                    model.train_manifest_digest = ctx.manifest.config_digest.clone();
                    save_model(&model, &seed_dir.join("model.fcvm"))?;
                    ctx.record_artifact(&format!("{seed_dir_rel}/model"), &format!("{seed_dir_rel}/model.fcvm"));
                }
                test_x.iter().map(|x| predict(&outcome.model, &x.features).0).collect()
            }
            Some(ext) => {
                let to_input = |rows: &[(&ClaimRecord, String)], labeled: bool| -> Vec<PredictorInput> {
                    rows.iter()
                        .map(|(r, text)| PredictorInput {
                            id: r.id.clone(),
                            text: text.clone(),
                            label: labeled.then(|| r.label.clone()),
                        })
                        .collect()
                };
                ext.run(
                    &seed_dir.join("external"),
                    &to_input(&train_in, true),
                    &to_input(&val_in, true),
                    &to_input(&test_in, false),
                    &train_config,
                    scheme,
                )?
            }
        };
        let preds: Vec<PredictionRecord> = test_in
            .iter()
            .zip(predicted)
            .map(|((r, _), label)| PredictionRecord {
                claim_id: r.id.clone(),
                predicted_label: label,
                gold_label: r.label.clone(),
                mode: config.mode,
                parse_fallback_used: false,
            })
            .collect();
        reports.push(write_seed(ctx, seed, &preds)?);
    }
    finish_metrics(ctx, &reports)
}

/// Stage materials for a training run; on failure the partial outputs are
/// written and the error is returned.
fn compute_stage_with_flags(ctx: &mut RunContext<'_>) -> Result<StageArtifacts, RunnerError> {
    let config = ctx.config;
    let records = material_records(ctx.corpus, config.mode);
    let mut out = StageArtifacts::default();
    match config.mode {
        ExperimentMode::Tbe2 => {
            let (u, err) = understandings(&records, ctx.pipeline, config.parallelism);
            if let Some(e) = err {
                ctx.write_stage("understandings", &u)?;
                return Err(e);
            }
            out.understandings = u.into_iter().map(|u| (u.claim_id.clone(), u)).collect();
        }
        ExperimentMode::Tbe3 => {
            let (parts, err) = stage1(&records, ctx.pipeline, config.parallelism);
            if let Some(e) = err {
                ctx.write_stage("partitions", &parts)?;
                return Err(e);
            }
            out.partitions = parts.into_iter().map(|p| (p.claim_id.clone(), p)).collect();
            let (pairs, err) = stage2(&records, &out.partitions, ctx.pipeline, config.parallelism);
            if let Some(e) = err {
                let parts: Vec<_> = out.partitions.values().collect();
                ctx.write_stage("partitions", &parts)?;
                ctx.write_stage("justifications", &pairs)?;
                return Err(e);
            }
            out.justifications = pairs.into_iter().map(|p| (p.claim_id.clone(), p)).collect();
        }
        _ => {}
    }
    Ok(out)
}

fn run_inference(ctx: &mut RunContext<'_>) -> Result<(), RunnerError> {
    let config = ctx.config;
    let test = ctx.corpus.split_view(Split::Test);
    if test.is_empty() {
        return Err(RunnerError::Corpus(CorpusError::SchemaViolation {
            index: 0,
            reason: "test split is empty".into(),
        }));
    }
    let pool = thread_pool(config.parallelism)?;
    let scheme = &ctx.corpus.scheme;
    let pipeline = ctx.pipeline;
    let (outcomes, err) = settle(par_records(&pool, &test, |r| run_ibe(config.mode, r, pipeline, scheme)));

    let parts: Vec<_> = outcomes.iter().filter_map(|o| o.partition.as_ref()).collect();
    let pairs: Vec<_> = outcomes.iter().filter_map(|o| o.justifications.as_ref()).collect();
    let unders: Vec<_> = outcomes.iter().filter_map(|o| o.understanding.as_ref()).collect();
    match config.mode {
        ExperimentMode::Ibe4 => {
            ctx.write_stage("partitions", &parts)?;
            ctx.write_stage("justifications", &pairs)?;
        }
        ExperimentMode::Ibe2 | ExperimentMode::Ibe3 => ctx.write_stage("understandings", &unders)?,
        _ => {}
    }
    if let Some(e) = err {
        return Err(e.into());
    }
    if let Some(p) = parts.iter().find(|p| !p.errors.is_empty()) {
        return Err(stage_failure("stance", &p.claim_id, p.errors.values().next().expect("non-empty")));
    }
    let preds: Vec<PredictionRecord> = outcomes.into_iter().map(|o| o.prediction).collect();
    // prompted predictions carry no seed-dependent state, so every seed
    // directory gets the same predictions
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        reports.push(write_seed(ctx, seed, &preds)?);
    }
    finish_metrics(ctx, &reports)
}

fn write_seed(ctx: &mut RunContext<'_>, seed: u64, preds: &[PredictionRecord]) -> Result<MetricsReport, RunnerError> {
    let rel = format!("seed-{seed}");
    let dir = ctx.run_dir.join(&rel);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let golds: Vec<&str> = preds.iter().map(|p| p.gold_label.as_str()).collect();
    let predicted: Vec<&str> = preds.iter().map(|p| p.predicted_label.as_str()).collect();
    let report = macro_prf(&golds, &predicted, &ctx.corpus.scheme)?;
    write_keyed_jsonl(&dir.join("predictions.jsonl"), &ctx.manifest.run_id, preds)?;
    write_json(&dir.join("metrics.json"), &report)?;
    ctx.record_artifact(&format!("{rel}/predictions"), &format!("{rel}/predictions.jsonl"));
    ctx.record_artifact(&format!("{rel}/metrics"), &format!("{rel}/metrics.json"));
    ctx.manifest.seed_metrics.push(SeedSummary {
        seed,
        mp: report.mp,
        mr: report.mr,
        mf1: report.mf1,
        n: report.n,
        parse_fallbacks: preds.iter().filter(|p| p.parse_fallback_used).count(),
    });
    Ok(report)
}

/// Field-wise arithmetic mean of per-seed reports over the same test set.
pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let per_label = first
        .per_label
        .iter()
        .enumerate()
        .map(|(i, l)| LabelMetrics {
            label: l.label.clone(),
            precision: avg(&|r| r.per_label[i].precision),
            recall: avg(&|r| r.per_label[i].recall),
            f1: avg(&|r| r.per_label[i].f1),
            support: l.support,
        })
        .collect();
    Some(MetricsReport {
        per_label,
        mp: avg(&|r| r.mp),
        mr: avg(&|r| r.mr),
        mf1: avg(&|r| r.mf1),
        n: first.n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

fn finish_metrics(ctx: &mut RunContext<'_>, reports: &[MetricsReport]) -> Result<(), RunnerError> {
    let mean = mean_report(reports).ok_or(RunnerError::Metrics(MetricsError::EmptyInput))?;
    ctx.manifest.mean = Some(MeanSummary {
        mp: mean.mp,
        mr: mean.mr,
        mf1: mean.mf1,
    });
    let metrics = RunMetrics {
        run_id: ctx.manifest.run_id.clone(),
        seeds: ctx.config.seeds.clone(),
        per_seed: reports.to_vec(),
        mean,
    };
    write_json(&ctx.run_dir.join("metrics.json"), &metrics)?;
    fs::write(ctx.run_dir.join("metrics.txt"), format_run_metrics(&ctx.manifest, &metrics))
        .map_err(io_err(&ctx.run_dir))?;
    ctx.record_artifact("metrics", "metrics.json");
    ctx.record_artifact("metrics-table", "metrics.txt");
    Ok(())
}

pub fn format_run_metrics(manifest: &RunManifest, metrics: &RunMetrics) -> String {
    let mut rows: Vec<(String, &MetricsReport)> = metrics
        .seeds
        .iter()
        .zip(&metrics.per_seed)
        .map(|(s, r)| (format!("seed {s}"), r))
        .collect();
    rows.push(("mean".to_string(), &metrics.mean));
    let title = format!("{} {}", manifest.mode, manifest.ablation);
    format!(
        "run {}\n\n{}\n{}",
        manifest.run_id,
        format_prf_table(&title, &rows),
        format_label_table(&metrics.mean)
    )
}

pub fn run_dir(runs_dir: &Path, run_id: &str) -> PathBuf {
    runs_dir.join(run_id)
}

pub fn load_manifest(runs_dir: &Path, run_id: &str) -> Result<RunManifest, RunnerError> {
    let path = run_dir(runs_dir, run_id).join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|_| RunnerError::RunNotFound(run_id.to_string()))?;
    serde_json::from_str(&text).map_err(|e| RunnerError::Io {
        path,
        reason: e.to_string(),
    })
}

pub fn load_run_metrics(runs_dir: &Path, run_id: &str) -> Result<RunMetrics, RunnerError> {
    let path = run_dir(runs_dir, run_id).join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|_| RunnerError::RunNotFound(run_id.to_string()))?;
    serde_json::from_str(&text).map_err(|e| RunnerError::Io {
        path,
        reason: e.to_string(),
    })
}

/// Text report for a finished run.
pub fn report(runs_dir: &Path, run_id: &str) -> Result<String, RunnerError> {
    let manifest = load_manifest(runs_dir, run_id)?;
    match &manifest.status {
        RunStatus::Complete => Ok(format_run_metrics(&manifest, &load_run_metrics(runs_dir, run_id)?)),
        RunStatus::Failed { reason } => Ok(format!("run {} failed: {reason}\n", manifest.run_id)),
    }
}

#[derive(Debug, Clone)]
pub struct AblationSuite {
    pub manifests: Vec<RunManifest>,
    /// Mean reports in [`AblationMode::ALL`] order.
    pub means: Vec<MetricsReport>,
    pub table: String,
}

/// Runs the four TBE-3 ablations over one shared set of stage outputs.
pub fn run_ablation_suite(config: &ExperimentConfig) -> Result<AblationSuite, RunnerError> {
    config.validate()?;
    let corpus = config.load_corpus()?;
    let pipeline = config.build_pipeline()?;
    run_ablation_suite_with(config, &corpus, &pipeline)
}

pub fn run_ablation_suite_with(
    config: &ExperimentConfig,
    corpus: &Corpus,
    pipeline: &Pipeline,
) -> Result<AblationSuite, RunnerError> {
    if config.mode != ExperimentMode::Tbe3 {
        return Err(RunnerError::ConfigInvalid(format!(
            "ablation suite requires TBE-3, got {}",
            config.mode
        )));
    }
    let materials = compute_materials(config, corpus, pipeline)?;
    let mut manifests = Vec::new();
    let mut means = Vec::new();
    for ablation in AblationMode::ALL {
        let cfg = ExperimentConfig {
            ablation,
            ..config.clone()
        };
        let manifest = run_experiment_with(&cfg, corpus, pipeline, Some(&materials))?;
        means.push(load_run_metrics(&cfg.output_dir, &manifest.run_id)?.mean);
        manifests.push(manifest);
    }
    let rows: Vec<(String, &MetricsReport)> = AblationMode::ALL
        .iter()
        .zip(&means)
        .map(|(a, r)| (a.to_string(), r))
        .collect();
    let table = format_prf_table("ablation", &rows);
    Ok(AblationSuite { manifests, means, table })
}

/// Evidence-count segmentation of one seed's test predictions (the first
/// recorded seed when `seed` is `None`).
pub fn run_segmentation(runs_dir: &Path, run_id: &str, seed: Option<u64>) -> Result<SegmentReport, RunnerError> {
    let manifest = load_manifest(runs_dir, run_id)?;
    let seed = match seed {
        Some(s) => s,
        None => *manifest
            .seed_metrics
            .first()
            .map(|s| &s.seed)
            .ok_or_else(|| RunnerError::RunNotFound(format!("{run_id} has no predictions")))?,
    };
    let dir = run_dir(runs_dir, run_id);
    let preds_path = manifest
        .artifact(&dir, &format!("seed-{seed}/predictions"))
        .ok_or_else(|| RunnerError::RunNotFound(format!("{run_id} seed {seed}")))?;
    let preds: Vec<PredictionRecord> = read_keyed_jsonl(&preds_path)?.into_iter().map(|(_, p)| p).collect();
    let corpus = load_corpus(&manifest.corpus_path, &manifest.scheme)?;
    let counts = preds
        .iter()
        .map(|p| {
            corpus
                .get(&p.claim_id)
                .map(|r| r.evidences.len())
                .ok_or_else(|| RunnerError::AlignmentError(p.claim_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let predicted: Vec<&str> = preds.iter().map(|p| p.predicted_label.as_str()).collect();
    let golds: Vec<&str> = preds.iter().map(|p| p.gold_label.as_str()).collect();
    Ok(segment_report(&predicted, &golds, &counts, manifest.dataset_kind, &manifest.scheme)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldExplanation {
    pub claim_id: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEval {
    pub n: usize,
    pub scores: ExplanationScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjective: Option<SubjectiveMeans>,
}

pub fn read_gold_explanations(path: &Path) -> Result<BTreeMap<String, String>, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let g: GoldExplanation = serde_json::from_str(line).map_err(|e| RunnerError::Io {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.insert(g.claim_id, g.explanation);
    }
    Ok(out)
}

/// Scores the run's test-split explanations (supporting justification
/// followed by refuting justification) against gold explanations.
pub fn run_explanation_eval(
    runs_dir: &Path,
    run_id: &str,
    gold_path: &Path,
    embedder: Option<&dyn Embedder>,
    judge: Option<&StageBackend>,
) -> Result<ExplanationEval, RunnerError> {
    let manifest = load_manifest(runs_dir, run_id)?;
    let dir = run_dir(runs_dir, run_id);
    let path = manifest
        .artifact(&dir, "justifications")
        .ok_or_else(|| RunnerError::RunNotFound(format!("{run_id} has no justifications")))?;
    let pairs: Vec<JustificationPair> = read_keyed_jsonl(&path)?.into_iter().map(|(_, p)| p).collect();
    let corpus = load_corpus(&manifest.corpus_path, &manifest.scheme)?;
    let gold = read_gold_explanations(gold_path)?;
    let items: Vec<(&ClaimRecord, String, &str)> = pairs
        .iter()
        .filter_map(|p| corpus.get(&p.claim_id).map(|r| (r, p)))
        .filter(|(r, _)| r.split == Split::Test)
        .map(|(r, p)| {
            gold.get(&r.id)
                .map(|g| (r, p.explanation(), g.as_str()))
                .ok_or_else(|| RunnerError::AlignmentError(r.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(RunnerError::Metrics(MetricsError::EmptyInput));
    }

    let mut all = Vec::with_capacity(items.len());
    for (_, candidate, reference) in &items {
        let mut s = ExplanationScores::score(candidate, reference);
        if let Some(e) = embedder {
            let v = embed(e, &[candidate.clone(), reference.to_string()])?;
            s.semantic = Some(v[0].iter().zip(&v[1]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0));
        }
        all.push(s);
    }
    let scores = ExplanationScores::mean(&all)?;

    let subjective = match judge {
        None => None,
        Some(judge) => {
            let templates = manifest.config.templates()?;
            let mut rated = Vec::with_capacity(items.len());
            for (r, candidate, _) in &items {
                let prompt = templates.render(
                    TemplateId::SubjectiveEval,
                    &bindings([("claim", r.claim.clone()), ("explanation", candidate.clone())]),
                )?;
                let request = crate::backend::CompletionRequest::new(
                    vec![
                        crate::backend::Message::system(prompt.system),
                        crate::backend::Message::user(prompt.user),
                    ],
                    judge.params.clone(),
                );
                let reply = crate::backend::complete(judge.backend.as_ref(), &request)?.text;
                rated.push(parse_subjective(&reply).map_err(|e| stage_failure("judge", &r.id, e))?);
            }
            Some(subjective_aggregate(&rated)?)
        }
    };
    Ok(ExplanationEval {
        n: items.len(),
        scores,
        subjective,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub path: PathBuf,
    pub digest: String,
    pub scheme: String,
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Bucket id -> record count over the whole corpus.
    pub evidence_buckets: Vec<(String, usize)>,
}

/// Validates a corpus and summarizes its splits and evidence counts.
pub fn ingest(corpus: &Corpus) -> IngestSummary {
    let kind = DatasetKind::for_scheme(&corpus.scheme);
    let mut buckets: Vec<(String, usize)> = kind.buckets().iter().map(|b| (b.2.to_string(), 0)).collect();
    for r in &corpus.records {
        buckets[crate::corpus::evidence_bucket(r.evidences.len(), kind).ordinal].1 += 1;
    }
    let [train, val, test] = corpus.split_sizes();
    IngestSummary {
        path: corpus.provenance.path.clone(),
        digest: corpus.provenance.digest.clone(),
        scheme: corpus.scheme.name().to_string(),
        records: corpus.records.len(),
        train,
        val,
        test,
        evidence_buckets: buckets,
    }
}

/// Stage 1 over one split (or all records) written to `out`, keyed with
/// `run_id`.
pub fn run_stage1(
    config: &ExperimentConfig,
    corpus: &Corpus,
    pipeline: &Pipeline,
    split: Option<Split>,
    out: &Path,
    run_id: &str,
) -> Result<usize, RunnerError> {
    let records: Vec<&ClaimRecord> = match split {
        Some(s) => corpus.split_view(s),
        None => corpus.records.iter().collect(),
    };
    let (parts, err) = stage1(&records, pipeline, config.parallelism);
    write_keyed_jsonl(out, run_id, &parts)?;
    match err {
        Some(e) => Err(e),
        None => Ok(parts.len()),
    }
}

/// Stage 2 for every partition in `partitions_path`, written to `out`.
pub fn run_stage2(
    config: &ExperimentConfig,
    corpus: &Corpus,
    pipeline: &Pipeline,
    partitions_path: &Path,
    out: &Path,
    run_id: &str,
) -> Result<usize, RunnerError> {
    let parts: BTreeMap<String, StancePartition> = read_keyed_jsonl::<StancePartition>(partitions_path)?
        .into_iter()
        .map(|(_, p)| (p.claim_id.clone(), p))
        .collect();
    let records = parts
        .keys()
        .map(|id| corpus.get(id).ok_or_else(|| RunnerError::AlignmentError(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let (pairs, err) = stage2(&records, &parts, pipeline, config.parallelism);
    write_keyed_jsonl(out, run_id, &pairs)?;
    match err {
        Some(e) => Err(e),
        None => Ok(pairs.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockEmbedder;
    use crate::corpus::write_records;

    fn rec(id: &str, label: &str, evidences: &[&str], split: Split) -> ClaimRecord {
        ClaimRecord {
            id: id.into(),
            claim: format!("claim {id}"),
            label: label.into(),
            evidences: evidences.iter().map(|s| s.to_string()).collect(),
            split,
            source_meta: None,
        }
    }

    fn toy_corpus(dir: &Path) -> PathBuf {
        let mut records = Vec::new();
        for i in 0..12 {
            let split = match i % 4 {
                0 | 1 => Split::Train,
                2 => Split::Val,
                _ => Split::Test,
            };
            let label = ["false", "half-true", "true"][i % 3];
            records.push(rec(&format!("t{i}"), label, &["sun is bright", "moon is pale"][..i % 3], split));
        }
        let path = dir.join("corpus.jsonl");
        write_records(&path, &records).unwrap();
        fs::write(crate::corpus::sidecar_path(&path), "raw-fc\n").unwrap();
        path
    }

    fn config(dir: &Path, mode: &str) -> ExperimentConfig {
        toy_corpus(dir);
        let text = format!(
            r#"
mode = "{mode}"
seeds = [7]
output_dir = "runs"
feature_dim = 256

[corpus]
path = "corpus.jsonl"

[backend]
kind = "mock"
model_name = "mock-1"
fallback = {{ kind = "constant", text = "true" }}
"#
        );
        ExperimentConfig::from_toml_str(&text, dir).unwrap()
    }

    #[test]
    fn config_defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "IBE-1");
        assert_eq!(c.ablation, AblationMode::Full);
        assert_eq!(c.parallelism, 4);
        assert_eq!(c.backend.temperature, 0.001);
        assert_eq!(c.backend.max_tokens, 512);
        assert!(c.corpus.path.starts_with(dir.path()));
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string(), dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), "IBE-1");
        c.ablation = AblationMode::WoSupporting;
        assert!(matches!(c.validate(), Err(RunnerError::ConfigInvalid(_))));
        let mut c = config(dir.path(), "TBE-3");
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(RunnerError::ConfigInvalid(_))));
        let err = ExperimentConfig::from_toml_str("mode = \"TBE-3\"\nbogus = 1\n", dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn keyed_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let mut part = StancePartition::empty("c1");
        part.supporting.push(0);
        part.raw_replies.insert(0, "supporting".into());
        write_keyed_jsonl(&path, "run-x", [&part]).unwrap();
        let back: Vec<(String, StancePartition)> = read_keyed_jsonl(&path).unwrap();
        assert_eq!(back, vec![("run-x".to_string(), part)]);
    }

    #[test]
    fn ibe1_run_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "IBE-1");
        let m = run_experiment(&c).unwrap();
        assert!(m.is_complete());
        assert_eq!(m.seed_metrics.len(), 1);
        assert_eq!(m.seed_metrics[0].n, 3);
        let text = report(&c.output_dir, &m.run_id).unwrap();
        assert!(text.contains("mean"));
        assert!(matches!(report(&c.output_dir, "nope"), Err(RunnerError::RunNotFound(_))));
    }

    #[test]
    fn digest_tracks_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "TBE-3");
        let t = TemplateSet::builtin();
        let base = c.digest("abc", &t).unwrap();
        assert_eq!(base, c.digest("abc", &t).unwrap());
        assert_ne!(base, c.digest("abd", &t).unwrap());
        let mut c2 = c.clone();
        c2.train.learning_rate = 0.03;
        assert_ne!(base, c2.digest("abc", &t).unwrap());
        let mut c3 = c.clone();
        c3.output_dir = dir.path().join("elsewhere");
        c3.parallelism = 1;
        assert_eq!(base, c3.digest("abc", &t).unwrap());
    }

    #[test]
    fn tbe1_trains_and_segments() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "TBE-1");
        let m = run_experiment(&c).unwrap();
        assert!(m.artifacts.contains_key("seed-7/history"));
        let seg = run_segmentation(&c.output_dir, &m.run_id, None).unwrap();
        let total: usize = seg.entries.iter().map(|e| e.count).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn failed_stance_call_aborts_with_flagged_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "TBE-3");
        let corpus = c.load_corpus().unwrap();
        let mock = MockBackend::echo("mock").with_responder(|req| {
            if req.system_text().contains("stance") && req.last_user().contains("moon") {
                Err(BackendError::Transport {
                    status: Some(503),
                    reason: "unavailable".into(),
                })
            } else {
                Ok("supporting".into())
            }
        });
        let pipeline = Pipeline::single(Arc::new(mock), BackendParams::new("mock-1"));
        let err = run_experiment_with(&c, &corpus, &pipeline, None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let id = fs::read_dir(&c.output_dir).unwrap().next().unwrap().unwrap().file_name();
        let m = load_manifest(&c.output_dir, id.to_str().unwrap()).unwrap();
        assert!(matches!(m.status, RunStatus::Failed { .. }));
        assert!(m.artifacts.contains_key("partitions"));
    }

    #[test]
    fn explanation_eval_identity_and_judge() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "IBE-4");
        let m = run_experiment(&c).unwrap();
        let path = m.artifact(&c.output_dir.join(&m.run_id), "justifications").unwrap();
        let pairs: Vec<(String, JustificationPair)> = read_keyed_jsonl(&path).unwrap();
        let gold_path = dir.path().join("gold.jsonl");
        let gold: String = pairs
            .iter()
            .map(|(_, p)| {
                serde_json::to_string(&GoldExplanation {
                    claim_id: p.claim_id.clone(),
                    explanation: p.explanation(),
                })
                .unwrap()
                    + "\n"
            })
            .collect();
        fs::write(&gold_path, gold).unwrap();
        let judge = StageBackend::new(
            Arc::new(MockBackend::constant(
                "judge",
                "Informativeness: 4\nLogicality: 4\nObjectivity: 4\nReadability: 4\nAccuracy: 4",
            )),
            BackendParams::new("judge-1"),
        );
        let embedder = MockEmbedder::new("emb", 64);
        let eval = run_explanation_eval(&c.output_dir, &m.run_id, &gold_path, Some(&embedder), Some(&judge)).unwrap();
        assert_eq!(eval.n, 3);
        assert_eq!((eval.scores.r1, eval.scores.r2, eval.scores.rl), (1.0, 1.0, 1.0));
        assert!((eval.scores.semantic.unwrap() - 1.0).abs() < 1e-12);
        let s = eval.subjective.unwrap();
        assert_eq!([s.informativeness, s.logicality, s.objectivity, s.readability, s.accuracy], [4.0; 5]);

        fs::write(&gold_path, "").unwrap();
        assert!(matches!(
            run_explanation_eval(&c.output_dir, &m.run_id, &gold_path, None, None),
            Err(RunnerError::AlignmentError(_))
        ));
    }

    #[test]
    fn ingest_summary() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = load_corpus_with_sidecar(&toy_corpus(dir.path())).unwrap();
        let s = ingest(&corpus);
        assert_eq!((s.records, s.train, s.val, s.test), (12, 6, 3, 3));
        assert_eq!(s.evidence_buckets.iter().map(|b| b.1).sum::<usize>(), 12);
    }
}
