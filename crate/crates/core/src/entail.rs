//! Stance partitioning, justification consolidation, claim understanding and
//! the prompted veracity flows.
//!
//! Stage 1 asks the backend, once per evidence sentence, whether the
//! sentence supports or refutes the claim. Stage 2 turns each stance group
//! into one justification; an empty group is replaced by a justification
//! drawn from the model's own knowledge. Evidence whose stance could not be
//! read is left out of both justifications.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_with, Backend, BackendError, BackendParams, CompletionRequest, Message, ResponseCache};
use crate::corpus::{ClaimRecord, LabelScheme};
use crate::promptkit::{parse_label, parse_stance, PromptError, RenderedPrompt, Stance, TemplateId, TemplateSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntailError {
    #[error("claim {claim_id}: {source}")]
    Backend {
        claim_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("claim {claim_id}: empty completion for {template}")]
    EmptyCompletion { claim_id: String, template: TemplateId },
    #[error("partition for {partition} does not match record {record}")]
    PartitionMismatch { record: String, partition: String },
    #[error("{0} is not an inference mode")]
    NotInference(ExperimentMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentMode {
    #[serde(rename = "TBE-1")]
    Tbe1,
    #[serde(rename = "TBE-2")]
    Tbe2,
    #[serde(rename = "TBE-3")]
    Tbe3,
    #[serde(rename = "IBE-1")]
    Ibe1,
    #[serde(rename = "IBE-2")]
    Ibe2,
    #[serde(rename = "IBE-3")]
    Ibe3,
    #[serde(rename = "IBE-4")]
    Ibe4,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 7] = [
        ExperimentMode::Tbe1,
        ExperimentMode::Tbe2,
        ExperimentMode::Tbe3,
        ExperimentMode::Ibe1,
        ExperimentMode::Ibe2,
        ExperimentMode::Ibe3,
        ExperimentMode::Ibe4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentMode::Tbe1 => "TBE-1",
            ExperimentMode::Tbe2 => "TBE-2",
            ExperimentMode::Tbe3 => "TBE-3",
            ExperimentMode::Ibe1 => "IBE-1",
            ExperimentMode::Ibe2 => "IBE-2",
            ExperimentMode::Ibe3 => "IBE-3",
            ExperimentMode::Ibe4 => "IBE-4",
        }
    }

    pub fn is_training(self) -> bool {
        matches!(self, ExperimentMode::Tbe1 | ExperimentMode::Tbe2 | ExperimentMode::Tbe3)
    }
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_uppercase().replace('_', "-");
        ExperimentMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm || m.as_str().replace('-', "") == norm)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StancePartition {
    pub claim_id: String,
    pub supporting: Vec<usize>,
    pub refuting: Vec<usize>,
    pub unknown: Vec<usize>,
    pub raw_replies: BTreeMap<usize, String>,
    /// Backend failures; each failing index is also in `unknown`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<usize, String>,
}

impl StancePartition {
    pub fn empty(claim_id: &str) -> Self {
        Self {
            claim_id: claim_id.to_string(),
            supporting: Vec::new(),
            refuting: Vec::new(),
            unknown: Vec::new(),
            raw_replies: BTreeMap::new(),
            errors: BTreeMap::new(),
        }
    }

    /// True when the three groups are disjoint and together cover `0..n`.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.supporting.iter().chain(&self.refuting).chain(&self.unknown) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    pub fn stance_of(&self, index: usize) -> Option<Stance> {
        if self.supporting.contains(&index) {
            Some(Stance::Supporting)
        } else if self.refuting.contains(&index) {
            Some(Stance::Refuting)
        } else if self.unknown.contains(&index) {
            Some(Stance::Unknown)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JustificationSource {
    Consolidated,
    EmbeddedKnowledge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JustificationPair {
    pub claim_id: String,
    pub supporting_justification: String,
    pub refuting_justification: String,
    pub supporting_source: JustificationSource,
    pub refuting_source: JustificationSource,
    /// Template id -> digest of every template that produced this pair.
    pub prompt_versions: BTreeMap<String, String>,
}

impl JustificationPair {
    /// Supporting then refuting justification, newline separated.
    pub fn explanation(&self) -> String {
        format!("{}\n{}", self.supporting_justification, self.refuting_justification)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Understanding {
    pub claim_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub claim_id: String,
    pub predicted_label: String,
    pub gold_label: String,
    pub mode: ExperimentMode,
    pub parse_fallback_used: bool,
}

/// One backend plus the parameters used for every call routed to it.
#[derive(Clone)]
pub struct StageBackend {
    pub backend: Arc<dyn Backend>,
    pub params: BackendParams,
}

impl fmt::Debug for StageBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageBackend")
            .field("backend", &self.backend.id())
            .field("params", &self.params)
            .finish()
    }
}

impl StageBackend {
    pub fn new(backend: Arc<dyn Backend>, params: BackendParams) -> Self {
        Self { backend, params }
    }
}

/// Backends for each stage, the shared response cache and the templates.
///
/// Stance classification, generation (justifications and understandings)
/// and verdicts may use different backends.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub stance: StageBackend,
    pub generate: StageBackend,
    pub verdict: StageBackend,
    pub cache: Option<Arc<ResponseCache>>,
    pub templates: TemplateSet,
}

impl Pipeline {
    /// One backend for every stage, no cache, built-in templates.
    pub fn single(backend: Arc<dyn Backend>, params: BackendParams) -> Self {
        let stage = StageBackend::new(backend, params);
        Self {
            stance: stage.clone(),
            generate: stage.clone(),
            verdict: stage,
            cache: None,
            templates: TemplateSet::builtin(),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    fn request(stage: &StageBackend, prompt: &RenderedPrompt) -> CompletionRequest {
        CompletionRequest::new(
            vec![Message::system(prompt.system.clone()), Message::user(prompt.user.clone())],
            stage.params.clone(),
        )
    }

    fn call(&self, stage: &StageBackend, request: &CompletionRequest, claim_id: &str) -> Result<String, EntailError> {
        complete_with(stage.backend.as_ref(), request, self.cache.as_deref())
            .map(|c| c.text)
            .map_err(|source| EntailError::Backend {
                claim_id: claim_id.to_string(),
                source,
            })
    }

    fn generate_text(&self, prompt: &RenderedPrompt, claim_id: &str) -> Result<String, EntailError> {
        let text = self.call(&self.generate, &Self::request(&self.generate, prompt), claim_id)?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(EntailError::EmptyCompletion {
                claim_id: claim_id.to_string(),
                template: prompt.template,
            });
        }
        Ok(text)
    }
}

fn bullet_list<'a>(texts: impl IntoIterator<Item = &'a String>) -> String {
    texts
        .into_iter()
        .map(|t| format!("- {t}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Stage 1: one stance call per evidence sentence.
pub fn classify_evidence(record: &ClaimRecord, pipeline: &Pipeline) -> Result<StancePartition, EntailError> {
    let template = pipeline.templates.get(TemplateId::Entailment)?;
    let prompts = record
        .evidences
        .iter()
        .map(|e| {
            template.render(&crate::promptkit::bindings([
                ("claim", record.claim.clone()),
                ("evidence", e.clone()),
            ]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let replies: Vec<Result<String, EntailError>> = prompts
        .par_iter()
        .map(|p| {
            let req = Pipeline::request(&pipeline.stance, p);
            pipeline.call(&pipeline.stance, &req, &record.id)
        })
        .collect();

    let mut partition = StancePartition::empty(&record.id);
    for (i, reply) in replies.into_iter().enumerate() {
        match reply {
            Ok(text) => {
                match parse_stance(&text) {
                    Stance::Supporting => partition.supporting.push(i),
                    Stance::Refuting => partition.refuting.push(i),
                    Stance::Unknown => partition.unknown.push(i),
                }
                partition.raw_replies.insert(i, text);
            }
            Err(e) => {
                log::warn!("stance call failed for {} evidence {i}: {e}", record.id);
                partition.unknown.push(i);
                partition.errors.insert(i, e.to_string());
            }
        }
    }
    Ok(partition)
}

/// Stage 2: one justification per stance side. Unknown-stance evidence is
/// excluded from both prompts.
pub fn consolidate(
    record: &ClaimRecord,
    partition: &StancePartition,
    pipeline: &Pipeline,
) -> Result<JustificationPair, EntailError> {
    if partition.claim_id != record.id || !partition.is_exact_cover(record.evidences.len()) {
        return Err(EntailError::PartitionMismatch {
            record: record.id.clone(),
            partition: partition.claim_id.clone(),
        });
    }
    let side = |id: TemplateId, group: &[usize]| -> Result<(String, JustificationSource), EntailError> {
        let evidences = bullet_list(group.iter().map(|&i| &record.evidences[i]));
        let source = if group.is_empty() {
            JustificationSource::EmbeddedKnowledge
        } else {
            JustificationSource::Consolidated
        };
        let no_evidence = if group.is_empty() { "yes" } else { "" };
        let prompt = pipeline.templates.render(
            id,
            &crate::promptkit::bindings([
                ("claim", record.claim.clone()),
                ("evidences", evidences),
                ("no_evidence", no_evidence.to_string()),
            ]),
        )?;
        Ok((pipeline.generate_text(&prompt, &record.id)?, source))
    };
    let (supporting, refuting) = rayon::join(
        || side(TemplateId::ConsolidateSupporting, &partition.supporting),
        || side(TemplateId::ConsolidateRefuting, &partition.refuting),
    );
    let (supporting_justification, supporting_source) = supporting?;
    let (refuting_justification, refuting_source) = refuting?;
    let mut prompt_versions = BTreeMap::new();
    for id in [TemplateId::Entailment, TemplateId::ConsolidateSupporting, TemplateId::ConsolidateRefuting] {
        prompt_versions.insert(id.to_string(), pipeline.templates.get(id)?.digest());
    }
    Ok(JustificationPair {
        claim_id: record.id.clone(),
        supporting_justification,
        refuting_justification,
        supporting_source,
        refuting_source,
        prompt_versions,
    })
}

/// One call over the claim and all of its evidence (the claim alone when
/// there is none).
pub fn generate_understanding(record: &ClaimRecord, pipeline: &Pipeline) -> Result<Understanding, EntailError> {
    let prompt = pipeline.templates.render(
        TemplateId::Understanding,
        &crate::promptkit::bindings([
            ("claim", record.claim.clone()),
            ("evidences", bullet_list(&record.evidences)),
        ]),
    )?;
    Ok(Understanding {
        claim_id: record.id.clone(),
        text: pipeline.generate_text(&prompt, &record.id)?,
    })
}

/// Everything an inference run produced for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct IbeOutcome {
    pub prediction: PredictionRecord,
    pub understanding: Option<Understanding>,
    pub partition: Option<StancePartition>,
    pub justifications: Option<JustificationPair>,
    /// Backend reply to the (first) verdict prompt.
    pub verdict_reply: String,
}

/// Runs one prompted veracity flow.
///
/// IBE-1 prompts over the claim and raw evidence. IBE-2 first generates an
/// understanding, then asks for the verdict; IBE-3 does the same with a
/// step-by-step template. IBE-4 runs stance classification and
/// consolidation and asks for the verdict over the two justifications.
///
/// An unreadable verdict gets one repair prompt; if that also fails the
/// scheme's middle label is used and `parse_fallback_used` is set.
pub fn run_ibe(
    mode: ExperimentMode,
    record: &ClaimRecord,
    pipeline: &Pipeline,
    scheme: &LabelScheme,
) -> Result<IbeOutcome, EntailError> {
    let labels = scheme.labels().join(", ");
    let mut understanding = None;
    let mut partition = None;
    let mut justifications = None;
    let prompt = match mode {
        ExperimentMode::Ibe1 => pipeline.templates.render(
            TemplateId::VeracityIbe1,
            &crate::promptkit::bindings([
                ("claim", record.claim.clone()),
                ("evidences", bullet_list(&record.evidences)),
                ("labels", labels.clone()),
            ]),
        )?,
        ExperimentMode::Ibe2 | ExperimentMode::Ibe3 => {
            let u = generate_understanding(record, pipeline)?;
            let id = if mode == ExperimentMode::Ibe2 {
                TemplateId::VeracityIbe2
            } else {
                TemplateId::VeracityIbe3Cot
            };
            let p = pipeline.templates.render(
                id,
                &crate::promptkit::bindings([
                    ("claim", record.claim.clone()),
                    ("understanding", u.text.clone()),
                    ("labels", labels.clone()),
                ]),
            )?;
            understanding = Some(u);
            p
        }
        ExperimentMode::Ibe4 => {
            let part = classify_evidence(record, pipeline)?;
            let pair = consolidate(record, &part, pipeline)?;
            let p = pipeline.templates.render(
                TemplateId::VeracityIbe4,
                &crate::promptkit::bindings([
                    ("claim", record.claim.clone()),
                    ("supporting_justification", pair.supporting_justification.clone()),
                    ("refuting_justification", pair.refuting_justification.clone()),
                    ("labels", labels.clone()),
                ]),
            )?;
            partition = Some(part);
            justifications = Some(pair);
            p
        }
        other => return Err(EntailError::NotInference(other)),
    };

    let request = Pipeline::request(&pipeline.verdict, &prompt);
    let reply = pipeline.call(&pipeline.verdict, &request, &record.id)?;
    let (predicted_label, parse_fallback_used) = match parse_label(&reply, scheme) {
        Ok(label) => (label, false),
        Err(_) => {
            let mut repair = request.clone();
            repair.messages.push(Message::user(format!(
                "The previous answer could not be read: {:?}. Reply with exactly one of: {labels}.",
                reply.trim()
            )));
            let second = pipeline.call(&pipeline.verdict, &repair, &record.id)?;
            match parse_label(&second, scheme) {
                Ok(label) => (label, false),
                Err(_) => {
                    log::warn!("verdict for {} unreadable twice; using middle label", record.id);
                    (scheme.middle_label().to_string(), true)
                }
            }
        }
    };
    Ok(IbeOutcome {
        prediction: PredictionRecord {
            claim_id: record.id.clone(),
            predicted_label,
            gold_label: record.label.clone(),
            mode,
            parse_fallback_used,
        },
        understanding,
        partition,
        justifications,
        verdict_reply: reply,
    })
}
