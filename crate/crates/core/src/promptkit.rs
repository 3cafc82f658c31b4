//! Prompt templates and reply parsers.
//!
//! Template bodies use `{name}` placeholders. Each template carries a version
//! and a SHA-256 digest over `id`, `version`, system text and body, so a run
//! manifest can attribute results to exact prompt text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_label, sha256_hex, LabelScheme};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("missing placeholder {0:?}")]
    MissingPlaceholder(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {id}: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("unparsable verdict: {0:?}")]
    UnparsableVerdict(String),
    #[error("missing subjective dimension {0:?}")]
    MissingDimension(String),
    #[error("template store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "entailment")]
    Entailment,
    #[serde(rename = "consolidate-supporting")]
    ConsolidateSupporting,
    #[serde(rename = "consolidate-refuting")]
    ConsolidateRefuting,
    #[serde(rename = "understanding")]
    Understanding,
    #[serde(rename = "veracity-ibe1")]
    VeracityIbe1,
    #[serde(rename = "veracity-ibe2")]
    VeracityIbe2,
    #[serde(rename = "veracity-ibe3-cot")]
    VeracityIbe3Cot,
    #[serde(rename = "veracity-ibe4")]
    VeracityIbe4,
    #[serde(rename = "subjective-eval")]
    SubjectiveEval,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::Entailment,
        TemplateId::ConsolidateSupporting,
        TemplateId::ConsolidateRefuting,
        TemplateId::Understanding,
        TemplateId::VeracityIbe1,
        TemplateId::VeracityIbe2,
        TemplateId::VeracityIbe3Cot,
        TemplateId::VeracityIbe4,
        TemplateId::SubjectiveEval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Entailment => "entailment",
            TemplateId::ConsolidateSupporting => "consolidate-supporting",
            TemplateId::ConsolidateRefuting => "consolidate-refuting",
            TemplateId::Understanding => "understanding",
            TemplateId::VeracityIbe1 => "veracity-ibe1",
            TemplateId::VeracityIbe2 => "veracity-ibe2",
            TemplateId::VeracityIbe3Cot => "veracity-ibe3-cot",
            TemplateId::VeracityIbe4 => "veracity-ibe4",
            TemplateId::SubjectiveEval => "subjective-eval",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

/// A versioned prompt: a system instruction plus a user body with
/// `{placeholder}` slots. Optional sections are written `{?name}...{/name}`
/// and are dropped entirely when `name` is bound to an empty string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub version: u32,
    pub system: String,
    pub body: String,
    placeholders: BTreeSet<String>,
}

/// A rendered prompt, ready to become backend messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub system: String,
    pub user: String,
}

fn placeholder_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

fn section_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\{\?([a-z_]+)\}(.*?)\{/([a-z_]+)\}").unwrap())
}

impl PromptTemplate {
    pub fn new(id: TemplateId, version: u32, system: &str, body: &str) -> Result<Self, PromptError> {
        let mut placeholders = BTreeSet::new();
        for cap in section_re().captures_iter(body) {
            if cap[1] != cap[3] {
                return Err(PromptError::InvalidTemplate {
                    id: id.to_string(),
                    reason: format!("section {{?{}}} closed by {{/{}}}", &cap[1], &cap[3]),
                });
            }
            placeholders.insert(cap[1].to_string());
        }
        for cap in placeholder_re().captures_iter(body) {
            placeholders.insert(cap[1].to_string());
        }
        Ok(Self {
            id,
            version,
            system: system.to_string(),
            body: body.to_string(),
            placeholders,
        })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.placeholders.iter().map(String::as_str)
    }

    pub fn digest(&self) -> String {
        let canonical = serde_json::json!([self.id.as_str(), self.version, self.system, self.body]);
        sha256_hex(canonical.to_string().as_bytes())
    }

    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<RenderedPrompt, PromptError> {
        for name in &self.placeholders {
            if !bindings.contains_key(name.as_str()) {
                return Err(PromptError::MissingPlaceholder(name.clone()));
            }
        }
        let with_sections = section_re().replace_all(&self.body, |cap: &regex::Captures| {
            if bindings[&cap[1]].is_empty() {
                String::new()
            } else {
                cap[2].to_string()
            }
        });
        // Single pass so bound values containing braces are never re-expanded.
        let user = placeholder_re()
            .replace_all(&with_sections, |cap: &regex::Captures| bindings[&cap[1]].clone())
            .into_owned();
        Ok(RenderedPrompt {
            template: self.id,
            system: self.system.clone(),
            user,
        })
    }
}

const SYSTEM_STANCE: &str = "You are a careful fact-checking assistant. Task: evidence stance.";
const SYSTEM_CONSOLIDATE: &str = "You are a careful fact-checking assistant. Task: justification.";
const SYSTEM_UNDERSTANDING: &str = "You are a careful fact-checking assistant. Task: understanding.";
const SYSTEM_VERDICT: &str = "You are a careful fact-checking assistant. Task: veracity.";
const SYSTEM_JUDGE: &str = "You are an impartial judge of fact-checking explanations. Task: rating.";

fn builtin_bodies() -> Vec<(TemplateId, &'static str, &'static str)> {
    vec![
        (
            TemplateId::Entailment,
            SYSTEM_STANCE,
            "Decide whether the evidence sentence is supporting or refuting the claim.\n\
             Answer with one word: supporting or refuting.\n\n\
             Claim: {claim}\n\
             Evidence: {evidence}\n",
        ),
        (
            TemplateId::ConsolidateSupporting,
            SYSTEM_CONSOLIDATE,
            "Write a short justification arguing that the claim is true.\n\
             {?evidences}Base it only on these evidence sentences, which were judged to support the claim:\n{evidences}\n{/evidences}\
             {?no_evidence}No supporting evidence is available; rely on your own background knowledge.\n{/no_evidence}\n\
             Claim: {claim}\n",
        ),
        (
            TemplateId::ConsolidateRefuting,
            SYSTEM_CONSOLIDATE,
            "Write a short justification arguing that the claim is false.\n\
             {?evidences}Base it only on these evidence sentences, which were judged to refute the claim:\n{evidences}\n{/evidences}\
             {?no_evidence}No refuting evidence is available; rely on your own background knowledge.\n{/no_evidence}\n\
             Claim: {claim}\n",
        ),
        (
            TemplateId::Understanding,
            SYSTEM_UNDERSTANDING,
            "Explain in a short paragraph your understanding of the claim{?evidences} and the evidence sentences that accompany it{/evidences}.\n\n\
             Claim: {claim}\n\
             {?evidences}Evidence:\n{evidences}\n{/evidences}",
        ),
        (
            TemplateId::VeracityIbe1,
            SYSTEM_VERDICT,
            "Classify the veracity of the claim as one of: {labels}.\n\
             Answer with the label only.\n\n\
             Claim: {claim}\n\
             {?evidences}Evidence:\n{evidences}\n{/evidences}",
        ),
        (
            TemplateId::VeracityIbe2,
            SYSTEM_VERDICT,
            "Using the understanding below, classify the veracity of the claim as one of: {labels}.\n\
             Answer with the label only.\n\n\
             Claim: {claim}\n\
             Understanding: {understanding}\n",
        ),
        (
            TemplateId::VeracityIbe3Cot,
            SYSTEM_VERDICT,
            "Using the understanding below, classify the veracity of the claim as one of: {labels}.\n\
             Think step by step and write out your reasoning, then finish with a final line of the form\n\
             Verdict: <label>\n\n\
             Claim: {claim}\n\
             Understanding: {understanding}\n",
        ),
        (
            TemplateId::VeracityIbe4,
            SYSTEM_VERDICT,
            "Weigh the supporting and refuting justifications and classify the veracity of the claim as one of: {labels}.\n\
             Answer with the label only.\n\n\
             Claim: {claim}\n\
             Supporting justification: {supporting_justification}\n\
             Refuting justification: {refuting_justification}\n",
        ),
        (
            TemplateId::SubjectiveEval,
            SYSTEM_JUDGE,
            "Rate the explanation for the claim on a 1 (poor) to 5 (excellent) scale for each dimension.\n\
             Reply with exactly five lines:\n\
             Informativeness: <1-5>\nLogicality: <1-5>\nObjectivity: <1-5>\nReadability: <1-5>\nAccuracy: <1-5>\n\n\
             Claim: {claim}\n\
             Explanation: {explanation}\n",
        ),
    ]
}

/// The full set of templates used by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreEntry {
    id: TemplateId,
    version: u32,
    file: String,
    sha256: String,
}

const STORE_MANIFEST: &str = "templates.json";

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = builtin_bodies()
            .into_iter()
            .map(|(id, system, body)| {
                (id, PromptTemplate::new(id, 1, system, body).expect("built-in templates are valid"))
            })
            .collect();
        Self { templates }
    }

    pub fn get(&self, id: TemplateId) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id, template);
    }

    pub fn render(
        &self,
        id: TemplateId,
        bindings: &BTreeMap<&str, String>,
    ) -> Result<RenderedPrompt, PromptError> {
        self.get(id)?.render(bindings)
    }

    /// `template_id -> digest` for every template in the set.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .values()
            .map(|t| (t.id.to_string(), t.digest()))
            .collect()
    }

    /// Writes one text file per template plus `templates.json`, which lists
    /// `id -> (version, file, sha256 of the file bytes)`. Each file holds the
    /// system text, a line `---`, then the body.
    pub fn write_dir(&self, dir: &Path) -> Result<(), PromptError> {
        let io = |e: std::io::Error| PromptError::Store(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut entries = Vec::new();
        for t in self.templates.values() {
            let file = format!("{}.v{}.txt", t.id, t.version);
            let contents = format!("{}\n---\n{}", t.system, t.body);
            std::fs::write(dir.join(&file), &contents).map_err(io)?;
            entries.push(StoreEntry {
                id: t.id,
                version: t.version,
                file,
                sha256: sha256_hex(contents.as_bytes()),
            });
        }
        let manifest = serde_json::to_string_pretty(&entries).expect("entries serialize");
        std::fs::write(dir.join(STORE_MANIFEST), manifest + "\n").map_err(io)
    }

    /// Loads a template directory written by [`TemplateSet::write_dir`].
    /// Templates absent from the directory keep their built-in bodies.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let io = |e: std::io::Error| PromptError::Store(e.to_string());
        let manifest = std::fs::read_to_string(dir.join(STORE_MANIFEST)).map_err(io)?;
        let entries: Vec<StoreEntry> =
            serde_json::from_str(&manifest).map_err(|e| PromptError::Store(e.to_string()))?;
        let mut set = Self::builtin();
        for entry in entries {
            let contents = std::fs::read_to_string(dir.join(&entry.file)).map_err(io)?;
            if sha256_hex(contents.as_bytes()) != entry.sha256 {
                return Err(PromptError::Store(format!(
                    "{} does not match its recorded sha256",
                    entry.file
                )));
            }
            let (system, body) = contents.split_once("\n---\n").ok_or_else(|| {
                PromptError::InvalidTemplate {
                    id: entry.id.to_string(),
                    reason: "missing `---` separator".into(),
                }
            })?;
            set.insert(PromptTemplate::new(entry.id, entry.version, system, body)?);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Supporting,
    Refuting,
    Unknown,
}

const SUPPORT_WORDS: [&str; 5] = ["support", "supports", "supporting", "entails", "confirms"];
const REFUTE_WORDS: [&str; 5] = ["refute", "refutes", "refuting", "contradicts", "denies"];

/// Maps a free-text reply to a stance. Exactly one keyword family must occur;
/// anything else is [`Stance::Unknown`].
pub fn parse_stance(raw: &str) -> Stance {
    let lowered = raw.to_lowercase();
    let mut support = false;
    let mut refute = false;
    for word in lowered.split(|c: char| !c.is_alphanumeric()) {
        support |= SUPPORT_WORDS.contains(&word);
        refute |= REFUTE_WORDS.contains(&word);
    }
    match (support, refute) {
        (true, false) => Stance::Supporting,
        (false, true) => Stance::Refuting,
        _ => {
            log::debug!("stance reply not understood: {raw:?}");
            Stance::Unknown
        }
    }
}

fn is_boundary(c: Option<char>) -> bool {
    c.is_none_or(|c| !c.is_alphanumeric())
}

fn contains_label(haystack: &str, label: &str) -> bool {
    haystack.match_indices(label).any(|(at, _)| {
        is_boundary(haystack[..at].chars().next_back())
            && is_boundary(haystack[at + label.len()..].chars().next())
    })
}

/// Extracts a scheme label from a verdict reply.
///
/// Both the reply and the labels are normalized; labels are tried longest
/// first (ties in scheme order) and must appear on word boundaries, so
/// `mostly true` resolves to `mostly-true` rather than `true`. When the reply
/// carries a `Verdict:` line, only the text after the last one is searched.
pub fn parse_label(raw: &str, scheme: &LabelScheme) -> Result<String, PromptError> {
    let lowered = raw.to_lowercase();
    let tail = match lowered.rfind("verdict:") {
        Some(at) => &lowered[at + "verdict:".len()..],
        None => lowered.as_str(),
    };
    let normalized = normalize_label(tail);
    let mut ordered: Vec<&String> = scheme.labels().iter().collect();
    ordered.sort_by_key(|l| std::cmp::Reverse(l.len()));
    ordered
        .into_iter()
        .find(|label| contains_label(&normalized, label))
        .cloned()
        .ok_or_else(|| PromptError::UnparsableVerdict(raw.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Informativeness,
    Logicality,
    Objectivity,
    Readability,
    Accuracy,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::Informativeness,
        Dimension::Logicality,
        Dimension::Objectivity,
        Dimension::Readability,
        Dimension::Accuracy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Informativeness => "informativeness",
            Dimension::Logicality => "logicality",
            Dimension::Objectivity => "objectivity",
            Dimension::Readability => "readability",
            Dimension::Accuracy => "accuracy",
        }
    }
}

/// Five Likert ratings in `[1, 5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectiveScores {
    pub informativeness: f64,
    pub logicality: f64,
    pub objectivity: f64,
    pub readability: f64,
    pub accuracy: f64,
    /// Set when any parsed rating fell outside `[1, 5]` and was clamped.
    pub clamped: bool,
}

impl SubjectiveScores {
    pub fn uniform(value: f64) -> Self {
        Self {
            informativeness: value,
            logicality: value,
            objectivity: value,
            readability: value,
            accuracy: value,
            clamped: false,
        }
    }

    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Informativeness => self.informativeness,
            Dimension::Logicality => self.logicality,
            Dimension::Objectivity => self.objectivity,
            Dimension::Readability => self.readability,
            Dimension::Accuracy => self.accuracy,
        }
    }

    fn set(&mut self, dim: Dimension, value: f64) {
        match dim {
            Dimension::Informativeness => self.informativeness = value,
            Dimension::Logicality => self.logicality = value,
            Dimension::Objectivity => self.objectivity = value,
            Dimension::Readability => self.readability = value,
            Dimension::Accuracy => self.accuracy = value,
        }
    }
}

/// Reads `<dimension> <separator> <number>` for each of the five dimensions.
pub fn parse_subjective(raw: &str) -> Result<SubjectiveScores, PromptError> {
    let mut scores = SubjectiveScores::uniform(0.0);
    for dim in Dimension::ALL {
        let re = Regex::new(&format!(
            r"(?i)\b{}\b[^0-9\n]{{0,16}}?(-?[0-9]+(?:\.[0-9]+)?)",
            dim.as_str()
        ))
        .expect("static pattern");
        let value: f64 = re
            .captures(raw)
            .and_then(|c| c[1].parse().ok())
            .ok_or_else(|| PromptError::MissingDimension(dim.as_str().to_string()))?;
        let clamped = value.clamp(1.0, 5.0);
        if clamped != value {
            scores.clamped = true;
        }
        scores.set(dim, clamped);
    }
    Ok(scores)
}

/// Convenience for building binding maps.
pub fn bindings<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}
