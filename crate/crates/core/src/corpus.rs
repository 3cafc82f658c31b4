//! Claim/evidence corpora in the canonical one-record-per-line format.
//!
//! Each line of a corpus file is a JSON object:
//!
//! ```text
//! {"id": "c1", "claim": "...", "label": "half-true", "evidences": ["...", "..."], "split": "train"}
//! ```
//!
//! An optional `source_meta` object of string values is carried through
//! untouched. A sidecar file `<corpus>.scheme` may name the label scheme
//! (`liar-raw` or `raw-fc`); callers that pass a scheme explicitly ignore it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("record {index}: {reason}")]
    SchemaViolation { index: usize, reason: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("invalid label scheme: {0}")]
    InvalidScheme(String),
    #[error("failed to write {path}: {reason}")]
    WriteFailed { path: PathBuf, reason: String },
}

/// Canonical label form: lowercase, trimmed, internal runs of spaces and
/// underscores mapped to single hyphens.
pub fn normalize_label(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_sep = false;
    for ch in lowered.chars() {
        if ch == ' ' || ch == '_' || ch == '-' || ch.is_whitespace() {
            pending_sep = true;
            continue;
        }
        if pending_sep && !out.is_empty() {
            out.push('-');
        }
        pending_sep = false;
        out.push(ch);
    }
    out
}

/// An ordered, named set of veracity labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    name: String,
    labels: Vec<String>,
}

impl LabelScheme {
    pub fn new<S: Into<String>>(name: S, labels: Vec<String>) -> Result<Self, CorpusError> {
        if labels.is_empty() {
            return Err(CorpusError::InvalidScheme("no labels".into()));
        }
        let labels: Vec<String> = labels.iter().map(|l| normalize_label(l)).collect();
        let mut seen = HashSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(CorpusError::InvalidScheme("empty label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(CorpusError::InvalidScheme(format!("duplicate label {label}")));
            }
        }
        Ok(Self {
            name: name.into(),
            labels,
        })
    }

    /// Six-way LIAR-RAW scheme, least to most truthful.
    pub fn liar_raw() -> Self {
        Self {
            name: "liar-raw".into(),
            labels: ["pants-fire", "false", "barely-true", "half-true", "mostly-true", "true"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    /// Three-way RAW-FC scheme.
    pub fn raw_fc() -> Self {
        Self {
            name: "raw-fc".into(),
            labels: ["false", "half-true", "true"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match normalize_label(name).as_str() {
            "liar-raw" | "liar" => Some(Self::liar_raw()),
            "raw-fc" | "rawfc" => Some(Self::raw_fc()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Normalizes `raw` and resolves it to a scheme label.
    pub fn resolve(&self, raw: &str) -> Result<&str, CorpusError> {
        let norm = normalize_label(raw);
        self.labels
            .iter()
            .find(|l| **l == norm)
            .map(String::as_str)
            .ok_or_else(|| CorpusError::UnknownLabel(raw.to_string()))
    }

    /// The label at position `len / 2`; `half-true` for both built-in schemes.
    pub fn middle_label(&self) -> &str {
        &self.labels[self.labels.len() / 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub claim: String,
    pub label: String,
    #[serde(default)]
    pub evidences: Vec<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_meta: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: PathBuf,
    /// Hex SHA-256 of the raw file bytes.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub scheme: LabelScheme,
    pub records: Vec<ClaimRecord>,
    pub provenance: Provenance,
}

impl Corpus {
    /// Records of one split, in file order.
    pub fn split_view(&self, split: Split) -> Vec<&ClaimRecord> {
        split_view(self, split)
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for r in &self.records {
            sizes[r.split as usize] += 1;
        }
        sizes
    }

    pub fn get(&self, id: &str) -> Option<&ClaimRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn split_view(corpus: &Corpus, split: Split) -> Vec<&ClaimRecord> {
    corpus.records.iter().filter(|r| r.split == split).collect()
}

/// Loads a canonical corpus file, resolving every label against `scheme`.
pub fn load_corpus(path: &Path, scheme: &LabelScheme) -> Result<Corpus, CorpusError> {
    let bytes = std::fs::read(path).map_err(|e| CorpusError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let records = parse_records(&bytes, scheme)?;
    Ok(Corpus {
        scheme: scheme.clone(),
        records,
        provenance: Provenance {
            path: path.to_path_buf(),
            digest: sha256_hex(&bytes),
        },
    })
}

/// Loads a corpus whose scheme is named by the `<path>.scheme` sidecar.
pub fn load_corpus_with_sidecar(path: &Path) -> Result<Corpus, CorpusError> {
    let sidecar = sidecar_path(path);
    let name = std::fs::read_to_string(&sidecar).map_err(|e| CorpusError::UnreadableFile {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    let scheme = LabelScheme::by_name(name.trim())
        .ok_or_else(|| CorpusError::InvalidScheme(format!("unknown scheme {:?}", name.trim())))?;
    load_corpus(path, &scheme)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scheme");
    PathBuf::from(s)
}

fn parse_records(bytes: &[u8], scheme: &LabelScheme) -> Result<Vec<ClaimRecord>, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::SchemaViolation {
        index: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let index = records.len();
        let mut record: ClaimRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::SchemaViolation {
                index,
                reason: e.to_string(),
            })?;
        if record.id.trim().is_empty() {
            return Err(CorpusError::SchemaViolation {
                index,
                reason: "empty id".into(),
            });
        }
        if !ids.insert(record.id.clone()) {
            return Err(CorpusError::SchemaViolation {
                index,
                reason: format!("duplicate id {:?}", record.id),
            });
        }
        record.label = scheme.resolve(&record.label)?.to_string();
        records.push(record);
    }
    Ok(records)
}

/// Writes records in the canonical format, one JSON object per line.
pub fn write_records(path: &Path, records: &[ClaimRecord]) -> Result<(), CorpusError> {
    let fail = |e: std::io::Error| CorpusError::WriteFailed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(fail)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(out, "{line}").map_err(fail)?;
    }
    out.flush().map_err(fail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    LiarRaw,
    RawFc,
    Custom,
}

impl DatasetKind {
    pub fn for_scheme(scheme: &LabelScheme) -> Self {
        match scheme.name() {
            "liar-raw" => DatasetKind::LiarRaw,
            "raw-fc" => DatasetKind::RawFc,
            _ => DatasetKind::Custom,
        }
    }

    /// Buckets as inclusive `(lo, hi)` ranges; `hi = None` is unbounded.
    pub fn buckets(self) -> &'static [(usize, Option<usize>, &'static str)] {
        match self {
            DatasetKind::LiarRaw | DatasetKind::Custom => &[
                (0, Some(0), "0"),
                (1, Some(1), "1"),
                (2, Some(5), "2–5"),
                (6, Some(20), "6–20"),
                (21, Some(50), "21–50"),
                (51, None, ">50"),
            ],
            // 0–3 is a catch-all; the reported RAW-FC rows start at 4.
            DatasetKind::RawFc => &[
                (0, Some(3), "0–3"),
                (4, Some(5), "4–5"),
                (6, Some(10), "6–10"),
                (11, Some(20), "11–20"),
                (21, Some(50), "21–50"),
                (51, None, ">50"),
            ],
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_label(s).as_str() {
            "liar-raw" => Ok(DatasetKind::LiarRaw),
            "raw-fc" => Ok(DatasetKind::RawFc),
            "custom" => Ok(DatasetKind::Custom),
            other => Err(format!("unknown dataset kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceBucket {
    pub dataset_kind: DatasetKind,
    /// Position of the bucket in [`DatasetKind::buckets`].
    pub ordinal: usize,
}

impl EvidenceBucket {
    pub fn id(&self) -> &'static str {
        self.dataset_kind.buckets()[self.ordinal].2
    }
}

impl fmt::Display for EvidenceBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// The count-interval bucket holding `count` evidences.
pub fn evidence_bucket(count: usize, dataset_kind: DatasetKind) -> EvidenceBucket {
    let ordinal = dataset_kind
        .buckets()
        .iter()
        .position(|&(lo, hi, _)| count >= lo && hi.is_none_or(|hi| count <= hi))
        .expect("bucket table covers every count");
    EvidenceBucket {
        dataset_kind,
        ordinal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: &str, split: &str, n: usize) -> String {
        let ev: Vec<String> = (0..n).map(|i| format!("evidence {i} for {id}")).collect();
        serde_json::json!({"id": id, "claim": format!("claim {id}"), "label": label, "evidences": ev, "split": split})
            .to_string()
    }

    fn write(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_records_with_stable_digest() {
        let f = write(&[
            line("a", "true", "train", 2),
            line("b", "Half True", "train", 0),
            line("c", "FALSE", "test", 1),
        ]);
        let scheme = LabelScheme::raw_fc();
        let c1 = load_corpus(f.path(), &scheme).unwrap();
        let c2 = load_corpus(f.path(), &scheme).unwrap();
        assert_eq!(c1.records.len(), 3);
        assert_eq!(c1.provenance.digest, c2.provenance.digest);
        assert_eq!(c1.provenance.digest.len(), 64);
        assert_eq!(c1.records[1].label, "half-true");
        assert_eq!(
            c1.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
    }

    #[test]
    fn unknown_label_is_reported_verbatim() {
        let f = write(&[line("a", "tru", "train", 1)]);
        match load_corpus(f.path(), &LabelScheme::raw_fc()) {
            Err(CorpusError::UnknownLabel(l)) => assert_eq!(l, "tru"),
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn schema_violations_carry_record_index() {
        let f = write(&[
            line("a", "true", "train", 1),
            r#"{"id": "b", "claim": "x", "label": "true"}"#.to_string(),
        ]);
        match load_corpus(f.path(), &LabelScheme::raw_fc()) {
            Err(CorpusError::SchemaViolation { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
        let dup = write(&[line("a", "true", "train", 1), line("a", "true", "test", 1)]);
        assert!(matches!(
            load_corpus(dup.path(), &LabelScheme::raw_fc()),
            Err(CorpusError::SchemaViolation { index: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_unreadable() {
        let err = load_corpus(Path::new("/nonexistent/corpus.jsonl"), &LabelScheme::raw_fc());
        assert!(matches!(err, Err(CorpusError::UnreadableFile { .. })));
    }

    #[test]
    fn split_view_filters_in_order() {
        let f = write(&[
            line("a", "true", "train", 0),
            line("b", "true", "test", 0),
            line("c", "true", "train", 0),
        ]);
        let c = load_corpus(f.path(), &LabelScheme::raw_fc()).unwrap();
        let test: Vec<_> = c.split_view(Split::Test).iter().map(|r| r.id.clone()).collect();
        assert_eq!(test, ["b"]);
        let train: Vec<_> = c.split_view(Split::Train).iter().map(|r| r.id.clone()).collect();
        assert_eq!(train, ["a", "c"]);

        let empty = write(&[]);
        let c = load_corpus(empty.path(), &LabelScheme::raw_fc()).unwrap();
        assert!(c.split_view(Split::Test).is_empty());
    }

    #[test]
    fn sidecar_names_the_scheme() {
        let f = write(&[line("a", "pants fire", "train", 0)]);
        std::fs::write(sidecar_path(f.path()), "liar-raw\n").unwrap();
        let c = load_corpus_with_sidecar(f.path()).unwrap();
        assert_eq!(c.scheme, LabelScheme::liar_raw());
        assert_eq!(c.records[0].label, "pants-fire");
        std::fs::remove_file(sidecar_path(f.path())).unwrap();
    }

    #[test]
    fn label_normalization() {
        assert_eq!(normalize_label("Pants-fire"), "pants-fire");
        assert_eq!(normalize_label("pants_fire"), "pants-fire");
        assert_eq!(normalize_label("  Barely   True "), "barely-true");
        assert_eq!(normalize_label("half - true"), "half-true");
    }

    #[test]
    fn built_in_schemes() {
        assert_eq!(
            LabelScheme::liar_raw().labels(),
            ["pants-fire", "false", "barely-true", "half-true", "mostly-true", "true"]
        );
        assert_eq!(LabelScheme::raw_fc().labels(), ["false", "half-true", "true"]);
        assert_eq!(LabelScheme::liar_raw().middle_label(), "half-true");
        assert_eq!(LabelScheme::raw_fc().middle_label(), "half-true");
        assert!(LabelScheme::new("x", vec!["a".into(), "A".into()]).is_err());
        assert!(LabelScheme::new("x", vec![]).is_err());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(evidence_bucket(7, DatasetKind::LiarRaw).id(), "6–20");
        assert_eq!(evidence_bucket(0, DatasetKind::LiarRaw).id(), "0");
        assert_eq!(evidence_bucket(3, DatasetKind::RawFc).id(), "0–3");
        assert_eq!(evidence_bucket(51, DatasetKind::RawFc).id(), ">50");
        assert_eq!(evidence_bucket(50, DatasetKind::RawFc).id(), "21–50");
    }

    #[test]
    fn buckets_partition_counts() {
        for kind in [DatasetKind::LiarRaw, DatasetKind::RawFc, DatasetKind::Custom] {
            for count in 0..=10_000usize {
                let hits = kind
                    .buckets()
                    .iter()
                    .filter(|&&(lo, hi, _)| count >= lo && hi.is_none_or(|hi| count <= hi))
                    .count();
                assert_eq!(hits, 1, "count {count} in {kind:?}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[ A-Za-z_\\-]{0,24}") {
            let once = normalize_label(&s);
            proptest::prop_assert_eq!(normalize_label(&once), once);
        }
    }
}
