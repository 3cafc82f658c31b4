//! Evaluation metrics.
//!
//! Overlap metrics (ROUGE, BLEU) tokenize by lowercasing and splitting on
//! whitespace, with no stemming. Macro averages run over every scheme label,
//! so labels absent from both golds and predictions contribute zero.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{embed, BackendError, Embedder};
use crate::corpus::{evidence_bucket, DatasetKind, LabelScheme};
use crate::promptkit::{Dimension, SubjectiveScores};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {0:?} is not in the scheme")]
    UnknownLabel(String),
    #[error("empty input")]
    EmptyInput,
    #[error("item {item} has {got} ratings, expected {expected}")]
    UnequalRaterCounts { item: usize, expected: usize, got: usize },
    #[error("chance agreement is 1; kappa undefined")]
    DegenerateAgreement,
    #[error("fewer than two units carry two or more ratings")]
    NoPairableValues,
    #[error("at least two raters and two items are required")]
    TooFewRatings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelMetrics>,
    pub mp: f64,
    pub mr: f64,
    pub mf1: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn label(&self, label: &str) -> Option<&LabelMetrics> {
        self.per_label.iter().find(|m| m.label == label)
    }

    pub fn accuracy_hint(&self) -> f64 {
        // micro recall equals accuracy for single-label classification
        let hits: f64 = self.per_label.iter().map(|m| m.recall * m.support as f64).sum();
        if self.n == 0 {
            0.0
        } else {
            hits / self.n as f64
        }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-label precision/recall/F1 and their unweighted macro means.
pub fn macro_prf<S: AsRef<str>>(
    golds: &[S],
    preds: &[S],
    scheme: &LabelScheme,
) -> Result<MetricsReport, MetricsError> {
    if golds.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(golds.len(), preds.len()));
    }
    if golds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let k = scheme.len();
    let index = |s: &str| scheme.index_of(s).ok_or_else(|| MetricsError::UnknownLabel(s.to_string()));
    let mut tp = vec![0usize; k];
    let mut pred_count = vec![0usize; k];
    let mut gold_count = vec![0usize; k];
    for (g, p) in golds.iter().zip(preds) {
        let (g, p) = (index(g.as_ref())?, index(p.as_ref())?);
        gold_count[g] += 1;
        pred_count[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    let per_label: Vec<LabelMetrics> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c] as f64, pred_count[c] as f64);
            let recall = ratio(tp[c] as f64, gold_count[c] as f64);
            LabelMetrics {
                label: scheme.labels()[c].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: gold_count[c],
            }
        })
        .collect();
    let mean = |f: fn(&LabelMetrics) -> f64| per_label.iter().map(f).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        mp: mean(|m| m.precision),
        mr: mean(|m| m.recall),
        mf1: mean(|m| m.f1),
        n: golds.len(),
        per_label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_counts(hits: f64, cand: f64, reference: f64) -> Self {
        let precision = ratio(hits, cand);
        let recall = ratio(hits, reference);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

pub fn overlap_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram overlap. Empty inputs score zero.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    let (c, r) = (overlap_tokens(candidate), overlap_tokens(reference));
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let total_c: usize = cc.values().sum();
    let total_r: usize = rc.values().sum();
    if total_c == 0 || total_r == 0 {
        return Prf::ZERO;
    }
    let hits: usize = cc
        .iter()
        .map(|(gram, &count)| count.min(rc.get(gram).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(hits as f64, total_c as f64, total_r as f64)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the longest common token subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let (c, r) = (overlap_tokens(candidate), overlap_tokens(reference));
    if c.is_empty() || r.is_empty() {
        return Prf::ZERO;
    }
    Prf::from_counts(lcs_len(&c, &r) as f64, c.len() as f64, r.len() as f64)
}

pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_N: usize = 4;

/// Clipped n-gram matches and total candidate n-grams.
pub fn modified_precision(candidate: &str, references: &[&str], n: usize) -> (usize, usize) {
    let c = overlap_tokens(candidate);
    let cc = ngram_counts(&c, n);
    let refs: Vec<Vec<String>> = references.iter().map(|r| overlap_tokens(r)).collect();
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in &refs {
        for (gram, count) in ngram_counts(r, n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(count);
        }
    }
    let clipped = cc
        .iter()
        .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    (clipped, cc.values().sum())
}

/// Sentence BLEU (n = 1..4, uniform weights). Zero clipped counts are
/// floored at `1e-9`; the brevity penalty uses the reference length closest
/// to the candidate length (shorter on ties).
pub fn bleu(candidate: &str, references: &[&str]) -> f64 {
    let c_len = overlap_tokens(candidate).len();
    if c_len == 0 || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_N {
        let (clipped, total) = modified_precision(candidate, references, n);
        let p = if clipped == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln() / BLEU_MAX_N as f64;
    }
    let r_len = references
        .iter()
        .map(|r| overlap_tokens(r).len())
        .min_by_key(|&len| (len.abs_diff(c_len), len))
        .expect("non-empty references");
    brevity_penalty(c_len, r_len) * log_sum.exp()
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len < reference_len {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    } else {
        1.0
    }
}

/// Cosine of the two unit-normalized sequence embeddings. This is a
/// sequence-level stand-in for BERTScore, not token-level greedy matching.
pub fn semantic_similarity(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
) -> Result<f64, BackendError> {
    let v = embed(embedder, &[candidate.to_string(), reference.to_string()])?;
    Ok(v[0].iter().zip(&v[1]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub bleu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<f64>,
}

impl ExplanationScores {
    /// Scores for one candidate/reference pair (ROUGE values are F1).
    pub fn score(candidate: &str, reference: &str) -> Self {
        Self {
            r1: rouge_n(candidate, reference, 1).f1,
            r2: rouge_n(candidate, reference, 2).f1,
            rl: rouge_l(candidate, reference).f1,
            bleu: bleu(candidate, &[reference]),
            semantic: None,
        }
    }

    /// Arithmetic mean over pairs; semantic is averaged only when every
    /// entry carries it.
    pub fn mean(all: &[ExplanationScores]) -> Result<Self, MetricsError> {
        if all.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        let n = all.len() as f64;
        let avg = |f: fn(&ExplanationScores) -> f64| all.iter().map(f).sum::<f64>() / n;
        let semantic = all
            .iter()
            .map(|s| s.semantic)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        Ok(Self {
            r1: avg(|s| s.r1),
            r2: avg(|s| s.r2),
            rl: avg(|s| s.rl),
            bleu: avg(|s| s.bleu),
            semantic,
        })
    }
}

/// Fleiss' kappa from an item x category count matrix. Every item must be
/// rated by the same number of raters (at least two).
pub fn fleiss_kappa(counts: &[Vec<usize>]) -> Result<f64, MetricsError> {
    let first = counts.first().ok_or(MetricsError::EmptyInput)?;
    let raters: usize = first.iter().sum();
    if raters < 2 {
        return Err(MetricsError::TooFewRatings);
    }
    let categories = first.len();
    let mut p_items = 0.0;
    let mut marginals = vec![0usize; categories];
    for (item, row) in counts.iter().enumerate() {
        let got: usize = row.iter().sum();
        if got != raters || row.len() != categories {
            return Err(MetricsError::UnequalRaterCounts {
                item,
                expected: raters,
                got,
            });
        }
        let agree: usize = row.iter().map(|&c| c * c).sum::<usize>() - raters;
        p_items += agree as f64 / (raters * (raters - 1)) as f64;
        row.iter().zip(&mut marginals).for_each(|(c, m)| *m += c);
    }
    let total = (counts.len() * raters) as f64;
    let p_bar = p_items / counts.len() as f64;
    let p_e: f64 = marginals.iter().map(|&m| (m as f64 / total).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(MetricsError::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaLevel {
    Nominal,
    #[default]
    Ordinal,
}

/// Krippendorff's alpha over an item x rater table with missing ratings.
///
/// Values pair only within an item; items with fewer than two ratings are
/// ignored. Ordinal distances use the rank-sum metric
/// `(sum_{g=c..k} n_g - (n_c + n_k) / 2)^2`.
pub fn kripp_alpha(ratings: &[Vec<Option<f64>>], level: AlphaLevel) -> Result<f64, MetricsError> {
    let units: Vec<Vec<f64>> = ratings
        .iter()
        .map(|row| row.iter().flatten().copied().collect::<Vec<f64>>())
        .filter(|v| v.len() >= 2)
        .collect();
    if units.len() < 2 {
        return Err(MetricsError::NoPairableValues);
    }
    let mut values: Vec<f64> = units.iter().flatten().copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("ratings are not NaN"));
    values.dedup();
    let k = values.len();
    let idx = |v: f64| values.iter().position(|&x| x == v).expect("value collected above");

    let mut coincidence = vec![vec![0.0f64; k]; k];
    for unit in &units {
        let m = unit.len() as f64;
        for (i, &a) in unit.iter().enumerate() {
            for (j, &b) in unit.iter().enumerate() {
                if i != j {
                    coincidence[idx(a)][idx(b)] += 1.0 / (m - 1.0);
                }
            }
        }
    }
    let marg: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marg.iter().sum();
    let delta = |c: usize, d: usize| -> f64 {
        match level {
            AlphaLevel::Nominal => (c != d) as u8 as f64,
            AlphaLevel::Ordinal => {
                let (lo, hi) = (c.min(d), c.max(d));
                let s: f64 = marg[lo..=hi].iter().sum::<f64>() - (marg[lo] + marg[hi]) / 2.0;
                s * s
            }
        }
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for d in 0..k {
            let dist = delta(c, d);
            observed += coincidence[c][d] * dist;
            expected += marg[c] * marg[d] * dist;
        }
    }
    if observed == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub fleiss_kappa: f64,
    pub kripp_alpha: f64,
    pub n_items: usize,
    pub n_raters: usize,
    pub level: AlphaLevel,
}

/// Both agreement statistics for a complete item x rater table of
/// categorical ratings (e.g. Likert 1..=5).
pub fn agreement_report(ratings: &[Vec<u32>], level: AlphaLevel) -> Result<AgreementReport, MetricsError> {
    let n_raters = ratings.first().map_or(0, Vec::len);
    if ratings.len() < 2 || n_raters < 2 {
        return Err(MetricsError::TooFewRatings);
    }
    let mut cats: Vec<u32> = ratings.iter().flatten().copied().collect();
    cats.sort_unstable();
    cats.dedup();
    let counts: Vec<Vec<usize>> = ratings
        .iter()
        .map(|row| cats.iter().map(|c| row.iter().filter(|&&r| r == *c).count()).collect())
        .collect();
    let alpha_table: Vec<Vec<Option<f64>>> = ratings
        .iter()
        .map(|row| row.iter().map(|&r| Some(r as f64)).collect())
        .collect();
    Ok(AgreementReport {
        fleiss_kappa: fleiss_kappa(&counts)?,
        kripp_alpha: kripp_alpha(&alpha_table, level)?,
        n_items: ratings.len(),
        n_raters,
        level,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub bucket: String,
    pub count: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub dataset_kind: DatasetKind,
    pub entries: Vec<SegmentEntry>,
    /// Buckets with no records, omitted from `entries`.
    pub empty_buckets: Vec<String>,
}

/// Macro metrics per evidence-count bucket, in bucket order.
pub fn segment_report<S: AsRef<str>>(
    preds: &[S],
    golds: &[S],
    evidence_counts: &[usize],
    dataset_kind: DatasetKind,
    scheme: &LabelScheme,
) -> Result<SegmentReport, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.len() != evidence_counts.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), evidence_counts.len()));
    }
    let buckets = dataset_kind.buckets();
    let mut groups: Vec<(Vec<&str>, Vec<&str>)> = vec![(Vec::new(), Vec::new()); buckets.len()];
    for ((p, g), &count) in preds.iter().zip(golds).zip(evidence_counts) {
        let b = evidence_bucket(count, dataset_kind).ordinal;
        groups[b].0.push(g.as_ref());
        groups[b].1.push(p.as_ref());
    }
    let mut entries = Vec::new();
    let mut empty_buckets = Vec::new();
    for (ordinal, (g, p)) in groups.into_iter().enumerate() {
        let id = buckets[ordinal].2.to_string();
        if g.is_empty() {
            empty_buckets.push(id);
            continue;
        }
        entries.push(SegmentEntry {
            bucket: id,
            count: g.len(),
            report: macro_prf(&g, &p, scheme)?,
        });
    }
    Ok(SegmentReport {
        dataset_kind,
        entries,
        empty_buckets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectiveMeans {
    pub informativeness: f64,
    pub logicality: f64,
    pub objectivity: f64,
    pub readability: f64,
    pub accuracy: f64,
    pub n: usize,
}

impl SubjectiveMeans {
    pub fn get(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Informativeness => self.informativeness,
            Dimension::Logicality => self.logicality,
            Dimension::Objectivity => self.objectivity,
            Dimension::Readability => self.readability,
            Dimension::Accuracy => self.accuracy,
        }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Per-dimension means, rounded to two decimals.
pub fn subjective_aggregate(scores: &[SubjectiveScores]) -> Result<SubjectiveMeans, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = scores.len() as f64;
    let mean = |dim| round2(scores.iter().map(|s| s.get(dim)).sum::<f64>() / n);
    Ok(SubjectiveMeans {
        informativeness: mean(Dimension::Informativeness),
        logicality: mean(Dimension::Logicality),
        objectivity: mean(Dimension::Objectivity),
        readability: mean(Dimension::Readability),
        accuracy: mean(Dimension::Accuracy),
        n: scores.len(),
    })
}

/// Aligned `name | MP | MR | MF1` table.
pub fn format_prf_table(title: &str, rows: &[(String, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(title.chars().count());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", title, "MP", "MR", "MF1");
    let _ = writeln!(out, "{}", "-".repeat(width + 24));
    for (name, r) in rows {
        let _ = writeln!(out, "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}", name, r.mp, r.mr, r.mf1);
    }
    out
}

/// Per-label breakdown of one report.
pub fn format_label_table(report: &MetricsReport) -> String {
    let width = report.per_label.iter().map(|m| m.label.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7}", "label", "P", "R", "F1", "support");
    for m in &report.per_label {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>7}",
            m.label, m.precision, m.recall, m.f1, m.support
        );
    }
    let _ = writeln!(out, "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>7}", "macro", report.mp, report.mr, report.mf1, report.n);
    out
}

pub fn format_segment_table(report: &SegmentReport) -> String {
    let rows: Vec<(String, &MetricsReport)> = report
        .entries
        .iter()
        .map(|e| (format!("{} (n={})", e.bucket, e.count), &e.report))
        .collect();
    let mut out = format_prf_table("No. Evid.", &rows);
    if !report.empty_buckets.is_empty() {
        let _ = writeln!(out, "empty buckets omitted: {}", report.empty_buckets.join(", "));
    }
    out
}

pub fn format_explanation_table(rows: &[(String, &ExplanationScores)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>8}", "run", "R1", "R2", "RL", "BLEU", "semantic");
    for (name, s) in rows {
        let sem = s.semantic.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}  {:>8}",
            name, s.r1, s.r2, s.rl, s.bleu, sem
        );
    }
    out
}

pub fn format_subjective_table(means: &SubjectiveMeans) -> String {
    let mut out = String::new();
    for dim in Dimension::ALL {
        let _ = writeln!(out, "{:<16}  {:.2}", dim.as_str(), means.get(dim));
    }
    let _ = writeln!(out, "{:<16}  {}", "n", means.n);
    out
}
