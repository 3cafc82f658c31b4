//! Veracity prediction over hashed text features.
//!
//! The native predictor is multinomial logistic regression trained by
//! mini-batch gradient descent on softmax cross-entropy with an L2 penalty.
//! Inputs are built from a claim plus whatever the experiment mode supplies
//! (raw evidence, a generated understanding, or the two justifications).
//!
//! Feature hashing is platform independent: tokens are lowercase runs of
//! alphanumeric characters, unigrams are hashed as `u:<tok>` and bigrams as
//! `b:<tok1> <tok2>` with 64-bit FNV-1a. The low bits (masked by `D - 1`)
//! pick the bucket and the top bit picks the sign. Bucket values are signed
//! counts divided by `sqrt(token count)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sha256_hex, ClaimRecord, LabelScheme};
use crate::entail::{ExperimentMode, JustificationPair};
use crate::metrics::macro_prf;

pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;

/// Learning-rate grid used for fine-tuned encoder predictors; passed through
/// untouched to external predictors.
pub const ENCODER_LEARNING_RATE_GRID: [f64; 3] = [2e-6, 2e-5, 1e-5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerdictError {
    #[error("mode {0} requires materials that were not supplied")]
    MaterialMissing(ExperimentMode),
    #[error("ablation {ablation} only applies to TBE-3, not {mode}")]
    AblationNotApplicable {
        mode: ExperimentMode,
        ablation: AblationMode,
    },
    #[error("mode {0} is inference-only and has no trained input")]
    NotTrainable(ExperimentMode),
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("feature dimension mismatch: model {model}, features {features}")]
    DimensionMismatch { model: usize, features: usize },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("external predictor: {0}")]
    External(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "wo-supporting")]
    WoSupporting,
    #[serde(rename = "wo-refuting")]
    WoRefuting,
    #[serde(rename = "wo-both")]
    WoBoth,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::WoSupporting,
        AblationMode::WoRefuting,
        AblationMode::WoBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::WoSupporting => "wo-supporting",
            AblationMode::WoRefuting => "wo-refuting",
            AblationMode::WoBoth => "wo-both",
        }
    }

    pub fn keeps_supporting(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::WoRefuting)
    }

    pub fn keeps_refuting(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::WoSupporting)
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

/// Generated materials available for one record.
#[derive(Debug, Clone, Copy, Default)]
pub struct Materials<'a> {
    pub understanding: Option<&'a str>,
    pub justifications: Option<&'a JustificationPair>,
}

pub const CLAIM_MARK: &str = "[CLAIM]";
pub const EVIDENCE_MARK: &str = "[EVIDENCE]";
pub const UNDERSTANDING_MARK: &str = "[UNDERSTANDING]";
pub const SUPPORTING_MARK: &str = "[SUPPORTING]";
pub const REFUTING_MARK: &str = "[REFUTING]";

/// Builds the predictor input text. Sections are newline separated and each
/// starts with a bracketed marker; the claim section always comes first.
pub fn build_input(
    record: &ClaimRecord,
    materials: &Materials<'_>,
    mode: ExperimentMode,
    ablation: AblationMode,
) -> Result<String, VerdictError> {
    if ablation != AblationMode::Full && mode != ExperimentMode::Tbe3 {
        return Err(VerdictError::AblationNotApplicable { mode, ablation });
    }
    let mut out = format!("{CLAIM_MARK} {}", record.claim);
    match mode {
        ExperimentMode::Tbe1 => {
            for evidence in &record.evidences {
                out.push_str(&format!("\n{EVIDENCE_MARK} {evidence}"));
            }
        }
        ExperimentMode::Tbe2 => {
            let understanding = materials
                .understanding
                .ok_or(VerdictError::MaterialMissing(mode))?;
            out.push_str(&format!("\n{UNDERSTANDING_MARK} {understanding}"));
        }
        ExperimentMode::Tbe3 => {
            let pair = materials
                .justifications
                .ok_or(VerdictError::MaterialMissing(mode))?;
            if ablation.keeps_supporting() {
                out.push_str(&format!("\n{SUPPORTING_MARK} {}", pair.supporting_justification));
            }
            if ablation.keeps_refuting() {
                out.push_str(&format!("\n{REFUTING_MARK} {}", pair.refuting_justification));
            }
        }
        other => return Err(VerdictError::NotTrainable(other)),
    }
    Ok(out)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sparse hashed features. `indices` are strictly increasing and `< dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
    pub dim: usize,
}

impl FeatureVector {
    pub fn empty(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Digest identifying the featurization; stored in every model.
pub fn feature_spec_digest(dim: usize) -> String {
    sha256_hex(format!("fnv1a64|lowercase-alnum|u:+b:|signed|count/sqrt(len)|D={dim}").as_bytes())
}

/// Hashes unigrams and bigrams of `input` into `dim` signed buckets.
///
/// # Panics
///
/// If `dim` is not a power of two or exceeds `u32::MAX + 1`.
pub fn featurize(input: &str, dim: usize) -> FeatureVector {
    assert!(dim.is_power_of_two() && dim <= 1 << 32, "feature dim must be a power of two");
    let tokens = tokenize(input);
    if tokens.is_empty() {
        return FeatureVector::empty(dim);
    }
    let mask = (dim - 1) as u64;
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    let mut add = |key: String| {
        let h = fnv1a64(key.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        *acc.entry((h & mask) as u32).or_insert(0.0) += sign;
    };
    for t in &tokens {
        add(format!("u:{t}"));
    }
    for pair in tokens.windows(2) {
        add(format!("b:{} {}", pair[0], pair[1]));
    }
    let scale = 1.0 / (tokens.len() as f64).sqrt();
    let (indices, values) = acc
        .into_iter()
        .filter(|&(_, v)| v != 0.0)
        .map(|(i, v)| (i, v * scale))
        .unzip();
    FeatureVector {
        indices,
        values,
        dim,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "TrainConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_patience")]
    pub patience: usize,
    #[serde(default = "TrainConfig::default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_l2")]
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: Self::default_learning_rate(),
            batch_size: Self::default_batch_size(),
            patience: Self::default_patience(),
            max_epochs: Self::default_max_epochs(),
            seed: 0,
            l2: Self::default_l2(),
        }
    }
}

impl TrainConfig {
    fn default_learning_rate() -> f64 {
        2e-2
    }
    fn default_batch_size() -> usize {
        16
    }
    fn default_patience() -> usize {
        2
    }
    fn default_max_epochs() -> usize {
        30
    }
    fn default_l2() -> f64 {
        1e-5
    }

    pub fn validate(&self) -> Result<(), VerdictError> {
        let bad = |m: &str| Err(VerdictError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2 > 0.0 && self.l2.is_finite()) {
            return bad("l2 must be positive");
        }
        if self.batch_size != 8 && self.batch_size != 16 {
            return bad("batch_size must be 8 or 16");
        }
        if self.patience != 2 && self.patience != 3 {
            return bad("patience must be 2 or 3");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        Ok(())
    }
}

/// Trained softmax-regression parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VeracityModel {
    pub dim: usize,
    pub scheme: LabelScheme,
    /// Row-major `[num_labels x dim]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_spec_digest: String,
    pub train_manifest_digest: String,
}

impl VeracityModel {
    pub fn zeros(scheme: &LabelScheme, dim: usize) -> Self {
        Self {
            dim,
            scheme: scheme.clone(),
            weights: vec![0.0; scheme.len() * dim],
            bias: vec![0.0; scheme.len()],
            feature_spec_digest: feature_spec_digest(dim),
            train_manifest_digest: String::new(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }

    pub fn logits(&self, x: &FeatureVector) -> Vec<f64> {
        (0..self.num_labels())
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + x.iter().map(|(j, v)| row[j] * v).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &FeatureVector) -> Vec<f64> {
        softmax(&self.logits(x))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and class probabilities.
pub fn predict(model: &VeracityModel, features: &FeatureVector) -> (String, Vec<f64>) {
    let probs = model.probabilities(features);
    let label = model.scheme.labels()[argmax(&probs)].clone();
    (label, probs)
}

/// A labelled training example; `label` indexes the model's scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureVector,
    pub label: usize,
}

/// Mean cross-entropy over `batch` plus `l2 / 2 * ||W||^2` (bias unpenalized).
pub fn objective(model: &VeracityModel, batch: &[Example], l2: f64) -> f64 {
    let data: f64 = batch
        .iter()
        .map(|ex| {
            let logits = model.logits(&ex.features);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - logits[ex.label]
        })
        .sum::<f64>()
        / batch.len() as f64;
    let penalty = 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    data + penalty
}

/// Adds the data-term gradient of the mean cross-entropy over `batch` into
/// `grad_w` (sparse, row-major) and `grad_b`, returning the batch data loss.
fn accumulate_data_gradient(
    model: &VeracityModel,
    batch: &[Example],
    grad_w: &mut BTreeMap<(usize, usize), f64>,
    grad_b: &mut [f64],
) -> f64 {
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        let probs = model.probabilities(&ex.features);
        loss -= probs[ex.label].max(f64::MIN_POSITIVE).ln() * inv;
        for (c, &p) in probs.iter().enumerate() {
            let delta = (p - if c == ex.label { 1.0 } else { 0.0 }) * inv;
            grad_b[c] += delta;
            for (j, v) in ex.features.iter() {
                *grad_w.entry((c, j)).or_insert(0.0) += delta * v;
            }
        }
    }
    loss
}

/// Dense gradient of [`objective`]: `(dW row-major, db)`.
pub fn objective_gradient(model: &VeracityModel, batch: &[Example], l2: f64) -> (Vec<f64>, Vec<f64>) {
    let mut sparse = BTreeMap::new();
    let mut grad_b = vec![0.0; model.num_labels()];
    accumulate_data_gradient(model, batch, &mut sparse, &mut grad_b);
    let mut grad_w: Vec<f64> = model.weights.iter().map(|w| l2 * w).collect();
    for ((c, j), g) in sparse {
        grad_w[c * model.dim + j] += g;
    }
    (grad_w, grad_b)
}

/// One gradient-descent step on `batch`. Returns the batch data loss
/// measured before the step.
pub fn gradient_step(model: &mut VeracityModel, batch: &[Example], learning_rate: f64, l2: f64) -> f64 {
    let mut sparse = BTreeMap::new();
    let mut grad_b = vec![0.0; model.num_labels()];
    let loss = accumulate_data_gradient(model, batch, &mut sparse, &mut grad_b);
    // w -= lr * (l2 * w + g_data): the penalty is a uniform shrink.
    let shrink = 1.0 - learning_rate * l2;
    model.weights.iter_mut().for_each(|w| *w *= shrink);
    for ((c, j), g) in sparse {
        model.weights[c * model.dim + j] -= learning_rate * g;
    }
    for (b, g) in model.bias.iter_mut().zip(grad_b) {
        *b -= learning_rate * g;
    }
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VeracityModel,
    pub history: Vec<EpochStats>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
}

/// Trains a model with early stopping on validation macro-F1.
///
/// Shuffling is driven by ChaCha8 seeded from `config.seed`, so identical
/// inputs give bit-identical weights.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    scheme: &LabelScheme,
) -> Result<TrainOutcome, VerdictError> {
    config.validate()?;
    let dim = train_set
        .first()
        .map(|e| e.features.dim)
        .ok_or_else(|| VerdictError::DegenerateData("empty training set".into()))?;
    if val_set.is_empty() {
        return Err(VerdictError::DegenerateData("empty validation set".into()));
    }
    for ex in train_set.iter().chain(val_set) {
        if ex.features.dim != dim {
            return Err(VerdictError::DimensionMismatch {
                model: dim,
                features: ex.features.dim,
            });
        }
        if ex.label >= scheme.len() {
            return Err(VerdictError::DegenerateData(format!("label index {} out of range", ex.label)));
        }
    }
    let mut present = vec![false; scheme.len()];
    train_set.iter().for_each(|e| present[e.label] = true);
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(VerdictError::DegenerateData(format!(
            "label {:?} has no training example",
            scheme.labels()[missing]
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VeracityModel::zeros(scheme, dim);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val_gold: Vec<&str> = val_set.iter().map(|e| scheme.labels()[e.label].as_str()).collect();

    let mut best: Option<(f64, usize, VeracityModel)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut batch = Vec::with_capacity(config.batch_size);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            loss_sum += gradient_step(&mut model, &batch, config.learning_rate, config.l2);
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        if !train_loss.is_finite() || !model.is_finite() {
            return Err(VerdictError::NonFiniteLoss { epoch });
        }
        let val_pred: Vec<&str> = val_set
            .iter()
            .map(|e| scheme.labels()[argmax(&model.probabilities(&e.features))].as_str())
            .collect();
        let val_macro_f1 = macro_prf(&val_gold, &val_pred, scheme)
            .expect("validation labels come from the scheme")
            .mf1;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_macro_f1,
        });
        log::debug!("epoch {epoch}: loss {train_loss:.5} val MF1 {val_macro_f1:.4}");
        match &best {
            Some((score, _, _)) if val_macro_f1 <= *score => {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((val_macro_f1, epoch, model.clone()));
                stale = 0;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"FCVM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    dim: usize,
    num_labels: usize,
    scheme: LabelScheme,
    feature_spec_digest: String,
    train_manifest_digest: String,
}

/// Writes a model file:
///
/// ```text
/// bytes 0..4    magic "FCVM"
/// u32 LE        format version (1)
/// u32 LE        header length H
/// H bytes       JSON header {dim, num_labels, scheme, feature_spec_digest, train_manifest_digest}
/// f64 LE * L    bias
/// f64 LE * L*D  weights, row-major by label
/// ```
pub fn save_model(model: &VeracityModel, path: &Path) -> Result<(), VerdictError> {
    let header = serde_json::to_vec(&ModelHeader {
        dim: model.dim,
        num_labels: model.num_labels(),
        scheme: model.scheme.clone(),
        feature_spec_digest: model.feature_spec_digest.clone(),
        train_manifest_digest: model.train_manifest_digest.clone(),
    })
    .expect("header serializes");
    let mut buf = Vec::with_capacity(12 + header.len() + 8 * (model.bias.len() + model.weights.len()));
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for x in model.bias.iter().chain(&model.weights) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| VerdictError::ModelFile(e.to_string()))?;
    f.write_all(&buf).map_err(|e| VerdictError::ModelFile(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<VeracityModel, VerdictError> {
    let err = |m: String| VerdictError::ModelFile(m);
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(e.to_string()))?;
    if bytes.len() < 12 || &bytes[..4] != MODEL_MAGIC {
        return Err(err("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(err(format!("unsupported model version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: ModelHeader = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| err("truncated header".into()))?)
        .map_err(|e| err(e.to_string()))?;
    let body = &bytes[12 + hlen..];
    let expected = 8 * header.num_labels * (header.dim + 1);
    if body.len() != expected || header.num_labels != header.scheme.len() {
        return Err(err(format!("body has {} bytes, expected {expected}", body.len())));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (bias, weights) = floats.split_at(header.num_labels);
    let model = VeracityModel {
        dim: header.dim,
        scheme: header.scheme,
        weights: weights.to_vec(),
        bias: bias.to_vec(),
        feature_spec_digest: header.feature_spec_digest,
        train_manifest_digest: header.train_manifest_digest,
    };
    if !model.is_finite() {
        return Err(err("non-finite parameters".into()));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorInput {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorOutput {
    pub id: String,
    pub label: String,
}

/// Delegates training and prediction to an outside program.
///
/// The predictor directory receives `train.jsonl`, `val.jsonl` (each line
/// `{id, text, label}`), `test.jsonl` (`{id, text}`) and `config.json`
/// (labels, seed, learning-rate grid, batch size, patience, max epochs). The
/// command runs with the directory as its last argument and must write
/// `predictions.jsonl` with one `{id, label}` per test input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPredictor {
    pub command: Vec<String>,
    #[serde(default = "default_grid")]
    pub learning_rate_grid: Vec<f64>,
}

fn default_grid() -> Vec<f64> {
    ENCODER_LEARNING_RATE_GRID.to_vec()
}

impl ExternalPredictor {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            learning_rate_grid: default_grid(),
        }
    }

    pub fn run(
        &self,
        dir: &Path,
        train_set: &[PredictorInput],
        val_set: &[PredictorInput],
        test_set: &[PredictorInput],
        config: &TrainConfig,
        scheme: &LabelScheme,
    ) -> Result<Vec<String>, VerdictError> {
        let ext = |m: String| VerdictError::External(m);
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| ext("empty command".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| ext(e.to_string()))?;
        write_jsonl(&dir.join("train.jsonl"), train_set)?;
        write_jsonl(&dir.join("val.jsonl"), val_set)?;
        let unlabeled: Vec<PredictorInput> = test_set
            .iter()
            .map(|p| PredictorInput {
                label: None,
                ..p.clone()
            })
            .collect();
        write_jsonl(&dir.join("test.jsonl"), &unlabeled)?;
        let cfg = serde_json::json!({
            "labels": scheme.labels(),
            "seed": config.seed,
            "learning_rate_grid": self.learning_rate_grid,
            "batch_size": config.batch_size,
            "patience": config.patience,
            "max_epochs": config.max_epochs,
        });
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap())
            .map_err(|e| ext(e.to_string()))?;
        let status = Command::new(program)
            .args(args)
            .arg(dir)
            .status()
            .map_err(|e| ext(format!("cannot run {program}: {e}")))?;
        if !status.success() {
            return Err(ext(format!("{program} exited with {status}")));
        }
        let text = std::fs::read_to_string(dir.join("predictions.jsonl"))
            .map_err(|e| ext(format!("predictions.jsonl: {e}")))?;
        let mut by_id = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let out: PredictorOutput = serde_json::from_str(line).map_err(|e| ext(e.to_string()))?;
            let label = scheme
                .resolve(&out.label)
                .map_err(|e| ext(e.to_string()))?
                .to_string();
            by_id.insert(out.id, label);
        }
        test_set
            .iter()
            .map(|p| {
                by_id
                    .get(&p.id)
                    .cloned()
                    .ok_or_else(|| ext(format!("no prediction for {}", p.id)))
            })
            .collect()
    }
}

fn write_jsonl<T: Serialize>(path: &PathBuf, rows: &[T]) -> Result<(), VerdictError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| VerdictError::External(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::entail::JustificationSource;
    use rand::Rng;

    fn record(evidences: &[&str]) -> ClaimRecord {
        ClaimRecord {
            id: "c1".into(),
            claim: "The bridge opened in 1999".into(),
            label: "true".into(),
            evidences: evidences.iter().map(|s| s.to_string()).collect(),
            split: Split::Train,
            source_meta: None,
        }
    }

    fn pair() -> JustificationPair {
        JustificationPair {
            claim_id: "c1".into(),
            supporting_justification: "records show a 1999 ribbon cutting".into(),
            refuting_justification: "construction ran until 2001".into(),
            supporting_source: JustificationSource::Consolidated,
            refuting_source: JustificationSource::Consolidated,
            prompt_versions: BTreeMap::new(),
        }
    }

    #[test]
    fn tbe3_ablations() {
        let r = record(&[]);
        let p = pair();
        let m = Materials {
            justifications: Some(&p),
            ..Default::default()
        };
        let both = build_input(&r, &m, ExperimentMode::Tbe3, AblationMode::WoBoth).unwrap();
        assert!(both.contains(&r.claim));
        assert!(!both.contains(&p.supporting_justification));
        assert!(!both.contains(&p.refuting_justification));

        let wo_sup = build_input(&r, &m, ExperimentMode::Tbe3, AblationMode::WoSupporting).unwrap();
        assert!(wo_sup.contains(&p.refuting_justification));
        assert!(!wo_sup.contains(&p.supporting_justification));

        let full = build_input(&r, &m, ExperimentMode::Tbe3, AblationMode::Full).unwrap();
        assert!(full.starts_with(&both));
        assert_eq!(both, format!("{CLAIM_MARK} {}", r.claim));
    }

    #[test]
    fn tbe1_without_evidence_is_claim_only() {
        let r = record(&[]);
        let out = build_input(&r, &Materials::default(), ExperimentMode::Tbe1, AblationMode::Full).unwrap();
        assert_eq!(out, format!("{CLAIM_MARK} {}", r.claim));
        let r = record(&["e one", "e two"]);
        let out = build_input(&r, &Materials::default(), ExperimentMode::Tbe1, AblationMode::Full).unwrap();
        assert!(out.contains("e one") && out.contains("e two"));
    }

    #[test]
    fn missing_materials_and_bad_ablation() {
        let r = record(&[]);
        assert_eq!(
            build_input(&r, &Materials::default(), ExperimentMode::Tbe3, AblationMode::Full),
            Err(VerdictError::MaterialMissing(ExperimentMode::Tbe3))
        );
        assert_eq!(
            build_input(&r, &Materials::default(), ExperimentMode::Tbe2, AblationMode::Full),
            Err(VerdictError::MaterialMissing(ExperimentMode::Tbe2))
        );
        assert!(matches!(
            build_input(&r, &Materials::default(), ExperimentMode::Tbe1, AblationMode::WoBoth),
            Err(VerdictError::AblationNotApplicable { .. })
        ));
        let u = Materials {
            understanding: Some("it is about a bridge"),
            ..Default::default()
        };
        assert!(build_input(&r, &u, ExperimentMode::Tbe2, AblationMode::Full)
            .unwrap()
            .contains("it is about a bridge"));
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn featurize_basics() {
        assert_eq!(featurize("", 64), FeatureVector::empty(64));
        assert_eq!(featurize("  ,. ", 64).nnz(), 0);
        let a = featurize("The cat sat", 1 << 10);
        assert_eq!(a, featurize("the CAT sat", 1 << 10));
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(a.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn word_order_changes_features() {
        // Oracle: compute the bigram bucket directly and check it is present
        // in one vector and absent (or different) in the other.
        let dim = 1 << 18;
        let ab = featurize("a b", dim);
        let ba = featurize("b a", dim);
        assert_ne!(ab, ba);
        let bucket = (fnv1a64(b"b:a b") & (dim as u64 - 1)) as u32;
        let in_ab = ab.indices.binary_search(&bucket).is_ok();
        let other = (fnv1a64(b"b:b a") & (dim as u64 - 1)) as u32;
        assert!(in_ab);
        assert!(ba.indices.binary_search(&other).is_ok());
        assert_ne!(bucket, other);
    }

    #[test]
    fn feature_scaling() {
        let dim = 1 << 20;
        let f = featurize("alpha beta gamma delta", dim);
        // 4 unigrams + 3 bigrams, all distinct buckets at this dim.
        assert_eq!(f.nnz(), 7);
        for v in &f.values {
            assert!((v.abs() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_vector_gives_softmax_of_bias() {
        let scheme = LabelScheme::raw_fc();
        let mut model = VeracityModel::zeros(&scheme, 16);
        model.bias = vec![0.5, -1.0, 2.0];
        let (label, probs) = predict(&model, &FeatureVector::empty(16));
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|b| b.exp()).sum();
        for (p, b) in probs.iter().zip([0.5f64, -1.0, 2.0]) {
            assert!((p - b.exp() / z).abs() < 1e-15);
        }
        assert_eq!(label, "true");
    }

    #[test]
    fn ties_go_to_lower_index() {
        let scheme = LabelScheme::raw_fc();
        let mut model = VeracityModel::zeros(&scheme, 16);
        model.bias = vec![0.0, 1.0, 1.0];
        assert_eq!(predict(&model, &FeatureVector::empty(16)).0, "half-true");
        model.bias = vec![0.0; 3];
        assert_eq!(predict(&model, &FeatureVector::empty(16)).0, "false");
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let scheme = LabelScheme::raw_fc();
        let ex = |label| Example {
            features: featurize("x", 64),
            label,
        };
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&[ex(0), ex(0)], &[ex(0)], &cfg, &scheme),
            Err(VerdictError::DegenerateData(_))
        ));
        assert!(matches!(
            train(&[ex(0), ex(1), ex(2)], &[], &cfg, &scheme),
            Err(VerdictError::DegenerateData(_))
        ));
        let bad = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&[ex(0), ex(1), ex(2)], &[ex(0)], &bad, &scheme),
            Err(VerdictError::InvalidConfig(_))
        ));
        let bad = TrainConfig {
            patience: 3,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exploding_learning_rate_reports_non_finite_loss() {
        let scheme = LabelScheme::raw_fc();
        let examples: Vec<Example> = (0..30)
            .map(|i| Example {
                features: featurize(&format!("tok{} tok{}", i % 3, i), 64),
                label: i % 3,
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 1e306,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&examples, &examples[..3], &cfg, &scheme),
            Err(VerdictError::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn gradient_step_matches_dense_gradient() {
        let scheme = LabelScheme::raw_fc();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = VeracityModel::zeros(&scheme, 32);
        model.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
        let batch: Vec<Example> = (0..4)
            .map(|i| Example {
                features: featurize(&format!("w{} w{} w{}", i, i + 1, i * 7), 32),
                label: i % 3,
            })
            .collect();
        let (gw, gb) = objective_gradient(&model, &batch, 0.01);
        let mut stepped = model.clone();
        gradient_step(&mut stepped, &batch, 0.1, 0.01);
        for ((after, before), g) in stepped.weights.iter().zip(&model.weights).zip(&gw) {
            assert!((after - (before - 0.1 * g)).abs() < 1e-12);
        }
        for ((after, before), g) in stepped.bias.iter().zip(&model.bias).zip(&gb) {
            assert!((after - (before - 0.1 * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let scheme = LabelScheme::liar_raw();
        let mut model = VeracityModel::zeros(&scheme, 8);
        model.weights.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 * 0.25 - 3.0);
        model.bias = vec![1.0, -2.0, 0.5, 0.0, 1e-300, -7.25];
        model.train_manifest_digest = "abc".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(VerdictError::ModelFile(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn external_predictor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("predict.sh");
        std::fs::write(
            &script,
            "#!/bin/sh\nsed -E 's/^\\{\"id\":(\"[^\"]*\").*/{\"id\":\\1,\"label\":\"Half True\"}/' \"$1/test.jsonl\" > \"$1/predictions.jsonl\"\n",
        )
        .unwrap();
        let pred = ExternalPredictor::new(vec!["sh".into(), script.display().to_string()]);
        let input = |id: &str, label: Option<&str>| PredictorInput {
            id: id.into(),
            text: format!("text {id}"),
            label: label.map(str::to_string),
        };
        let work = dir.path().join("work");
        let labels = pred
            .run(
                &work,
                &[input("a", Some("true"))],
                &[input("b", Some("false"))],
                &[input("c", Some("true")), input("d", None)],
                &TrainConfig::default(),
                &LabelScheme::raw_fc(),
            )
            .unwrap();
        assert_eq!(labels, ["half-true", "half-true"]);
        let test = std::fs::read_to_string(work.join("test.jsonl")).unwrap();
        assert!(!test.contains("label"));
        let cfg: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(work.join("config.json")).unwrap()).unwrap();
        assert_eq!(cfg["learning_rate_grid"], serde_json::json!([2e-6, 2e-5, 1e-5]));

        let failing = ExternalPredictor::new(vec!["false".into()]);
        assert!(matches!(
            failing.run(&work, &[], &[], &[], &TrainConfig::default(), &LabelScheme::raw_fc()),
            Err(VerdictError::External(_))
        ));
    }
}
