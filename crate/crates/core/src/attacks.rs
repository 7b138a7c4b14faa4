//! Logit-based membership scores.
//!
//! Every scorer is a pure function of one [`SampleRecord`]. Raw scores keep
//! the sign convention of their method; [`AttackConfig::orientation`] maps
//! them onto "higher predicts member" before any threshold is applied.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{RecordSet, SampleRecord, TokenObservation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("tokens is empty")]
    EmptyTokens,
    #[error("text is empty")]
    EmptyText,
    #[error("k_percent must be in (0, 100], got {0}")]
    BadK(f64),
    #[error("token {index} has no dist_mean/dist_std")]
    MissingMoments { index: usize },
    #[error("record has no reference_tokens")]
    MissingReference,
    #[error("record has no conditional_tokens")]
    MissingConditional,
    #[error("conditional_tokens has length {conditional}, tokens has length {unconditional}")]
    LengthMismatch {
        conditional: usize,
        unconditional: usize,
    },
    #[error("unconditional mean log-prob {0} is too close to zero")]
    DegenerateUnconditional(f64),
    #[error("zlib level must be 0-9, got {0}")]
    BadZlibLevel(u32),
    #[error("orientation map has no entry for {0}")]
    MissingOrientation(AttackMethod),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Loss,
    Reference,
    Zlib,
    MinK,
    MinKPp,
    Recall,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 6] = [
        AttackMethod::Loss,
        AttackMethod::Reference,
        AttackMethod::Zlib,
        AttackMethod::MinK,
        AttackMethod::MinKPp,
        AttackMethod::Recall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackMethod::Loss => "loss",
            AttackMethod::Reference => "reference",
            AttackMethod::Zlib => "zlib",
            AttackMethod::MinK => "min_k",
            AttackMethod::MinKPp => "min_k_pp",
            AttackMethod::Recall => "recall",
        }
    }

    /// Whether the score depends on `k_percent`.
    pub fn uses_k(self) -> bool {
        matches!(self, AttackMethod::MinK | AttackMethod::MinKPp)
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown method `{s}` (expected one of loss, reference, zlib, min_k, min_k_pp, recall)"
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsMember,
    LowerIsMember,
}

impl Orientation {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            Orientation::HigherIsMember => raw,
            Orientation::LowerIsMember => -raw,
        }
    }
}

pub const DEFAULT_K_PERCENT: f64 = 20.0;
pub const DEFAULT_ZLIB_LEVEL: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub k_percent: f64,
    pub orientation: BTreeMap<AttackMethod, Orientation>,
    pub zlib_level: u32,
}

/// Every method scores members higher by default, ReCALL included.
pub fn default_orientation() -> BTreeMap<AttackMethod, Orientation> {
    AttackMethod::ALL
        .into_iter()
        .map(|m| (m, Orientation::HigherIsMember))
        .collect()
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            k_percent: DEFAULT_K_PERCENT,
            orientation: default_orientation(),
            zlib_level: DEFAULT_ZLIB_LEVEL,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        check_k(self.k_percent)?;
        if self.zlib_level > 9 {
            return Err(AttackError::BadZlibLevel(self.zlib_level));
        }
        for m in AttackMethod::ALL {
            if !self.orientation.contains_key(&m) {
                return Err(AttackError::MissingOrientation(m));
            }
        }
        Ok(())
    }

    pub fn orientation_of(&self, method: AttackMethod) -> Orientation {
        self.orientation
            .get(&method)
            .copied()
            .unwrap_or(Orientation::HigherIsMember)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackScore {
    pub method: AttackMethod,
    pub sample_id: String,
    pub raw_score: f64,
    /// `raw_score` with the orientation applied; higher predicts member.
    pub oriented_score: f64,
}

impl AttackScore {
    pub fn new(method: AttackMethod, sample_id: impl Into<String>, raw: f64, o: Orientation) -> Self {
        Self {
            method,
            sample_id: sample_id.into(),
            raw_score: raw,
            oriented_score: o.apply(raw),
        }
    }
}

fn check_k(k_percent: f64) -> Result<(), AttackError> {
    if k_percent.is_nan() || k_percent <= 0.0 || k_percent > 100.0 {
        return Err(AttackError::BadK(k_percent));
    }
    Ok(())
}

fn mean_log_prob(tokens: &[TokenObservation]) -> Result<f64, AttackError> {
    if tokens.is_empty() {
        return Err(AttackError::EmptyTokens);
    }
    Ok(tokens.iter().map(|t| t.log_prob).sum::<f64>() / tokens.len() as f64)
}

/// Number of order statistics kept for a Min-K% selection.
pub fn min_k_count(n: usize, k_percent: f64) -> usize {
    ((n as f64 * k_percent / 100.0).floor() as usize).clamp(1, n)
}

/// Mean of the `m` smallest values. Summation runs in ascending order so the
/// result does not depend on input order.
fn mean_of_smallest(mut values: Vec<f64>, m: usize) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values[..m].iter().sum::<f64>() / m as f64
}

pub fn score_loss(sample: &SampleRecord) -> Result<f64, AttackError> {
    mean_log_prob(&sample.tokens)
}

/// Length in bytes of the zlib stream for `data` at `level`.
pub fn zlib_len(data: &[u8], level: u32) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(level));
    enc.write_all(data).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

pub fn score_zlib(sample: &SampleRecord, config: &AttackConfig) -> Result<f64, AttackError> {
    if sample.tokens.is_empty() {
        return Err(AttackError::EmptyTokens);
    }
    if sample.text.is_empty() {
        return Err(AttackError::EmptyText);
    }
    if config.zlib_level > 9 {
        return Err(AttackError::BadZlibLevel(config.zlib_level));
    }
    let total: f64 = sample.log_probs().sum();
    Ok(total / zlib_len(sample.text.as_bytes(), config.zlib_level) as f64)
}

pub fn score_min_k(sample: &SampleRecord, k_percent: f64) -> Result<f64, AttackError> {
    check_k(k_percent)?;
    let n = sample.tokens.len();
    if n == 0 {
        return Err(AttackError::EmptyTokens);
    }
    let m = min_k_count(n, k_percent);
    if m == n {
        // Keep the reduction to the loss score bit-exact.
        return score_loss(sample);
    }
    Ok(mean_of_smallest(sample.log_probs().collect(), m))
}

/// Normalized token score; zero when the next-token distribution is
/// degenerate.
pub fn z_score(log_prob: f64, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        (log_prob - mean) / std
    }
}

pub fn score_min_k_pp(sample: &SampleRecord, k_percent: f64) -> Result<f64, AttackError> {
    check_k(k_percent)?;
    let n = sample.tokens.len();
    if n == 0 {
        return Err(AttackError::EmptyTokens);
    }
    let z = sample
        .tokens
        .iter()
        .enumerate()
        .map(|(index, t)| {
            t.moments
                .map(|m| z_score(t.log_prob, m.mean, m.std))
                .ok_or(AttackError::MissingMoments { index })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_of_smallest(z, min_k_count(n, k_percent)))
}

pub fn score_reference(sample: &SampleRecord) -> Result<f64, AttackError> {
    let reference = sample
        .reference_tokens
        .as_deref()
        .ok_or(AttackError::MissingReference)?;
    Ok(mean_log_prob(&sample.tokens)? - mean_log_prob(reference)?)
}

pub const RECALL_EPSILON: f64 = 1e-12;

pub fn score_recall(sample: &SampleRecord) -> Result<f64, AttackError> {
    let conditional = sample
        .conditional_tokens
        .as_deref()
        .ok_or(AttackError::MissingConditional)?;
    if conditional.len() != sample.tokens.len() {
        return Err(AttackError::LengthMismatch {
            conditional: conditional.len(),
            unconditional: sample.tokens.len(),
        });
    }
    let unconditional = mean_log_prob(&sample.tokens)?;
    if unconditional.abs() < RECALL_EPSILON {
        return Err(AttackError::DegenerateUnconditional(unconditional));
    }
    Ok(mean_log_prob(conditional)? / unconditional)
}

/// Raw score of one method on one sample.
pub fn score_method(
    sample: &SampleRecord,
    method: AttackMethod,
    config: &AttackConfig,
) -> Result<f64, AttackError> {
    match method {
        AttackMethod::Loss => score_loss(sample),
        AttackMethod::Reference => score_reference(sample),
        AttackMethod::Zlib => score_zlib(sample, config),
        AttackMethod::MinK => score_min_k(sample, config.k_percent),
        AttackMethod::MinKPp => score_min_k_pp(sample, config.k_percent),
        AttackMethod::Recall => score_recall(sample),
    }
}

/// Returns 1 iff the oriented score reaches the threshold.
pub fn threshold_decision(score: &AttackScore, tau: f64) -> u8 {
    u8::from(score.oriented_score >= tau)
}

/// A score together with the provenance needed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecord<'a> {
    pub score: AttackScore,
    pub record: &'a SampleRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub sample_id: String,
    pub method: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ScoreBatch<'a> {
    pub scores: Vec<ScoredRecord<'a>>,
    pub skips: Vec<SkipEntry>,
}

/// Scores every (record, method) pair. Output is sorted by method, then
/// sample id (ties broken by model id and modality), whatever the
/// schedule. Records missing a method's inputs land in `skips`.
pub fn score_all<'a>(
    records: &'a RecordSet,
    methods: &[AttackMethod],
    config: &AttackConfig,
) -> ScoreBatch<'a> {
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();

    let results: Vec<Result<ScoredRecord<'a>, SkipEntry>> = methods
        .par_iter()
        .flat_map_iter(|&method| {
            records.records.iter().map(move |r| {
                score_method(r, method, config)
                    .map(|raw| ScoredRecord {
                        score: AttackScore::new(method, &r.sample_id, raw, config.orientation_of(method)),
                        record: r,
                    })
                    .map_err(|e| SkipEntry {
                        sample_id: r.sample_id.clone(),
                        method: method.to_string(),
                        reason: e.to_string(),
                    })
            })
        })
        .collect();

    let mut batch = ScoreBatch::default();
    for r in results {
        match r {
            Ok(s) => batch.scores.push(s),
            Err(skip) => batch.skips.push(skip),
        }
    }
    batch.scores.sort_by(|a, b| {
        (a.score.method, &a.score.sample_id, &a.record.model_id, a.record.modality).cmp(&(
            b.score.method,
            &b.score.sample_id,
            &b.record.model_id,
            b.record.modality,
        ))
    });
    batch
}
