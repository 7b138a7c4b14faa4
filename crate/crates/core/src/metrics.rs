//! ROC curves, AUC and modality deltas.
//!
//! AUC uses the Mann-Whitney rank statistic with average ranks for ties,
//! which agrees with the trapezoidal area under the tie-collapsed ROC.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("need at least one member and one non-member (got {members} members, {nonmembers} non-members)")]
    OneClassOnly { members: usize, nonmembers: usize },
    #[error("score is not finite")]
    NonFiniteScore,
    #[error("fpr level must be in [0, 1], got {0}")]
    BadLevel(f64),
    #[error("AUC must be in [0, 1], got {0}")]
    OutOfRange(f64),
    #[error("n_resamples must be at least 1")]
    NoResamples,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub oriented_score: f64,
    pub is_member: bool,
}

impl LabeledScore {
    pub fn new(oriented_score: f64, is_member: bool) -> Self {
        Self {
            oriented_score,
            is_member,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Threshold at which this operating point is reached; `+inf` for the
    /// initial (0, 0) point.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

fn class_counts(scores: &[LabeledScore]) -> Result<(usize, usize), MetricsError> {
    if scores.iter().any(|s| !s.oriented_score.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let members = scores.iter().filter(|s| s.is_member).count();
    let nonmembers = scores.len() - members;
    if members == 0 || nonmembers == 0 {
        return Err(MetricsError::OneClassOnly {
            members,
            nonmembers,
        });
    }
    Ok((members, nonmembers))
}

/// Probability that a random member outranks a random non-member, ties
/// counted as one half.
pub fn auc(scores: &[LabeledScore]) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = class_counts(scores)?;
    let mut sorted: Vec<LabeledScore> = scores.to_vec();
    sorted.sort_unstable_by(|a, b| a.oriented_score.total_cmp(&b.oriented_score));

    // Twice the member rank sum, so tied groups stay in integers.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].oriented_score == sorted[i].oriented_score {
            j += 1;
        }
        // Ranks i+1..=j share the average (i + 1 + j) / 2.
        let members_in_group = sorted[i..j].iter().filter(|s| s.is_member).count() as u128;
        rank_sum_x2 += members_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let n_pos_u = n_pos as u128;
    let u_x2 = rank_sum_x2 - n_pos_u * (n_pos_u + 1);
    Ok(u_x2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// ROC curve over distinct thresholds, highest first. Tied scores collapse
/// into one operating point.
pub fn roc_curve(scores: &[LabeledScore]) -> Result<RocResult, MetricsError> {
    let (n_pos, n_neg) = class_counts(scores)?;
    let mut sorted: Vec<LabeledScore> = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.oriented_score.total_cmp(&a.oriented_score));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        tau: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Trapezoid sum in integer units of 1 / (2 * n_pos * n_neg).
    let mut area_x2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].oriented_score;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < sorted.len() && sorted[i].oriented_score == tau {
            if sorted[i].is_member {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area_x2 += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            tau,
        });
    }
    Ok(RocResult {
        points,
        auc: area_x2 as f64 / (2.0 * n_pos as f64 * n_neg as f64),
        n_members: n_pos,
        n_nonmembers: n_neg,
    })
}

/// Trapezoidal area over the curve's floating-point coordinates.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Best TPR among operating points with FPR at most `fpr_level`. No
/// interpolation between points.
pub fn tpr_at_fpr(roc: &RocResult, fpr_level: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&fpr_level) {
        return Err(MetricsError::BadLevel(fpr_level));
    }
    Ok(roc
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_level)
        .map(|p| p.tpr)
        .fold(0.0, f64::max))
}

/// Percentile 95% interval of the AUC over stratified bootstrap resamples.
///
/// Resample `i` draws from its own ChaCha stream (`seed`, stream `i`), so
/// the interval does not depend on thread scheduling.
pub fn bootstrap_auc_ci(
    scores: &[LabeledScore],
    n_resamples: usize,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    class_counts(scores)?;
    if n_resamples == 0 {
        return Err(MetricsError::NoResamples);
    }
    let members: Vec<f64> = scores.iter().filter(|s| s.is_member).map(|s| s.oriented_score).collect();
    let nonmembers: Vec<f64> = scores.iter().filter(|s| !s.is_member).map(|s| s.oriented_score).collect();

    let mut aucs: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut sample = Vec::with_capacity(scores.len());
            for _ in 0..members.len() {
                sample.push(LabeledScore::new(members[rng.gen_range(0..members.len())], true));
            }
            for _ in 0..nonmembers.len() {
                sample.push(LabeledScore::new(nonmembers[rng.gen_range(0..nonmembers.len())], false));
            }
            auc(&sample).expect("stratified resample keeps both classes")
        })
        .collect();
    aucs.sort_unstable_by(f64::total_cmp);
    Ok((percentile(&aucs, 0.025), percentile(&aucs, 0.975)))
}

/// Linear interpolation between closest ranks of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let v = sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
    v.clamp(sorted[lo], sorted[hi])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    Up,
    Down,
    Neutral,
}

impl Marker {
    pub fn of(delta: f64) -> Self {
        match delta.partial_cmp(&0.0) {
            Some(Ordering::Greater) => Marker::Up,
            Some(Ordering::Less) => Marker::Down,
            _ => Marker::Neutral,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Marker::Up => "up",
            Marker::Down => "down",
            Marker::Neutral => "neutral",
        }
    }

    /// Single-character form for text tables.
    pub fn symbol(self) -> &'static str {
        match self {
            Marker::Up => "+",
            Marker::Down => "-",
            Marker::Neutral => "=",
        }
    }
}

/// Change in AUC when vision is added to the text input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDelta {
    pub text_only_auc: f64,
    pub vt_auc: f64,
    pub delta: f64,
    pub marker: Marker,
}

pub fn delta_cell(text_only_auc: f64, vt_auc: f64) -> Result<CellDelta, MetricsError> {
    for v in [text_only_auc, vt_auc] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::OutOfRange(v));
        }
    }
    let delta = vt_auc - text_only_auc;
    Ok(CellDelta {
        text_only_auc,
        vt_auc,
        delta,
        marker: Marker::of(delta),
    })
}
