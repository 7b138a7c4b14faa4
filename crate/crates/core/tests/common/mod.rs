#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mia_audit::metrics::LabeledScore;
use mia_audit::record::{ModalityMode, Moments, SampleRecord, SplitTag, TokenObservation};
use rand::Rng;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mia-audit"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// O(n^2) pairwise AUC: wins count 1, ties 1/2.
pub fn brute_force_auc(scores: &[LabeledScore]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for m in scores.iter().filter(|s| s.is_member) {
        for n in scores.iter().filter(|s| !s.is_member) {
            pairs += 1.0;
            if m.oriented_score > n.oriented_score {
                wins += 1.0;
            } else if m.oriented_score == n.oriented_score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random two-class instance of size 2..=max_n. With probability
/// `tie_prob` a score repeats an earlier one.
pub fn random_instance<R: Rng>(rng: &mut R, max_n: usize, tie_prob: f64) -> Vec<LabeledScore> {
    let n = rng.gen_range(2..=max_n);
    let mut out: Vec<LabeledScore> = Vec::with_capacity(n);
    for i in 0..n {
        let score = if i > 0 && rng.gen_bool(tie_prob) {
            out[rng.gen_range(0..i)].oriented_score
        } else {
            rng.gen_range(-3.0..3.0)
        };
        out.push(LabeledScore::new(score, rng.gen_bool(0.5)));
    }
    out[0].is_member = true;
    out[1].is_member = false;
    out
}

pub fn random_record<R: Rng>(rng: &mut R, id: usize, with_moments: bool) -> SampleRecord {
    let n = rng.gen_range(1..=64);
    let token = |rng: &mut R| {
        let log_prob = -rng.gen_range(0.0..12.0);
        TokenObservation {
            token_id: rng.gen_range(0..50_000),
            log_prob,
            moments: with_moments.then(|| Moments {
                mean: -rng.gen_range(0.5..8.0),
                std: rng.gen_range(0.25..4.0),
            }),
        }
    };
    let tokens: Vec<TokenObservation> = (0..n).map(|_| token(rng)).collect();
    SampleRecord {
        sample_id: format!("r{id}"),
        model_id: "m".into(),
        modality: ModalityMode::TextOnly,
        split: SplitTag::Member,
        dataset: "d".into(),
        text: "x".repeat(rng.gen_range(1..40)),
        tokens,
        conditional_tokens: None,
        reference_tokens: None,
    }
}
