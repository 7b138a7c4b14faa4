//! Acceptance gate. Each criterion prints one PASS/FAIL line; the binary
//! exits non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use mia_audit::attacks::{score_loss, score_min_k, score_min_k_pp};
use mia_audit::evaluate::{read_summary, SplitPair, SummaryRow};
use mia_audit::metrics::{auc, roc_curve, trapezoid_area};
use mia_audit::record::{ModalityMode, SampleRecord};
use mia_audit::scores::MethodLabel;
use mia_audit::synth::SynthConfig;
use mia_audit::AttackMethod;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_auc, fixture, random_instance, random_record, run};

const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 500;
const ORACLE_MAX_N: usize = 200;
const ORACLE_TIE_PROB: f64 = 0.3;
const ORACLE_BUDGET_SECS: f64 = 5.0;
const REDUCTION_RECORDS: usize = 1000;
const SHIFTS: [f64; 3] = [-5.0, 0.1, 7.0];
const SHIFT_TOL: f64 = 1e-12;
const MEMORIZATION_MIN_AUC: f64 = 0.60;
const OOD_SHIFT: f64 = 0.5;
const NORMALIZED_AUC_TOL: f64 = 1e-9;
const DELTA_TOL: f64 = 0.002;

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, name: &str, result: Result<String, String>) {
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_instances() -> Vec<Vec<mia_audit::LabeledScore>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA0C);
    (0..ORACLE_INSTANCES)
        .map(|_| random_instance(&mut rng, ORACLE_MAX_N, ORACLE_TIE_PROB))
        .collect()
}

fn auc_oracle_equivalence() -> Result<String, String> {
    let start = Instant::now();
    let instances = oracle_instances();
    let mut worst = 0.0f64;
    for (i, inst) in instances.iter().enumerate() {
        let fast = auc(inst).map_err(|e| format!("instance {i}: {e}"))?;
        let slow = brute_force_auc(inst);
        worst = worst.max((fast - slow).abs());
        ensure((fast - slow).abs() <= ORACLE_TOL, || {
            format!("instance {i}: rank {fast} vs pairwise {slow}")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < ORACLE_BUDGET_SECS, || format!("took {secs:.2}s"))?;
    Ok(format!("{ORACLE_INSTANCES} instances, max |diff| {worst:e}, {secs:.2}s"))
}

fn roc_rank_agreement() -> Result<String, String> {
    let mut worst = 0.0f64;
    for (i, inst) in oracle_instances().iter().enumerate() {
        let roc = roc_curve(inst).map_err(|e| format!("instance {i}: {e}"))?;
        let area = trapezoid_area(&roc.points);
        let rank = auc(inst).unwrap();
        worst = worst.max((area - rank).abs());
        ensure((area - rank).abs() <= ORACLE_TOL, || {
            format!("instance {i}: trapezoid {area} vs rank {rank}")
        })?;
    }
    Ok(format!("max |diff| {worst:e}"))
}

fn reduction_identity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4ED);
    for i in 0..REDUCTION_RECORDS {
        let r = random_record(&mut rng, i, false);
        let a = score_min_k(&r, 100.0).unwrap();
        let b = score_loss(&r).unwrap();
        ensure(a.to_bits() == b.to_bits(), || format!("record {i}: {a} != {b}"))?;
    }
    Ok(format!("{REDUCTION_RECORDS} records bit-exact"))
}

fn shifted(r: &SampleRecord, c: f64) -> SampleRecord {
    let mut s = r.clone();
    for t in &mut s.tokens {
        t.log_prob += c;
        if let Some(m) = t.moments.as_mut() {
            m.mean += c;
        }
    }
    s
}

fn shift_invariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5F7);
    let (mut worst_pp, mut worst_loss) = (0.0f64, 0.0f64);
    for i in 0..REDUCTION_RECORDS {
        let r = random_record(&mut rng, i, true);
        let pp = score_min_k_pp(&r, 20.0).unwrap();
        let loss = score_loss(&r).unwrap();
        for c in SHIFTS {
            let s = shifted(&r, c);
            let dpp = (score_min_k_pp(&s, 20.0).unwrap() - pp).abs();
            let dloss = (score_loss(&s).unwrap() - loss - c).abs();
            worst_pp = worst_pp.max(dpp);
            worst_loss = worst_loss.max(dloss);
            ensure(dpp < SHIFT_TOL, || format!("record {i}, c={c}: min_k_pp moved by {dpp:e}"))?;
            ensure(dloss <= SHIFT_TOL, || format!("record {i}, c={c}: loss off by {dloss:e}"))?;
        }
    }
    Ok(format!("min_k_pp max drift {worst_pp:e}, loss max error {worst_loss:e}"))
}

/// Runs `synth` then `run-experiment` for a committed config pair.
fn synth_and_run(synth_cfg: &str, exp_cfg: &str, dir: &Path) -> Result<Vec<SummaryRow>, String> {
    let records = dir.join("records");
    let out = run(&[
        "synth",
        "--config",
        fixture(synth_cfg).to_str().unwrap(),
        "--output-dir",
        records.to_str().unwrap(),
    ]);
    ensure(out.status.success(), || format!("synth failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    let cfg = records.join("experiment.json");
    fs::copy(fixture(exp_cfg), &cfg).map_err(|e| e.to_string())?;
    let out = run(&["run-experiment", "--config", cfg.to_str().unwrap()]);
    ensure(out.status.success(), || {
        format!("run-experiment failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    read_summary(&records.join("audit/summary.csv")).map_err(|e| e.to_string())
}

fn cell(summary: &[SummaryRow], method: AttackMethod, modality: ModalityMode, pair: SplitPair) -> Result<f64, String> {
    summary
        .iter()
        .find(|s| s.method == MethodLabel::plain(method) && s.modality == modality && s.split_pair == pair)
        .map(|s| s.auc)
        .ok_or_else(|| format!("no cell for {method}/{modality}/{pair}"))
}

fn synthetic_memorization(summary: &[SummaryRow]) -> Result<String, String> {
    let committed: SynthConfig =
        serde_json::from_str(&fs::read_to_string(fixture("synth_default.json")).unwrap()).unwrap();
    ensure(committed == SynthConfig::default(), || "committed fixture drifted from the default config".into())?;
    let a = cell(summary, AttackMethod::Loss, ModalityMode::VisionText, SplitPair::ID)?;
    ensure(a >= MEMORIZATION_MIN_AUC, || format!("loss AUC {a:.4} < {MEMORIZATION_MIN_AUC}"))?;
    Ok(format!("loss AUC member vs nonmember_id = {a:.4} (seed {}, threshold {MEMORIZATION_MIN_AUC})", committed.seed))
}

fn orientation_calibration(summary: &[SummaryRow]) -> Result<String, String> {
    let mut parts = Vec::new();
    for m in AttackMethod::ALL {
        let a = cell(summary, m, ModalityMode::VisionText, SplitPair::ID)?;
        ensure(a >= 0.5, || format!("{m}: oriented AUC {a:.4} < 0.5"))?;
        parts.push(format!("{m}={a:.3}"));
    }
    Ok(parts.join(" "))
}

fn ood_inversion(summary: &[SummaryRow]) -> Result<String, String> {
    use ModalityMode::*;
    let cfg: SynthConfig =
        serde_json::from_str(&fs::read_to_string(fixture("synth_ood_shift.json")).unwrap()).unwrap();
    ensure(cfg.ood_shift == OOD_SHIFT, || format!("fixture ood_shift is {}", cfg.ood_shift))?;
    let before = cell(summary, AttackMethod::Loss, TextOnly, SplitPair::OOD)?;
    let after = cell(summary, AttackMethod::Loss, VisionText, SplitPair::OOD)?;
    ensure(after < 0.5, || format!("shifted loss AUC {after:.4} is not below 0.5"))?;
    ensure(after < before, || format!("shifted loss AUC {after:.4} not below unshifted {before:.4}"))?;
    let pp_before = cell(summary, AttackMethod::MinKPp, TextOnly, SplitPair::OOD)?;
    let pp_after = cell(summary, AttackMethod::MinKPp, VisionText, SplitPair::OOD)?;
    let d = (pp_after - pp_before).abs();
    ensure(d < NORMALIZED_AUC_TOL, || format!("min_k_pp AUC moved by {d:e}"))?;
    Ok(format!(
        "loss OOD AUC {before:.3} -> {after:.3}; min_k_pp {pp_before:.3} -> {pp_after:.3} (|diff| {d:e})"
    ))
}

fn published_table_golden(dir: &Path) -> Result<String, String> {
    let out = run(&[
        "report",
        fixture("published_summary.csv").to_str().unwrap(),
        "--output-dir",
        dir.to_str().unwrap(),
    ]);
    ensure(out.status.success(), || format!("report failed: {}", String::from_utf8_lossy(&out.stderr)))?;

    let mut report = csv::Reader::from_path(dir.join("report.csv")).map_err(|e| e.to_string())?;
    let headers = report.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut computed: HashMap<(String, String, String), (f64, String)> = HashMap::new();
    for rec in report.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        for pair in ["member_vs_nonmember_id", "member_vs_nonmember_ood"] {
            let delta: f64 = rec[col(&format!("{pair}_delta"))].parse().unwrap();
            let marker = rec[col(&format!("{pair}_marker"))].to_string();
            computed.insert((rec[0].to_string(), rec[1].to_string(), pair.to_string()), (delta, marker));
        }
    }

    let mut printed = csv::Reader::from_path(fixture("published_deltas.csv")).map_err(|e| e.to_string())?;
    let (mut n, mut worst) = (0, 0.0f64);
    for rec in printed.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let key = (rec[0].to_string(), rec[1].to_string(), rec[2].to_string());
        let want: f64 = rec[3].parse().unwrap();
        let (got, marker) = computed.get(&key).ok_or_else(|| format!("{key:?} missing from report"))?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= DELTA_TOL, || format!("{key:?}: delta {got} vs printed {want}"))?;
        ensure(marker == &rec[4], || format!("{key:?}: marker {marker} vs printed {}", &rec[4]))?;
        n += 1;
    }
    ensure(n == 48, || format!("expected 48 printed deltas, found {n}"))?;
    Ok(format!("{n} deltas within {DELTA_TOL} (max {worst:.4}), all markers match"))
}

fn determinism(dir: &Path) -> Result<String, String> {
    let cfg = dir.join("records/experiment.json");
    let mut outs = Vec::new();
    for name in ["run_a", "run_b"] {
        let out_dir = dir.join(name);
        let out = run(&[
            "run-experiment",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
        ]);
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        outs.push(out_dir);
    }
    let mut files = vec![
        "report.txt".to_string(),
        "report.csv".into(),
        "summary.csv".into(),
        "scores.csv".into(),
        "skips.jsonl".into(),
        "tpr_at_fpr.csv".into(),
        "evaluate_skips.jsonl".into(),
    ];
    let mut roc: Vec<String> = fs::read_dir(outs[0].join("roc"))
        .map_err(|e| e.to_string())?
        .map(|e| format!("roc/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    roc.sort();
    files.extend(roc);
    for f in &files {
        let a = fs::read(outs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(outs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} output files byte-identical across two runs", files.len()))
}

fn main() {
    let mut gate = Gate { failures: 0 };
    let tmp = tempfile::tempdir().expect("tempdir");

    gate.check("auc-oracle-equivalence", auc_oracle_equivalence());
    gate.check("roc-rank-agreement", roc_rank_agreement());
    gate.check("reduction-identity", reduction_identity());
    gate.check("shift-invariance", shift_invariance());

    let default_dir = tmp.path().join("default");
    match synth_and_run("synth_default.json", "experiment_default.json", &default_dir) {
        Ok(summary) => {
            gate.check("synthetic-memorization", synthetic_memorization(&summary));
            gate.check("orientation-calibration", orientation_calibration(&summary));
        }
        Err(e) => {
            gate.check("synthetic-memorization", Err(e.clone()));
            gate.check("orientation-calibration", Err(e));
        }
    }

    let shift_dir = tmp.path().join("shift");
    match synth_and_run("synth_ood_shift.json", "experiment_ood_shift.json", &shift_dir) {
        Ok(summary) => gate.check("ood-inversion", ood_inversion(&summary)),
        Err(e) => gate.check("ood-inversion", Err(e)),
    }

    gate.check("published-table-golden", published_table_golden(&tmp.path().join("published")));
    gate.check("determinism", determinism(&shift_dir));

    println!(
        "acceptance: {} criteria, {} failed",
        9,
        gate.failures
    );
    if gate.failures > 0 {
        std::process::exit(1);
    }
}
