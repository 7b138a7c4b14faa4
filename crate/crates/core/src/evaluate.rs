//! Per-cell ROC/AUC evaluation of score tables.
//!
//! A cell is one (model_id, method, modality, split pair). Cells that lack
//! one of the two classes are skipped with a reason rather than failing the
//! whole run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{auc, bootstrap_auc_ci, roc_curve, tpr_at_fpr, LabeledScore, RocResult};
use crate::record::{ModalityMode, SplitTag};
use crate::scores::{MethodLabel, ScoreRow};
use crate::Error;

pub const SUMMARY_HEADER: &str =
    "model_id,method,modality,split_pair,auc,auc_lo,auc_hi,n_members,n_nonmembers";

/// Extra low-FPR operating points written alongside the summary.
pub const DIAGNOSTIC_FPR_LEVELS: [f64; 2] = [0.01, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "(SplitTag, SplitTag)", into = "(SplitTag, SplitTag)")]
pub struct SplitPair {
    pub member: SplitTag,
    pub nonmember: SplitTag,
}

impl SplitPair {
    pub const ID: SplitPair = SplitPair {
        member: SplitTag::Member,
        nonmember: SplitTag::NonmemberId,
    };
    pub const OOD: SplitPair = SplitPair {
        member: SplitTag::Member,
        nonmember: SplitTag::NonmemberOod,
    };

    pub fn new(member: SplitTag, nonmember: SplitTag) -> Result<Self, String> {
        if member.is_member() != Some(true) {
            return Err(format!("`{member}` is not a member split"));
        }
        if nonmember.is_member() != Some(false) {
            return Err(format!("`{nonmember}` is not a non-member split"));
        }
        Ok(Self { member, nonmember })
    }

    pub fn default_pairs() -> Vec<SplitPair> {
        vec![SplitPair::ID, SplitPair::OOD]
    }

    /// Short column heading for reports.
    pub fn heading(&self) -> String {
        match *self {
            SplitPair::ID => "ID".into(),
            SplitPair::OOD => "OOD".into(),
            other => other.to_string(),
        }
    }
}

impl TryFrom<(SplitTag, SplitTag)> for SplitPair {
    type Error = String;

    fn try_from((m, n): (SplitTag, SplitTag)) -> Result<Self, Self::Error> {
        SplitPair::new(m, n)
    }
}

impl From<SplitPair> for (SplitTag, SplitTag) {
    fn from(p: SplitPair) -> Self {
        (p.member, p.nonmember)
    }
}

impl fmt::Display for SplitPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_vs_{}", self.member, self.nonmember)
    }
}

impl FromStr for SplitPair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, n) = s
            .split_once("_vs_")
            .ok_or_else(|| format!("split pair `{s}` is not of the form <member>_vs_<nonmember>"))?;
        SplitPair::new(m.parse()?, n.parse()?)
    }
}

mod as_display {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr<Err = String>,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model_id: String,
    pub method: MethodLabel,
    pub modality: ModalityMode,
    #[serde(with = "as_display")]
    pub split_pair: SplitPair,
    pub auc: f64,
    pub auc_lo: Option<f64>,
    pub auc_hi: Option<f64>,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub summary: SummaryRow,
    pub roc: RocResult,
    /// `(fpr_level, tpr)` at [`DIAGNOSTIC_FPR_LEVELS`].
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSkip {
    pub model_id: String,
    pub method: MethodLabel,
    pub modality: ModalityMode,
    #[serde(with = "as_display")]
    pub split_pair: SplitPair,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub cells: Vec<CellResult>,
    pub skips: Vec<CellSkip>,
}

impl Evaluation {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.cells.iter().map(|c| c.summary.clone()).collect()
    }

    pub fn find(&self, model_id: &str, method: MethodLabel, modality: ModalityMode, pair: SplitPair) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            let s = &c.summary;
            s.model_id == model_id && s.method == method && s.modality == modality && s.split_pair == pair
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    pub split_pairs: Vec<SplitPair>,
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            split_pairs: SplitPair::default_pairs(),
            bootstrap: None,
        }
    }
}

type CellKey<'a> = (&'a str, MethodLabel, ModalityMode);

/// Evaluates every cell. Unlabeled rows are rejected outright.
pub fn evaluate_scores(rows: &[ScoreRow], options: &EvaluateOptions) -> Result<Evaluation, Error> {
    if let Some(r) = rows.iter().find(|r| r.split == SplitTag::Unlabeled) {
        return Err(Error::Config(format!(
            "sample `{}` ({}, {}) is unlabeled; evaluation needs member/non-member splits",
            r.sample_id, r.model_id, r.modality
        )));
    }
    let mut groups: BTreeMap<CellKey<'_>, Vec<&ScoreRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.model_id, r.method, r.modality)).or_default().push(r);
    }

    let mut pairs = options.split_pairs.clone();
    pairs.sort();
    pairs.dedup();
    let jobs: Vec<(CellKey<'_>, &Vec<&ScoreRow>, SplitPair)> = groups
        .iter()
        .flat_map(|(k, v)| pairs.iter().map(move |&p| (*k, v, p)))
        .collect();

    let outcomes: Vec<Result<CellResult, CellSkip>> = jobs
        .par_iter()
        .map(|&((model_id, method, modality), group, pair)| {
            let labeled: Vec<LabeledScore> = group
                .iter()
                .filter(|r| r.split == pair.member || r.split == pair.nonmember)
                .map(|r| LabeledScore::new(r.oriented_score, r.split == pair.member))
                .collect();
            evaluate_cell(&labeled, options.bootstrap)
                .map(|(roc, auc, ci, tpr)| CellResult {
                    summary: SummaryRow {
                        model_id: model_id.to_string(),
                        method,
                        modality,
                        split_pair: pair,
                        auc,
                        auc_lo: ci.map(|c| c.0),
                        auc_hi: ci.map(|c| c.1),
                        n_members: roc.n_members,
                        n_nonmembers: roc.n_nonmembers,
                    },
                    roc,
                    tpr_at_fpr: tpr,
                })
                .map_err(|reason| CellSkip {
                    model_id: model_id.to_string(),
                    method,
                    modality,
                    split_pair: pair,
                    reason,
                })
        })
        .collect();

    let mut eval = Evaluation::default();
    for o in outcomes {
        match o {
            Ok(c) => eval.cells.push(c),
            Err(s) => eval.skips.push(s),
        }
    }
    Ok(eval)
}

type CellOutput = (RocResult, f64, Option<(f64, f64)>, Vec<(f64, f64)>);

fn evaluate_cell(labeled: &[LabeledScore], bootstrap: Option<BootstrapConfig>) -> Result<CellOutput, String> {
    let roc = roc_curve(labeled).map_err(|e| e.to_string())?;
    let auc = auc(labeled).map_err(|e| e.to_string())?;
    let ci = bootstrap
        .map(|b| bootstrap_auc_ci(labeled, b.n_resamples, b.seed))
        .transpose()
        .map_err(|e| e.to_string())?;
    let tpr = DIAGNOSTIC_FPR_LEVELS
        .iter()
        .map(|&l| (l, tpr_at_fpr(&roc, l).expect("diagnostic levels are in range")))
        .collect();
    Ok((roc, auc, ci, tpr))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file)))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != SUMMARY_HEADER {
        return Err(Error::Config(format!(
            "{}: expected summary header `{SUMMARY_HEADER}`",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?)
}

fn file_component(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '@') { c } else { '_' })
        .collect()
}

/// File name of the ROC dump for one cell.
pub fn roc_file_name(s: &SummaryRow) -> String {
    format!(
        "{}__{}__{}__{}.csv",
        file_component(&s.model_id),
        file_component(&s.method.to_string()),
        s.modality,
        s.split_pair
    )
}

pub fn write_roc(path: &Path, roc: &RocResult) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record(["fpr", "tpr", "tau"])?;
    for p in &roc.points {
        w.serialize((p.fpr, p.tpr, p.tau))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv`, `tpr_at_fpr.csv`, `evaluate_skips.jsonl` and one
/// ROC dump per cell under `roc/`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<(), Error> {
    let roc_dir = dir.join("roc");
    fs::create_dir_all(&roc_dir).map_err(|e| Error::io(&roc_dir, e))?;
    write_summary(&dir.join("summary.csv"), &eval.summary())?;

    let mut w = csv_writer(&dir.join("tpr_at_fpr.csv"))?;
    w.write_record(["model_id", "method", "modality", "split_pair", "fpr_level", "tpr"])?;
    for c in &eval.cells {
        let s = &c.summary;
        for &(level, tpr) in &c.tpr_at_fpr {
            w.write_record([
                s.model_id.clone(),
                s.method.to_string(),
                s.modality.to_string(),
                s.split_pair.to_string(),
                level.to_string(),
                tpr.to_string(),
            ])?;
        }
        write_roc(&roc_dir.join(roc_file_name(s)), &c.roc)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let path = dir.join("evaluate_skips.jsonl");
    let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for s in &eval.skips {
        writeln!(out, "{}", serde_json::to_string(s).expect("skip serializes")).map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}
