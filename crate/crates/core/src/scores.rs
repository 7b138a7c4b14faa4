//! Score tables: one CSV row per (record, method) plus a JSONL skip manifest.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attacks::{score_all, AttackConfig, AttackMethod, SkipEntry};
use crate::record::{ModalityMode, RecordSet, SplitTag};
use crate::Error;

pub const SCORES_HEADER: &str = "method,sample_id,raw_score,oriented_score,model_id,modality,split,dataset";

/// A method, optionally pinned to a `k_percent` when one run sweeps several
/// k values. Renders as `min_k` or `min_k@10`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodLabel {
    pub method: AttackMethod,
    pub k_percent: Option<f64>,
}

impl MethodLabel {
    pub fn plain(method: AttackMethod) -> Self {
        Self {
            method,
            k_percent: None,
        }
    }
}

impl Eq for MethodLabel {}

impl Ord for MethodLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.method.cmp(&other.method).then_with(|| match (self.k_percent, other.k_percent) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(a), Some(b)) => a.total_cmp(&b),
        })
    }
}

impl PartialOrd for MethodLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for MethodLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k_percent {
            None => write!(f, "{}", self.method),
            Some(k) => write!(f, "{}@{}", self.method, k),
        }
    }
}

impl FromStr for MethodLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('@') {
            None => Ok(Self::plain(s.parse()?)),
            Some((m, k)) => {
                let method: AttackMethod = m.parse()?;
                if !method.uses_k() {
                    return Err(format!("method `{m}` takes no k value"));
                }
                let k: f64 = k.parse().map_err(|_| format!("bad k value in `{s}`"))?;
                Ok(Self {
                    method,
                    k_percent: Some(k),
                })
            }
        }
    }
}

impl Serialize for MethodLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: MethodLabel,
    pub sample_id: String,
    pub raw_score: f64,
    pub oriented_score: f64,
    pub model_id: String,
    pub modality: ModalityMode,
    pub split: SplitTag,
    pub dataset: String,
}

/// Scores `records` with every method, once per k value for the
/// k-dependent ones. With a single k value labels stay plain.
pub fn score_records(
    records: &RecordSet,
    methods: &[AttackMethod],
    config: &AttackConfig,
    k_values: &[f64],
) -> (Vec<ScoreRow>, Vec<SkipEntry>) {
    let (k_methods, plain): (Vec<AttackMethod>, Vec<AttackMethod>) =
        methods.iter().partition(|m| m.uses_k());
    let mut passes: Vec<(Vec<AttackMethod>, AttackConfig, Option<f64>)> = Vec::new();
    if !plain.is_empty() {
        passes.push((plain, config.clone(), None));
    }
    if !k_methods.is_empty() {
        let sweep = k_values.len() > 1;
        for &k in k_values {
            let cfg = AttackConfig {
                k_percent: k,
                ..config.clone()
            };
            passes.push((k_methods.clone(), cfg, sweep.then_some(k)));
        }
    }

    let mut rows = Vec::new();
    let mut skips = Vec::new();
    for (methods, cfg, k_label) in passes {
        let batch = score_all(records, &methods, &cfg);
        rows.extend(batch.scores.into_iter().map(|s| ScoreRow {
            method: MethodLabel {
                method: s.score.method,
                k_percent: k_label,
            },
            sample_id: s.score.sample_id,
            raw_score: s.score.raw_score,
            oriented_score: s.score.oriented_score,
            model_id: s.record.model_id.clone(),
            modality: s.record.modality,
            split: s.record.split,
            dataset: s.record.dataset.clone(),
        }));
        skips.extend(batch.skips.into_iter().map(|mut e| {
            if let Some(k) = k_label {
                e.method = format!("{}@{}", e.method, k);
            }
            e
        }));
    }
    rows.sort_by(|a, b| {
        (a.method, &a.sample_id, &a.model_id, a.modality).cmp(&(b.method, &b.sample_id, &b.model_id, b.modality))
    });
    (rows, skips)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?));
    w.write_record(SCORES_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != SCORES_HEADER {
        return Err(Error::Config(format!(
            "{}: expected score header `{SCORES_HEADER}`",
            path.display()
        )));
    }
    r.deserialize()
        .collect::<Result<Vec<ScoreRow>, _>>()
        .map_err(Error::from)
}

pub fn write_skips(path: &Path, skips: &[SkipEntry]) -> Result<(), Error> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in skips {
        writeln!(w, "{}", serde_json::to_string(s).expect("skip entry serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_skips(path: &Path) -> Result<Vec<SkipEntry>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Config(e.to_string()))?);
        }
    }
    Ok(out)
}
