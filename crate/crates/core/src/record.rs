//! Portable per-token log-probability records.
//!
//! A record file is JSONL: a version header on line 1, then one
//! [`SampleRecord`] per line. Log-probabilities are natural-log throughout.
//! Parsing goes through [`serde_json::Value`] so every schema error can name
//! the offending field path.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const FORMAT_NAME: &str = "mia-records";
pub const FORMAT_VERSION: u64 = 1;

/// Slack allowed above an exact zero log-probability.
pub const LOG_PROB_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: schema error at `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: invariant violated: {message}")]
    Invariant { line: usize, message: String },
    #[error("line {line}: bad header: {message}")]
    Header { line: usize, message: String },
    #[error(
        "duplicate sample_id `{sample_id}` for model `{model_id}` / {modality}: lines {first_line} and {second_line}"
    )]
    DuplicateId {
        sample_id: String,
        model_id: String,
        modality: ModalityMode,
        first_line: usize,
        second_line: usize,
    },
}

impl RecordError {
    /// Line the error refers to, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            RecordError::Io { .. } => None,
            RecordError::Schema { line, .. }
            | RecordError::Invariant { line, .. }
            | RecordError::Header { line, .. } => Some(*line),
            RecordError::DuplicateId { second_line, .. } => Some(*second_line),
        }
    }

    fn at_line(self, n: usize) -> Self {
        match self {
            RecordError::Schema { field, message, .. } => RecordError::Schema {
                line: n,
                field,
                message,
            },
            RecordError::Invariant { message, .. } => RecordError::Invariant { line: n, message },
            RecordError::Header { message, .. } => RecordError::Header { line: n, message },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityMode {
    #[serde(rename = "t_only")]
    TextOnly,
    #[serde(rename = "v_t")]
    VisionText,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 2] = [ModalityMode::TextOnly, ModalityMode::VisionText];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityMode::TextOnly => "t_only",
            ModalityMode::VisionText => "v_t",
        }
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t_only" => Ok(ModalityMode::TextOnly),
            "v_t" => Ok(ModalityMode::VisionText),
            other => Err(format!("unknown modality `{other}` (expected t_only or v_t)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Member,
    NonmemberId,
    NonmemberOod,
    Unlabeled,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [
        SplitTag::Member,
        SplitTag::NonmemberId,
        SplitTag::NonmemberOod,
        SplitTag::Unlabeled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Member => "member",
            SplitTag::NonmemberId => "nonmember_id",
            SplitTag::NonmemberOod => "nonmember_ood",
            SplitTag::Unlabeled => "unlabeled",
        }
    }

    /// Membership label, or `None` for unlabeled records.
    pub fn is_member(self) -> Option<bool> {
        match self {
            SplitTag::Member => Some(true),
            SplitTag::NonmemberId | SplitTag::NonmemberOod => Some(false),
            SplitTag::Unlabeled => None,
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// Mean and standard deviation of log-probabilities under the full
/// next-token distribution at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

/// One scored position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenObservation {
    pub token_id: u64,
    pub log_prob: f64,
    pub moments: Option<Moments>,
}

impl TokenObservation {
    pub fn new(token_id: u64, log_prob: f64) -> Self {
        Self {
            token_id,
            log_prob,
            moments: None,
        }
    }

    pub fn with_moments(token_id: u64, log_prob: f64, mean: f64, std: f64) -> Self {
        Self {
            token_id,
            log_prob,
            moments: Some(Moments { mean, std }),
        }
    }

    fn check(&self, field: &str) -> Result<(), String> {
        if !self.log_prob.is_finite() {
            return Err(format!("{field}.log_prob is not finite"));
        }
        if self.log_prob > LOG_PROB_SLACK {
            return Err(format!(
                "{field}.log_prob = {} is above 0 (natural-log probability expected)",
                self.log_prob
            ));
        }
        if let Some(m) = self.moments {
            if !m.mean.is_finite() || !m.std.is_finite() {
                return Err(format!("{field} moments are not finite"));
            }
            if m.std < 0.0 {
                return Err(format!("{field}.dist_std = {} is negative", m.std));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub model_id: String,
    pub modality: ModalityMode,
    pub split: SplitTag,
    pub dataset: String,
    /// Exact text used for compression-based scoring.
    pub text: String,
    pub tokens: Vec<TokenObservation>,
    /// Same target span re-scored under a non-member prefix.
    pub conditional_tokens: Option<Vec<TokenObservation>>,
    /// Same text scored by a reference model; tokenization may differ.
    pub reference_tokens: Option<Vec<TokenObservation>>,
}

impl SampleRecord {
    /// Checks every record-level invariant.
    pub fn validate(&self) -> Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("sample_id is empty".into());
        }
        if self.tokens.is_empty() {
            return Err("tokens is empty".into());
        }
        for (i, t) in self.tokens.iter().enumerate() {
            t.check(&format!("tokens[{i}]"))?;
        }
        if let Some(cond) = &self.conditional_tokens {
            if cond.len() != self.tokens.len() {
                return Err(format!(
                    "conditional_tokens has length {} but tokens has length {}",
                    cond.len(),
                    self.tokens.len()
                ));
            }
            for (i, t) in cond.iter().enumerate() {
                t.check(&format!("conditional_tokens[{i}]"))?;
            }
        }
        if let Some(reference) = &self.reference_tokens {
            if reference.is_empty() {
                return Err("reference_tokens is present but empty".into());
            }
            for (i, t) in reference.iter().enumerate() {
                t.check(&format!("reference_tokens[{i}]"))?;
            }
        }
        Ok(())
    }

    pub fn log_probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.tokens.iter().map(|t| t.log_prob)
    }
}

/// Records in file order. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordSet {
    pub records: Vec<SampleRecord>,
    pub source_path: String,
}

impl RecordSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks sample_id uniqueness per (model_id, modality). Line numbers in
    /// the error assume the canonical layout (header on line 1).
    pub fn check_unique_ids(&self) -> Result<(), RecordError> {
        let mut seen = DuplicateTracker::default();
        for (i, r) in self.records.iter().enumerate() {
            seen.insert(r, i + 2)?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct DuplicateTracker {
    seen: HashMap<(String, ModalityMode, String), usize>,
}

impl DuplicateTracker {
    fn insert(&mut self, r: &SampleRecord, line: usize) -> Result<(), RecordError> {
        let key = (r.model_id.clone(), r.modality, r.sample_id.clone());
        if let Some(&first_line) = self.seen.get(&key) {
            return Err(RecordError::DuplicateId {
                sample_id: r.sample_id.clone(),
                model_id: r.model_id.clone(),
                modality: r.modality,
                first_line,
                second_line: line,
            });
        }
        self.seen.insert(key, line);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parsing

fn schema(field: impl Into<String>, message: impl Into<String>) -> RecordError {
    RecordError::Schema {
        line: 0,
        field: field.into(),
        message: message.into(),
    }
}

fn get_str(obj: &Map<String, Value>, key: &str) -> Result<String, RecordError> {
    match obj.get(key) {
        None => Err(schema(key, "missing required field")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(schema(key, format!("expected string, got {}", kind(other)))),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn get_f64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<f64>, RecordError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_f64()
            .map(Some)
            .ok_or_else(|| schema(format!("{path}.{key}"), "number out of range")),
        Some(other) => Err(schema(
            format!("{path}.{key}"),
            format!("expected number, got {}", kind(other)),
        )),
    }
}

fn parse_token(v: &Value, path: &str) -> Result<TokenObservation, RecordError> {
    let obj = v
        .as_object()
        .ok_or_else(|| schema(path, format!("expected object, got {}", kind(v))))?;
    let token_id = match obj.get("token_id") {
        None => return Err(schema(format!("{path}.token_id"), "missing required field")),
        Some(Value::Number(n)) => n.as_u64().ok_or_else(|| {
            schema(
                format!("{path}.token_id"),
                format!("expected non-negative integer, got {n}"),
            )
        })?,
        Some(other) => {
            return Err(schema(
                format!("{path}.token_id"),
                format!("expected integer, got {}", kind(other)),
            ))
        }
    };
    let log_prob = get_f64(obj, "log_prob", path)?
        .ok_or_else(|| schema(format!("{path}.log_prob"), "missing required field"))?;
    let moments = match (
        get_f64(obj, "dist_mean", path)?,
        get_f64(obj, "dist_std", path)?,
    ) {
        (Some(mean), Some(std)) => Some(Moments { mean, std }),
        (None, None) => None,
        (Some(_), None) => {
            return Err(schema(
                format!("{path}.dist_std"),
                "dist_mean present without dist_std (moments must be paired)",
            ))
        }
        (None, Some(_)) => {
            return Err(schema(
                format!("{path}.dist_mean"),
                "dist_std present without dist_mean (moments must be paired)",
            ))
        }
    };
    Ok(TokenObservation {
        token_id,
        log_prob,
        moments,
    })
}

fn parse_tokens(
    obj: &Map<String, Value>,
    key: &str,
) -> Result<Option<Vec<TokenObservation>>, RecordError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| parse_token(v, &format!("{key}[{i}]")))
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(other) => Err(schema(key, format!("expected array, got {}", kind(other)))),
    }
}

fn parse_enum<T: FromStr<Err = String>>(
    obj: &Map<String, Value>,
    key: &str,
) -> Result<T, RecordError> {
    get_str(obj, key)?.parse().map_err(|e: String| schema(key, e))
}

/// Parses and validates one JSONL element. Errors carry line 0; callers
/// that know the line number re-annotate.
pub fn parse_record_line(line: &[u8]) -> Result<SampleRecord, RecordError> {
    let text = std::str::from_utf8(line).map_err(|e| schema("$", format!("not UTF-8: {e}")))?;
    let value: Value =
        serde_json::from_str(text.trim_end_matches('\r')).map_err(|e| schema("$", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("$", format!("expected object, got {}", kind(&value))))?;

    let tokens = parse_tokens(obj, "tokens")?
        .ok_or_else(|| schema("tokens", "missing required field"))?;
    let record = SampleRecord {
        sample_id: get_str(obj, "sample_id")?,
        model_id: get_str(obj, "model_id")?,
        modality: parse_enum(obj, "modality")?,
        split: parse_enum(obj, "split")?,
        dataset: get_str(obj, "dataset")?,
        text: get_str(obj, "text")?,
        tokens,
        conditional_tokens: parse_tokens(obj, "conditional_tokens")?,
        reference_tokens: parse_tokens(obj, "reference_tokens")?,
    };
    record
        .validate()
        .map_err(|message| RecordError::Invariant { line: 0, message })?;
    Ok(record)
}

fn check_header(line: &str) -> Result<(), RecordError> {
    let header = |message: String| RecordError::Header { line: 1, message };
    let value: Value = serde_json::from_str(line.trim_end_matches('\r'))
        .map_err(|e| header(format!("not JSON: {e}")))?;
    let format = value.get("format").and_then(Value::as_str);
    let version = value.get("version").and_then(Value::as_u64);
    match (format, version) {
        (Some(FORMAT_NAME), Some(FORMAT_VERSION)) => Ok(()),
        (Some(FORMAT_NAME), v) => Err(header(format!(
            "unsupported version {v:?} (expected {FORMAT_VERSION})"
        ))),
        _ => Err(header(format!(
            "expected {{\"format\":\"{FORMAT_NAME}\",\"version\":{FORMAT_VERSION}}}"
        ))),
    }
}

/// Streams a record file, handing each validated record to `visit` with its
/// line number. Only one record is alive at a time.
pub fn stream_records<F>(path: &Path, mut visit: F) -> Result<(), RecordError>
where
    F: FnMut(usize, SampleRecord) -> Result<(), RecordError>,
{
    let io = |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    let mut seen_header = false;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf).map_err(io)? == 0 {
            break;
        }
        line_no += 1;
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        if !seen_header {
            let text = std::str::from_utf8(&buf).map_err(|_| RecordError::Header {
                line: 1,
                message: "not UTF-8".into(),
            })?;
            check_header(text)?;
            seen_header = true;
            continue;
        }
        if buf.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record = parse_record_line(&buf).map_err(|e| e.at_line(line_no))?;
        visit(line_no, record)?;
    }
    if !seen_header {
        return Err(RecordError::Header {
            line: 1,
            message: "file is empty".into(),
        });
    }
    Ok(())
}

/// Loads a record file in file order, rejecting duplicate sample ids.
pub fn load_record_set(path: impl AsRef<Path>) -> Result<RecordSet, RecordError> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut seen = DuplicateTracker::default();
    stream_records(path, |line, record| {
        seen.insert(&record, line)?;
        records.push(record);
        Ok(())
    })?;
    Ok(RecordSet {
        records,
        source_path: path.display().to_string(),
    })
}

/// Outcome of a full validation pass.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub n_records: usize,
    pub errors: Vec<RecordError>,
}

/// Validates a file without retaining records, collecting every
/// line-level error instead of stopping at the first one. IO errors and a
/// bad header abort the pass.
pub fn validate_file(path: impl AsRef<Path>) -> Result<ValidationReport, RecordError> {
    let path = path.as_ref();
    let io = |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut reader = BufReader::new(file);
    let mut report = ValidationReport::default();
    let mut seen = DuplicateTracker::default();
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf).map_err(io)? == 0 {
            break;
        }
        line_no += 1;
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        if line_no == 1 {
            let text = String::from_utf8_lossy(&buf);
            check_header(&text)?;
            continue;
        }
        if buf.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match parse_record_line(&buf) {
            Ok(record) => {
                report.n_records += 1;
                if let Err(e) = seen.insert(&record, line_no) {
                    report.errors.push(e);
                }
            }
            Err(e) => report.errors.push(e.at_line(line_no)),
        }
    }
    if line_no == 0 {
        return Err(RecordError::Header {
            line: 1,
            message: "file is empty".into(),
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Canonical serialization

#[derive(Serialize)]
struct TokenOut {
    token_id: u64,
    log_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dist_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dist_std: Option<f64>,
}

impl From<&TokenObservation> for TokenOut {
    fn from(t: &TokenObservation) -> Self {
        TokenOut {
            token_id: t.token_id,
            log_prob: t.log_prob,
            dist_mean: t.moments.map(|m| m.mean),
            dist_std: t.moments.map(|m| m.std),
        }
    }
}

// Field order here is the canonical key order of the format.
#[derive(Serialize)]
struct RecordOut<'a> {
    sample_id: &'a str,
    model_id: &'a str,
    modality: ModalityMode,
    split: SplitTag,
    dataset: &'a str,
    text: &'a str,
    tokens: Vec<TokenOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conditional_tokens: Option<Vec<TokenOut>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_tokens: Option<Vec<TokenOut>>,
}

fn tokens_out(tokens: &[TokenObservation]) -> Vec<TokenOut> {
    tokens.iter().map(TokenOut::from).collect()
}

/// Canonical single-line JSON for one record (no trailing newline).
pub fn serialize_record(r: &SampleRecord) -> String {
    let out = RecordOut {
        sample_id: &r.sample_id,
        model_id: &r.model_id,
        modality: r.modality,
        split: r.split,
        dataset: &r.dataset,
        text: &r.text,
        tokens: tokens_out(&r.tokens),
        conditional_tokens: r.conditional_tokens.as_deref().map(tokens_out),
        reference_tokens: r.reference_tokens.as_deref().map(tokens_out),
    };
    serde_json::to_string(&out).expect("record serialization cannot fail")
}

pub fn header_line() -> String {
    format!("{{\"format\":\"{FORMAT_NAME}\",\"version\":{FORMAT_VERSION}}}")
}

/// Writes the header and records in canonical form to any sink.
pub fn write_records<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a SampleRecord>,
) -> std::io::Result<()> {
    writeln!(out, "{}", header_line())?;
    for r in records {
        writeln!(out, "{}", serialize_record(r))?;
    }
    out.flush()
}

pub fn write_record_set(records: &RecordSet, path: impl AsRef<Path>) -> Result<(), RecordError> {
    let path = path.as_ref();
    let io = |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_records(BufWriter::new(file), &records.records).map_err(io)
}
