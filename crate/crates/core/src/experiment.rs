//! Audit runs: configuration, the score → evaluate → report chain, and the
//! synthetic record generator driver.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackMethod, SkipEntry};
use crate::evaluate::{evaluate_scores, read_summary, write_evaluation, BootstrapConfig, EvaluateOptions, Evaluation, SplitPair};
use crate::record::{load_record_set, write_record_set, ModalityMode, RecordSet, SplitTag, FORMAT_VERSION};
use crate::report::{build_report, ReportTable};
use crate::scores::{read_scores, score_records, write_scores, write_skips, ScoreRow};
use crate::synth::{emit_records, generate_corpora, OracleModels, SynthConfig};
use crate::Error;

pub const TOOL_NAME: &str = "mia-audit";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSource {
    pub modality: ModalityMode,
    pub split: SplitTag,
    pub path: PathBuf,
}

fn default_methods() -> Vec<AttackMethod> {
    AttackMethod::ALL.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("audit-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub record_paths: Vec<RecordSource>,
    #[serde(default = "default_methods")]
    pub methods: Vec<AttackMethod>,
    /// k values for Min-K% and Min-K%++; defaults to `attack_config.k_percent`.
    #[serde(default)]
    pub k_percent_values: Option<Vec<f64>>,
    #[serde(default)]
    pub attack_config: AttackConfig,
    #[serde(default = "SplitPair::default_pairs")]
    pub split_pairs: Vec<SplitPair>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for src in &mut cfg.record_paths {
            if src.path.is_relative() {
                src.path = base.join(&src.path);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn k_values(&self) -> Vec<f64> {
        self.k_percent_values
            .clone()
            .unwrap_or_else(|| vec![self.attack_config.k_percent])
    }

    pub fn evaluate_options(&self) -> EvaluateOptions {
        EvaluateOptions {
            split_pairs: self.split_pairs.clone(),
            bootstrap: self.bootstrap,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.record_paths.is_empty() {
            return bad("record_paths is empty".into());
        }
        for src in &self.record_paths {
            if !src.path.is_file() {
                return bad(format!("record file {} does not exist", src.path.display()));
            }
        }
        if self.methods.is_empty() {
            return bad("methods is empty".into());
        }
        if self.split_pairs.is_empty() {
            return bad("split_pairs is empty".into());
        }
        let ks = self.k_values();
        if ks.is_empty() {
            return bad("k_percent_values is empty".into());
        }
        for &k in &ks {
            AttackConfig {
                k_percent: k,
                ..self.attack_config.clone()
            }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        self.attack_config.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(b) = self.bootstrap {
            if b.n_resamples == 0 {
                return bad("bootstrap.n_resamples must be at least 1".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the config's canonical JSON.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Loads every configured file into one set, checking that each record
/// matches the (modality, split) declared for its file.
pub fn load_sources(sources: &[RecordSource]) -> Result<RecordSet, Error> {
    let mut all = RecordSet::default();
    let mut seen: HashMap<(String, ModalityMode, String), String> = HashMap::new();
    for src in sources {
        let set = load_record_set(&src.path)?;
        for r in set.records {
            if r.modality != src.modality || r.split != src.split {
                return Err(Error::Config(format!(
                    "{}: record `{}` is {}/{} but the file is declared {}/{}",
                    src.path.display(),
                    r.sample_id,
                    r.modality,
                    r.split,
                    src.modality,
                    src.split
                )));
            }
            let key = (r.model_id.clone(), r.modality, r.sample_id.clone());
            if let Some(prev) = seen.insert(key, src.path.display().to_string()) {
                return Err(Error::Config(format!(
                    "sample_id `{}` ({}, {}) appears in both {} and {}",
                    r.sample_id,
                    r.model_id,
                    r.modality,
                    prev,
                    src.path.display()
                )));
            }
            all.records.push(r);
        }
    }
    all.source_path = sources
        .iter()
        .map(|s| s.path.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    Ok(all)
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Scores records and writes `scores.csv` and `skips.jsonl` into `dir`.
pub fn run_score(
    records: &RecordSet,
    methods: &[AttackMethod],
    config: &AttackConfig,
    k_values: &[f64],
    dir: &Path,
) -> Result<(Vec<ScoreRow>, Vec<SkipEntry>), Error> {
    ensure_dir(dir)?;
    let (rows, skips) = score_records(records, methods, config, k_values);
    write_scores(&dir.join("scores.csv"), &rows)?;
    write_skips(&dir.join("skips.jsonl"), &skips)?;
    Ok((rows, skips))
}

/// Evaluates score tables and writes the evaluation artifacts into `dir`.
pub fn run_evaluate(score_files: &[PathBuf], options: &EvaluateOptions, dir: &Path) -> Result<Evaluation, Error> {
    let mut rows = Vec::new();
    for f in score_files {
        rows.extend(read_scores(f)?);
    }
    ensure_dir(dir)?;
    let eval = evaluate_scores(&rows, options)?;
    write_evaluation(dir, &eval)?;
    Ok(eval)
}

/// Renders `report.txt` and `report.csv` from a summary file.
pub fn run_report(summary_path: &Path, dir: &Path) -> Result<ReportTable, Error> {
    let table = build_report(&read_summary(summary_path)?)?;
    ensure_dir(dir)?;
    let txt = dir.join("report.txt");
    fs::write(&txt, table.render_text()).map_err(|e| Error::io(&txt, e))?;
    table.write_csv(&dir.join("report.csv"))?;
    Ok(table)
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'a str,
    tool_version: &'a str,
    format_version: u64,
    config_sha256: String,
    config: &'a ExperimentConfig,
    k_percent_values: Vec<f64>,
    n_records: usize,
    n_scores: usize,
    n_skips: usize,
    n_cells: usize,
    n_skipped_cells: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub evaluation: Evaluation,
    /// `None` when the run covers a single modality.
    pub report: Option<ReportTable>,
    pub skips: Vec<SkipEntry>,
}

/// Full chain: score → evaluate → report, plus `run_manifest.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, Error> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let records = load_sources(&cfg.record_paths)?;
    let (rows, skips) = run_score(&records, &cfg.methods, &cfg.attack_config, &cfg.k_values(), dir)?;
    let evaluation = run_evaluate(&[dir.join("scores.csv")], &cfg.evaluate_options(), dir)?;
    let modalities: BTreeSet<ModalityMode> = cfg.record_paths.iter().map(|s| s.modality).collect();
    let report = if modalities.len() > 1 {
        Some(run_report(&dir.join("summary.csv"), dir)?)
    } else {
        None
    };

    let manifest = RunManifest {
        tool: TOOL_NAME,
        tool_version: TOOL_VERSION,
        format_version: FORMAT_VERSION,
        config_sha256: cfg.digest(),
        config: cfg,
        k_percent_values: cfg.k_values(),
        n_records: records.len(),
        n_scores: rows.len(),
        n_skips: skips.len(),
        n_cells: evaluation.cells.len(),
        n_skipped_cells: evaluation.skips.len(),
    };
    write_json(&dir.join("run_manifest.json"), &manifest)?;
    Ok(RunOutcome {
        evaluation,
        report,
        skips,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthFile {
    pub modality: ModalityMode,
    pub split: SplitTag,
    pub path: String,
    pub n_records: usize,
}

#[derive(Debug, Serialize)]
struct SynthManifest<'a> {
    tool: &'a str,
    tool_version: &'a str,
    format_version: u64,
    config: &'a SynthConfig,
    vocab_size: usize,
    member_overlap: usize,
    files: &'a [SynthFile],
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Generates corpora, trains the oracle models and writes one record file
/// per (modality, split) as `<modality>_<split>.jsonl`, plus
/// `synth_manifest.json`. File paths in the manifest are relative to `dir`.
pub fn run_synth(config: &SynthConfig, dir: &Path) -> Result<Vec<SynthFile>, Error> {
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    let corpora = generate_corpora(config);
    let overlap = corpora.member_overlap();
    if overlap > 0 {
        eprintln!("warning: {overlap} member strings also occur among non-member strings");
    }
    let models = OracleModels::train(config, &corpora)?;
    ensure_dir(dir)?;

    let mut files = Vec::new();
    for &modality in &config.modalities {
        let set = emit_records(&models, config, &corpora, modality)?;
        for split in [SplitTag::Member, SplitTag::NonmemberId, SplitTag::NonmemberOod] {
            let name = format!("{modality}_{split}.jsonl");
            let part = RecordSet {
                records: set.records.iter().filter(|r| r.split == split).cloned().collect(),
                source_path: name.clone(),
            };
            write_record_set(&part, dir.join(&name))?;
            files.push(SynthFile {
                modality,
                split,
                path: name,
                n_records: part.len(),
            });
        }
    }
    let manifest = SynthManifest {
        tool: TOOL_NAME,
        tool_version: TOOL_VERSION,
        format_version: FORMAT_VERSION,
        config,
        vocab_size: models.target.vocab().len(),
        member_overlap: overlap,
        files: &files,
    };
    write_json(&dir.join("synth_manifest.json"), &manifest)?;
    Ok(files)
}

/// Experiment config covering every file a synth run produced.
pub fn experiment_for_synth(files: &[SynthFile], records_dir: &Path, output_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        record_paths: files
            .iter()
            .map(|f| RecordSource {
                modality: f.modality,
                split: f.split,
                path: records_dir.join(&f.path),
            })
            .collect(),
        methods: default_methods(),
        k_percent_values: None,
        attack_config: AttackConfig::default(),
        split_pairs: SplitPair::default_pairs(),
        output_dir: output_dir.to_path_buf(),
        bootstrap: None,
    }
}
