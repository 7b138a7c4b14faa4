use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mia_audit::attacks::{AttackConfig, AttackMethod};
use mia_audit::experiment::{
    load_sources, load_synth_config, run_evaluate, run_experiment, run_report, run_score, run_synth,
    ExperimentConfig,
};
use mia_audit::record::{load_record_set, validate_file, RecordError, RecordSet};
use mia_audit::synth::SynthConfig;
use mia_audit::Error;

#[derive(Parser, Debug)]
#[command(name = "mia-audit", version, about = "Membership-inference auditing over log-probability records")]
struct Cli {
    /// JSON config: experiment config, or synth config for `synth`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the synth seed and the bootstrap seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated k_percent values for min_k and min_k_pp.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<f64>>,
    /// Comma-separated methods.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<AttackMethod>>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(0..=9))]
    zlib_level: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check record files against the format.
    Validate { paths: Vec<PathBuf> },
    /// Score record files; writes scores.csv and skips.jsonl.
    Score { records: Vec<PathBuf> },
    /// Evaluate score tables; writes summary.csv, ROC dumps and diagnostics.
    Evaluate { scores: Vec<PathBuf> },
    /// Render a T-only vs V+T table from summary.csv.
    Report { summary: PathBuf },
    /// Generate synthetic record files from the bigram oracle.
    Synth,
    /// Run score, evaluate and report from one experiment config.
    RunExperiment,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Cli {
    fn experiment_config(&self) -> Result<Option<ExperimentConfig>, Error> {
        let Some(path) = &self.config else {
            return Ok(None);
        };
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(k) = &self.k {
            cfg.k_percent_values = Some(k.clone());
        }
        if let Some(z) = self.zlib_level {
            cfg.attack_config.zlib_level = z;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let (Some(seed), Some(b)) = (self.seed, cfg.bootstrap.as_mut()) {
            b.seed = seed;
        }
        Ok(Some(cfg))
    }

    fn output_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| cfg.map(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("audit-out"))
    }
}

fn cmd_validate(paths: &[PathBuf]) -> Result<ExitCode, Error> {
    if paths.is_empty() {
        return Err(usage("validate needs at least one path"));
    }
    let (mut invalid, mut unreadable) = (false, false);
    for path in paths {
        match validate_file(path) {
            Ok(r) if r.errors.is_empty() => println!("{}: ok ({} records)", path.display(), r.n_records),
            Ok(r) => {
                invalid = true;
                for e in &r.errors {
                    eprintln!("{}: {e}", path.display());
                }
                eprintln!("{}: {} invalid line(s)", path.display(), r.errors.len());
            }
            Err(e @ RecordError::Io { .. }) => {
                unreadable = true;
                eprintln!("error: {e}");
            }
            Err(e) => {
                invalid = true;
                eprintln!("{}: {e}", path.display());
            }
        }
    }
    Ok(match (invalid, unreadable) {
        (true, _) => ExitCode::from(2),
        (false, true) => ExitCode::from(1),
        _ => ExitCode::SUCCESS,
    })
}

fn cmd_score(cli: &Cli, records: &[PathBuf]) -> Result<(), Error> {
    let cfg = cli.experiment_config()?;
    let set = if records.is_empty() {
        let cfg = cfg
            .as_ref()
            .ok_or_else(|| usage("score needs record files or --config"))?;
        cfg.validate()?;
        load_sources(&cfg.record_paths)?
    } else {
        let mut all = RecordSet::default();
        for p in records {
            all.records.extend(load_record_set(p)?.records);
        }
        all.check_unique_ids()?;
        all
    };
    let (methods, attack, ks) = match &cfg {
        Some(c) => (c.methods.clone(), c.attack_config.clone(), c.k_values()),
        None => {
            let attack = AttackConfig {
                zlib_level: cli.zlib_level.unwrap_or(mia_audit::attacks::DEFAULT_ZLIB_LEVEL),
                ..AttackConfig::default()
            };
            let ks = cli.k.clone().unwrap_or_else(|| vec![attack.k_percent]);
            (cli.methods.clone().unwrap_or_else(|| AttackMethod::ALL.to_vec()), attack, ks)
        }
    };
    for &k in &ks {
        AttackConfig { k_percent: k, ..attack.clone() }
            .validate()
            .map_err(|e| usage(e.to_string()))?;
    }
    let dir = cli.output_dir(cfg.as_ref());
    let (rows, skips) = run_score(&set, &methods, &attack, &ks, &dir)?;
    println!("{} scores, {} skipped -> {}", rows.len(), skips.len(), dir.display());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, scores: &[PathBuf]) -> Result<(), Error> {
    let cfg = cli.experiment_config()?;
    let dir = cli.output_dir(cfg.as_ref());
    let scores = if scores.is_empty() {
        vec![dir.join("scores.csv")]
    } else {
        scores.to_vec()
    };
    let options = cfg.as_ref().map(ExperimentConfig::evaluate_options).unwrap_or_default();
    let eval = run_evaluate(&scores, &options, &dir)?;
    for s in &eval.skips {
        eprintln!(
            "skipped {} / {} / {} / {}: {}",
            s.model_id, s.method, s.modality, s.split_pair, s.reason
        );
    }
    println!("{} cells, {} skipped -> {}", eval.cells.len(), eval.skips.len(), dir.display());
    Ok(())
}

fn cmd_report(cli: &Cli, summary: &Path) -> Result<(), Error> {
    let dir = cli.output_dir.clone().unwrap_or_else(|| {
        summary.parent().map(Path::to_path_buf).unwrap_or_default()
    });
    let table = run_report(summary, &dir)?;
    print!("{}", table.render_text());
    Ok(())
}

fn cmd_synth(cli: &Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => load_synth_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dir = cli.output_dir.clone().unwrap_or_else(|| PathBuf::from("synth-out"));
    let files = run_synth(&cfg, &dir)?;
    for f in &files {
        println!("{}: {} records", dir.join(&f.path).display(), f.n_records);
    }
    Ok(())
}

fn cmd_run_experiment(cli: &Cli) -> Result<(), Error> {
    let cfg = cli
        .experiment_config()?
        .ok_or_else(|| usage("run-experiment needs --config"))?;
    cfg.validate()?;
    let outcome = run_experiment(&cfg)?;
    match &outcome.report {
        Some(table) => print!("{}", table.render_text()),
        None => println!(
            "{} cells written to {}; single modality, no comparison report",
            outcome.evaluation.cells.len(),
            cfg.output_dir.display()
        ),
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("MIA_AUDIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match &cli.command {
        Command::Validate { paths } => cmd_validate(paths),
        Command::Score { records } => cmd_score(&cli, records).map(|_| ExitCode::SUCCESS),
        Command::Evaluate { scores } => cmd_evaluate(&cli, scores).map(|_| ExitCode::SUCCESS),
        Command::Report { summary } => cmd_report(&cli, summary).map(|_| ExitCode::SUCCESS),
        Command::Synth => cmd_synth(&cli).map(|_| ExitCode::SUCCESS),
        Command::RunExperiment => cmd_run_experiment(&cli).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
