//! Ground-truth record sets from a byte-level bigram model.
//!
//! The target model is trained on the member corpus only, so members carry a
//! real (if small) memorization signal. ID non-members come from the same
//! generator, OOD non-members from a generator with different symbol
//! frequencies. `ood_shift` adds a constant to every target log-prob of OOD
//! records in the V+T modality, standing in for an input-dependent
//! likelihood bias that the T-only view does not see.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{ModalityMode, Moments, RecordSet, SampleRecord, SplitTag, TokenObservation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("symbol {0:#04x} is not in the model vocabulary")]
    UnknownSymbol(u8),
    #[error("text has {0} symbols; at least 2 are needed")]
    TooShort(usize),
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("ood_shift {shift} pushes a log-prob of record {sample_id} above zero")]
    ShiftOverflow { sample_id: String, shift: f64 },
}

/// Symbol joining prefix shots; never produced by the generators.
pub const SEPARATOR: u8 = b' ';

/// Generator alphabet: the 94 printable non-space ASCII symbols.
pub fn generator_alphabet() -> Vec<u8> {
    (b'!'..=b'~').collect()
}

/// Model vocabulary: generator alphabet plus the separator.
pub fn oracle_vocab() -> Vec<u8> {
    let mut v = generator_alphabet();
    v.push(SEPARATOR);
    v.sort_unstable();
    v
}

/// Log-probability table with per-context moments.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    /// Row-major `V x V`; row = context symbol index.
    log_p: Vec<f64>,
    moments: Vec<Moments>,
}

impl Table {
    fn from_probabilities(v: usize, probs: &[f64]) -> Self {
        let log_p: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let moments = (0..v)
            .map(|a| row_moments(&probs[a * v..(a + 1) * v], &log_p[a * v..(a + 1) * v]))
            .collect();
        Self { log_p, moments }
    }
}

/// Mean and standard deviation of `ln p` under `p`. Accumulates around the
/// first entry so a constant row gives exactly zero spread.
fn row_moments(p: &[f64], log_p: &[f64]) -> Moments {
    let pivot = log_p[0];
    let (mut s1, mut s2) = (0.0, 0.0);
    for (&pi, &li) in p.iter().zip(log_p) {
        let d = li - pivot;
        s1 += pi * d;
        s2 += pi * d * d;
    }
    Moments {
        mean: pivot + s1,
        std: (s2 - s1 * s1).max(0.0).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vec<u8>,
    index: [Option<u8>; 256],
    counts: Vec<u64>,
    alpha: f64,
    table: Table,
}

fn build_index(vocab: &[u8]) -> [Option<u8>; 256] {
    let mut index = [None; 256];
    for (i, &b) in vocab.iter().enumerate() {
        index[b as usize] = Some(i as u8);
    }
    index
}

fn bigram_counts(index: &[Option<u8>; 256], v: usize, corpus: &[Vec<u8>]) -> Result<Vec<u64>, SynthError> {
    let mut counts = vec![0u64; v * v];
    for text in corpus {
        let ids = encode(index, text)?;
        for w in ids.windows(2) {
            counts[w[0] * v + w[1]] += 1;
        }
    }
    Ok(counts)
}

fn encode(index: &[Option<u8>; 256], text: &[u8]) -> Result<Vec<usize>, SynthError> {
    text.iter()
        .map(|&b| index[b as usize].map(usize::from).ok_or(SynthError::UnknownSymbol(b)))
        .collect()
}

fn smoothed(counts: &[u64], v: usize, alpha: f64) -> Vec<f64> {
    let mut probs = vec![0.0; v * v];
    for a in 0..v {
        let row = &counts[a * v..(a + 1) * v];
        let total = row.iter().sum::<u64>() as f64 + alpha * v as f64;
        for b in 0..v {
            probs[a * v + b] = (row[b] as f64 + alpha) / total;
        }
    }
    probs
}

impl ToyModel {
    /// Trains over an explicit vocabulary. `vocab` is deduplicated and sorted.
    pub fn train_with_vocab(vocab: &[u8], corpus: &[Vec<u8>], alpha: f64) -> Result<Self, SynthError> {
        if corpus.is_empty() {
            return Err(SynthError::EmptyCorpus);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(SynthError::BadAlpha(alpha));
        }
        let mut vocab = vocab.to_vec();
        vocab.sort_unstable();
        vocab.dedup();
        let index = build_index(&vocab);
        let v = vocab.len();
        let counts = bigram_counts(&index, v, corpus)?;
        let table = Table::from_probabilities(v, &smoothed(&counts, v, alpha));
        Ok(Self {
            vocab,
            index,
            counts,
            alpha,
            table,
        })
    }

    pub fn vocab(&self) -> &[u8] {
        &self.vocab
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn count(&self, context: u8, next: u8) -> Option<u64> {
        let v = self.vocab.len();
        let a = self.index[context as usize]? as usize;
        let b = self.index[next as usize]? as usize;
        Some(self.counts[a * v + b])
    }

    /// `p(next | context)`.
    pub fn probability(&self, context: u8, next: u8) -> Option<f64> {
        let v = self.vocab.len();
        let a = self.index[context as usize]? as usize;
        let b = self.index[next as usize]? as usize;
        Some(self.table.log_p[a * v + b].exp())
    }

    /// Full conditional distribution after `context`, in vocabulary order.
    pub fn distribution(&self, context: u8) -> Option<Vec<f64>> {
        let v = self.vocab.len();
        let a = self.index[context as usize]? as usize;
        Some(self.table.log_p[a * v..(a + 1) * v].iter().map(|l| l.exp()).collect())
    }

    /// Interpolates with a bigram cache of `prefix`:
    /// `(1 - weight) * p(b|a) + weight * q(b|a)`, where `q` is the prefix's
    /// smoothed bigram estimate. Contexts cross separator boundaries inside
    /// the prefix.
    pub fn conditioned_on(&self, prefix: &[u8], weight: f64) -> Result<ConditionedModel<'_>, SynthError> {
        let v = self.vocab.len();
        let prefix_counts = bigram_counts(&self.index, v, &[prefix.to_vec()])?;
        let cache = smoothed(&prefix_counts, v, self.alpha);
        let probs: Vec<f64> = self
            .table
            .log_p
            .iter()
            .zip(&cache)
            .map(|(l, q)| (1.0 - weight) * l.exp() + weight * q)
            .collect();
        Ok(ConditionedModel {
            base: self,
            table: Table::from_probabilities(v, &probs),
        })
    }
}

/// A [`ToyModel`] adapted to an in-context prefix.
#[derive(Debug, Clone)]
pub struct ConditionedModel<'a> {
    base: &'a ToyModel,
    table: Table,
}

impl ConditionedModel<'_> {
    pub fn score(&self, text: &[u8]) -> Result<Vec<TokenObservation>, SynthError> {
        score_table(&self.base.index, self.base.vocab.len(), &self.table, text)
    }
}

/// Trains on the symbols that occur in the corpus.
pub fn train_toy_model(member_corpus: &[Vec<u8>], alpha: f64) -> Result<ToyModel, SynthError> {
    let vocab: Vec<u8> = member_corpus
        .iter()
        .flatten()
        .copied()
        .collect::<HashSet<u8>>()
        .into_iter()
        .collect();
    ToyModel::train_with_vocab(&vocab, member_corpus, alpha)
}

fn score_table(
    index: &[Option<u8>; 256],
    v: usize,
    table: &Table,
    text: &[u8],
) -> Result<Vec<TokenObservation>, SynthError> {
    if text.len() < 2 {
        return Err(SynthError::TooShort(text.len()));
    }
    let ids = encode(index, text)?;
    Ok(ids
        .windows(2)
        .zip(&text[1..])
        .map(|(w, &byte)| {
            let m = table.moments[w[0]];
            TokenObservation::with_moments(u64::from(byte), table.log_p[w[0] * v + w[1]], m.mean, m.std)
        })
        .collect())
}

/// One observation per position `t >= 1`: `ln p(x_t | x_{t-1})` and the
/// exact moments of the conditional distribution. Token ids are byte values.
pub fn score_sequence(model: &ToyModel, text: &[u8]) -> Result<Vec<TokenObservation>, SynthError> {
    score_table(&model.index, model.vocab.len(), &model.table, text)
}

// ---------------------------------------------------------------------------
// Configuration and corpora

fn default_modalities() -> Vec<ModalityMode> {
    vec![ModalityMode::VisionText]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_members: usize,
    pub n_nonmembers_id: usize,
    pub n_nonmembers_ood: usize,
    /// Strings used to train the reference model; same generator as members.
    pub n_reference: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Added to every target log-prob (and `dist_mean`) of OOD records in
    /// the V+T modality.
    pub ood_shift: f64,
    pub recall_prefix_shots: usize,
    /// Interpolation weight of the prefix cache in conditional scoring.
    pub recall_prefix_weight: f64,
    pub alpha: f64,
    pub id_zipf_exponent: f64,
    pub ood_zipf_exponent: f64,
    /// Share of the OOD generator that is uniform over the alphabet.
    pub ood_uniform_mix: f64,
    pub modalities: Vec<ModalityMode>,
    pub model_id: String,
    pub reference_model_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_members: 2000,
            n_nonmembers_id: 2000,
            n_nonmembers_ood: 2000,
            n_reference: 2000,
            seq_len: 32,
            seed: 7,
            ood_shift: 0.0,
            recall_prefix_shots: 4,
            recall_prefix_weight: 0.3,
            alpha: 0.1,
            id_zipf_exponent: 1.0,
            ood_zipf_exponent: 2.0,
            ood_uniform_mix: 0.5,
            modalities: default_modalities(),
            model_id: "toy-bigram".into(),
            reference_model_id: "toy-bigram-reference".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        for (name, n) in [
            ("n_members", self.n_members),
            ("n_nonmembers_id", self.n_nonmembers_id),
            ("n_nonmembers_ood", self.n_nonmembers_ood),
            ("n_reference", self.n_reference),
            ("recall_prefix_shots", self.recall_prefix_shots),
        ] {
            if n < 1 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if !self.ood_shift.is_finite() {
            return bad("ood_shift must be finite".into());
        }
        if !(0.0..1.0).contains(&self.recall_prefix_weight) {
            return bad("recall_prefix_weight must be in [0, 1)".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive".into());
        }
        for (name, s) in [
            ("id_zipf_exponent", self.id_zipf_exponent),
            ("ood_zipf_exponent", self.ood_zipf_exponent),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.ood_uniform_mix) {
            return bad("ood_uniform_mix must be in [0, 1]".into());
        }
        if self.modalities.is_empty() {
            return bad("modalities must not be empty".into());
        }
        let unique: HashSet<_> = self.modalities.iter().collect();
        if unique.len() != self.modalities.len() {
            return bad("modalities must not repeat".into());
        }
        if self.model_id.is_empty() || self.reference_model_id.is_empty() {
            return bad("model ids must not be empty".into());
        }
        Ok(())
    }

    /// Shift applied to OOD target log-probs in `modality`.
    pub fn shift_for(&self, modality: ModalityMode) -> f64 {
        match modality {
            ModalityMode::VisionText => self.ood_shift,
            ModalityMode::TextOnly => 0.0,
        }
    }
}

/// Symbol weights of the ID generator: Zipf over the alphabet in byte order.
pub fn id_weights(config: &SynthConfig) -> Vec<f64> {
    zipf(generator_alphabet().len(), config.id_zipf_exponent)
}

/// Symbol weights of the OOD generator: a steeper Zipf mixed with uniform.
pub fn ood_weights(config: &SynthConfig) -> Vec<f64> {
    let n = generator_alphabet().len();
    let w = config.ood_uniform_mix;
    zipf(n, config.ood_zipf_exponent)
        .into_iter()
        .map(|p| (1.0 - w) * p + w / n as f64)
        .collect()
}

fn zipf(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub member: Vec<Vec<u8>>,
    pub nonmember_id: Vec<Vec<u8>>,
    pub nonmember_ood: Vec<Vec<u8>>,
    /// Training data for the reference model.
    pub reference: Vec<Vec<u8>>,
    /// Non-member shots for conditional scoring.
    pub recall_shots: Vec<Vec<u8>>,
}

impl Corpora {
    /// Prefix fed to conditional scoring: shots joined and terminated by
    /// [`SEPARATOR`].
    pub fn recall_prefix(&self) -> Vec<u8> {
        let mut prefix = Vec::new();
        for shot in &self.recall_shots {
            prefix.extend_from_slice(shot);
            prefix.push(SEPARATOR);
        }
        prefix
    }

    /// Number of member strings that also appear in a non-member corpus.
    pub fn member_overlap(&self) -> usize {
        let nonmembers: HashSet<&Vec<u8>> = self
            .nonmember_id
            .iter()
            .chain(&self.nonmember_ood)
            .chain(&self.recall_shots)
            .collect();
        self.member.iter().filter(|m| nonmembers.contains(m)).count()
    }
}

fn draw(weights: &[f64], n: usize, len: usize, seed: u64, stream: u64) -> Vec<Vec<u8>> {
    let alphabet = generator_alphabet();
    let dist = WeightedIndex::new(weights).expect("generator weights are positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n)
        .map(|_| (0..len).map(|_| alphabet[dist.sample(&mut rng)]).collect())
        .collect()
}

/// Each corpus draws from its own RNG stream, so changing one count leaves
/// the other corpora untouched.
pub fn generate_corpora(config: &SynthConfig) -> Corpora {
    let id = id_weights(config);
    let ood = ood_weights(config);
    let (len, seed) = (config.seq_len, config.seed);
    Corpora {
        member: draw(&id, config.n_members, len, seed, 1),
        nonmember_id: draw(&id, config.n_nonmembers_id, len, seed, 2),
        nonmember_ood: draw(&ood, config.n_nonmembers_ood, len, seed, 3),
        reference: draw(&id, config.n_reference, len, seed, 4),
        recall_shots: draw(&id, config.recall_prefix_shots, len, seed, 5),
    }
}

/// Target and reference models for one synthetic run.
#[derive(Debug, Clone)]
pub struct OracleModels {
    pub target: ToyModel,
    pub reference: ToyModel,
}

impl OracleModels {
    pub fn train(config: &SynthConfig, corpora: &Corpora) -> Result<Self, SynthError> {
        let vocab = oracle_vocab();
        Ok(Self {
            target: ToyModel::train_with_vocab(&vocab, &corpora.member, config.alpha)?,
            reference: ToyModel::train_with_vocab(&vocab, &corpora.reference, config.alpha)?,
        })
    }
}

fn shift_tokens(tokens: &mut [TokenObservation], shift: f64) {
    for t in tokens {
        t.log_prob += shift;
        if let Some(m) = t.moments.as_mut() {
            m.mean += shift;
        }
    }
}

/// Builds one record per corpus string, in split order (member, ID, OOD)
/// and corpus order within a split.
pub fn emit_records(
    models: &OracleModels,
    config: &SynthConfig,
    corpora: &Corpora,
    modality: ModalityMode,
) -> Result<RecordSet, SynthError> {
    let conditioned = models
        .target
        .conditioned_on(&corpora.recall_prefix(), config.recall_prefix_weight)?;
    let shift = config.shift_for(modality);
    let splits = [
        (SplitTag::Member, "synth_train", &corpora.member),
        (SplitTag::NonmemberId, "synth_test", &corpora.nonmember_id),
        (SplitTag::NonmemberOod, "synth_ood", &corpora.nonmember_ood),
    ];
    let mut records = Vec::new();
    for (split, dataset, corpus) in splits {
        for (i, text) in corpus.iter().enumerate() {
            let sample_id = format!("{}-{:05}", split.as_str(), i);
            let mut tokens = score_sequence(&models.target, text)?;
            let mut conditional = conditioned.score(text)?;
            if split == SplitTag::NonmemberOod && shift != 0.0 {
                shift_tokens(&mut tokens, shift);
                shift_tokens(&mut conditional, shift);
                let overflow = tokens
                    .iter()
                    .chain(&conditional)
                    .any(|t| t.log_prob > crate::record::LOG_PROB_SLACK);
                if overflow {
                    return Err(SynthError::ShiftOverflow { sample_id, shift });
                }
            }
            records.push(SampleRecord {
                sample_id,
                model_id: config.model_id.clone(),
                modality,
                split,
                dataset: dataset.to_string(),
                text: String::from_utf8(text.clone()).expect("generator emits ASCII"),
                tokens,
                conditional_tokens: Some(conditional),
                reference_tokens: Some(score_sequence(&models.reference, text)?),
            });
        }
    }
    Ok(RecordSet {
        records,
        source_path: String::new(),
    })
}

/// Total-variation distance between the empirical symbol frequencies of
/// two corpora.
pub fn unigram_tv_distance(a: &[Vec<u8>], b: &[Vec<u8>]) -> f64 {
    fn freqs(c: &[Vec<u8>]) -> [f64; 256] {
        let mut f = [0.0; 256];
        let n: usize = c.iter().map(Vec::len).sum();
        for &byte in c.iter().flatten() {
            f[byte as usize] += 1.0;
        }
        if n > 0 {
            f.iter_mut().for_each(|x| *x /= n as f64);
        }
        f
    }
    let (fa, fb) = (freqs(a), freqs(b));
    0.5 * fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
