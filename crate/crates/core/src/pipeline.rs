//! The two-step attack: generate candidates from a seed review, keep the ones
//! whose predicted sentiment matches the seed.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    decode, encode_tokens, write_jsonl, CorpusError, Review, Sentiment, TokenSequence, Vocabulary, BOR_ID,
};
use crate::langmodel::{sample, Clamp, LanguageModel, LmError, SamplerConfig};
use crate::seeds::derive_candidate;
use crate::sentiment::{ClassifierError, SentimentPredictor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid attack configuration: {0}")]
    BadConfig(String),
    #[error("no seed reviews given")]
    NoSeeds,
    #[error("seed review {0:?} is not a real review")]
    FakeSeed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

pub const DEFAULT_N_PER_SEED: usize = 20;

/// How the sentiment unit is clamped while generating.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClampPolicy {
    #[default]
    Off,
    /// The same clamp for every seed.
    Fixed { neuron: usize, value: f64 },
    /// Clamp to `polarity * sign(seed sentiment)`.
    FollowSeed { neuron: usize, polarity: f64 },
}

impl ClampPolicy {
    pub fn clamp_for(&self, sentiment: Sentiment) -> Option<Clamp> {
        match *self {
            ClampPolicy::Off => None,
            ClampPolicy::Fixed { neuron, value } => Some(Clamp { neuron, value }),
            ClampPolicy::FollowSeed { neuron, polarity } => Some(Clamp { neuron, value: polarity * sentiment.sign() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub n_per_seed: usize,
    /// `rng_seed` and `clamp` are ignored here; both are set per candidate.
    pub sampler: SamplerConfig,
    /// Minimum classifier confidence in the seed's sentiment for acceptance.
    pub min_score: Option<f64>,
    pub clamp: ClampPolicy,
    /// Base seed from which every candidate's sampler seed is derived.
    pub rng_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            n_per_seed: DEFAULT_N_PER_SEED,
            sampler: SamplerConfig::default(),
            min_score: None,
            clamp: ClampPolicy::Off,
            rng_seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<(), PipelineError> {
        if self.n_per_seed == 0 {
            return Err(PipelineError::BadConfig("n_per_seed must be at least 1".into()));
        }
        if self.sampler.min_len == 0 {
            return Err(PipelineError::BadConfig("sampler.min_len must be at least 1 so reviews are non-empty".into()));
        }
        if let Some(s) = self.min_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(PipelineError::BadConfig(format!("min_score must lie in [0, 1], got {s}")));
            }
        }
        let probe = SamplerConfig { clamp: self.clamp.clamp_for(Sentiment::Positive), ..self.sampler.clone() };
        probe.validate(vocab_size)?;
        Ok(())
    }
}

/// Conditioning context for a seed: `<bor>` followed by the whole seed text.
pub fn seed_context(vocab: &Vocabulary, seed: &Review) -> TokenSequence {
    let mut ids = vec![BOR_ID];
    ids.extend(encode_tokens(vocab, &seed.text));
    TokenSequence(ids)
}

pub fn candidate_id(seed_id: &str, index: usize) -> String {
    format!("{seed_id}#{index}")
}

/// `n` fake continuations of `seed`. Candidate `i` samples with the seed
/// `derive_candidate(base_seed, seed.id, i)`.
pub fn generate_candidates<M: LanguageModel>(
    lm: &M,
    vocab: &Vocabulary,
    seed: &Review,
    n: usize,
    sampler: &SamplerConfig,
    base_seed: u64,
) -> Result<Vec<Review>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::BadConfig("n must be at least 1".into()));
    }
    let context = seed_context(vocab, seed);
    (0..n)
        .map(|i| {
            let cfg = SamplerConfig { rng_seed: derive_candidate(base_seed, &seed.id, i), ..sampler.clone() };
            let out = sample(lm, &context, &cfg)?;
            let text = decode(vocab, &out)?;
            Ok(Review::fake(candidate_id(&seed.id, i), text, seed.sentiment, seed.id.clone())?)
        })
        .collect()
}

/// Split `candidates` into (accepted, rejected), both in input order.
pub fn validate<C: SentimentPredictor + ?Sized>(
    clf: &C,
    seed_sentiment: Sentiment,
    candidates: Vec<Review>,
    min_score: Option<f64>,
) -> Result<(Vec<Review>, Vec<Review>), ClassifierError> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for c in candidates {
        let p = clf.predict(&c.text)?;
        let keep = p.label == seed_sentiment && min_score.is_none_or(|m| p.confidence_in(seed_sentiment) >= m);
        if keep {
            accepted.push(c);
        } else {
            rejected.push(c);
        }
    }
    Ok((accepted, rejected))
}

/// Everything produced for one seed review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed_id: String,
    pub seed_sentiment: Sentiment,
    pub generated: usize,
    /// Candidates whose predicted label matched the seed, before any `min_score` filter.
    pub preserved: usize,
    pub accepted: Vec<Review>,
    pub rejected: usize,
    pub rng_seeds: Vec<u64>,
}

pub fn attack_seed<M, C>(
    lm: &M,
    vocab: &Vocabulary,
    clf: &C,
    seed: &Review,
    config: &AttackConfig,
) -> Result<SeedOutcome, PipelineError>
where
    M: LanguageModel,
    C: SentimentPredictor + ?Sized,
{
    if seed.seed_id.is_some() {
        return Err(PipelineError::FakeSeed(seed.id.clone()));
    }
    let sampler = SamplerConfig { clamp: config.clamp.clamp_for(seed.sentiment), ..config.sampler.clone() };
    let candidates = generate_candidates(lm, vocab, seed, config.n_per_seed, &sampler, config.rng_seed)?;
    let generated = candidates.len();
    let mut preserved = 0;
    for c in &candidates {
        if clf.predict(&c.text)?.label == seed.sentiment {
            preserved += 1;
        }
    }
    let (accepted, rejected) = validate(clf, seed.sentiment, candidates, config.min_score)?;
    Ok(SeedOutcome {
        seed_id: seed.id.clone(),
        seed_sentiment: seed.sentiment,
        generated,
        preserved,
        rejected: rejected.len(),
        accepted,
        rng_seeds: (0..generated).map(|i| derive_candidate(config.rng_seed, &seed.id, i)).collect(),
    })
}

/// The fake-review pool together with per-seed bookkeeping, in seed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeReviewPool {
    pub n_per_seed: usize,
    pub rng_base: u64,
    pub outcomes: Vec<SeedOutcome>,
}

impl FakeReviewPool {
    pub fn accepted(&self) -> impl Iterator<Item = &Review> {
        self.outcomes.iter().flat_map(|o| o.accepted.iter())
    }

    pub fn accepted_count(&self) -> usize {
        self.outcomes.iter().map(|o| o.accepted.len()).sum()
    }

    pub fn rejected_counts(&self) -> Vec<(&str, usize)> {
        self.outcomes.iter().map(|o| (o.seed_id.as_str(), o.rejected)).collect()
    }

    pub fn preservation_report(&self) -> PreservationReport {
        PreservationReport::from_outcomes(&self.outcomes)
    }
}

fn check_seeds(seeds: &[Review]) -> Result<(), PipelineError> {
    if seeds.is_empty() {
        return Err(PipelineError::NoSeeds);
    }
    Ok(())
}

/// Generate and validate for every seed. Seeds run in parallel; the pool is
/// assembled in seed order.
pub fn run_attack<M, C>(
    lm: &M,
    vocab: &Vocabulary,
    clf: &C,
    seeds: &[Review],
    config: &AttackConfig,
) -> Result<FakeReviewPool, PipelineError>
where
    M: LanguageModel + Sync,
    C: SentimentPredictor + Sync + ?Sized,
{
    check_seeds(seeds)?;
    config.validate(lm.vocab_size())?;
    let outcomes = seeds.par_iter().map(|s| attack_seed(lm, vocab, clf, s, config)).collect::<Result<Vec<_>, _>>()?;
    Ok(FakeReviewPool { n_per_seed: config.n_per_seed, rng_base: config.rng_seed, outcomes })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config_digest: String,
    seeds: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// `run_attack` with one checkpoint file per finished seed under `dir`.
/// Seeds already on disk for the same `config_digest` are loaded instead of
/// regenerated; a digest mismatch discards the old checkpoints. On error,
/// every seed finished so far stays on disk.
pub fn run_attack_resumable<M, C>(
    lm: &M,
    vocab: &Vocabulary,
    clf: &C,
    seeds: &[Review],
    config: &AttackConfig,
    dir: &Path,
    config_digest: &str,
) -> Result<FakeReviewPool, PipelineError>
where
    M: LanguageModel + Sync,
    C: SentimentPredictor + Sync + ?Sized,
{
    check_seeds(seeds)?;
    config.validate(lm.vocab_size())?;
    let seed_dir = dir.join("seeds");
    let header_path = dir.join("checkpoint.json");
    let header = CheckpointHeader { config_digest: config_digest.to_string(), seeds: seeds.len() };
    let current = fs::read(&header_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<CheckpointHeader>(&b).ok())
        .is_some_and(|h| h.config_digest == header.config_digest && h.seeds == header.seeds);
    if !current && seed_dir.exists() {
        fs::remove_dir_all(&seed_dir)?;
    }
    fs::create_dir_all(&seed_dir)?;
    write_atomic(&header_path, &serde_json::to_vec_pretty(&header)?)?;

    let outcomes = seeds
        .par_iter()
        .enumerate()
        .map(|(i, seed)| {
            let path = seed_dir.join(format!("{i:06}.json"));
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(o) = serde_json::from_slice::<SeedOutcome>(&bytes) {
                    if o.seed_id == seed.id {
                        return Ok(o);
                    }
                }
            }
            let o = attack_seed(lm, vocab, clf, seed, config)?;
            write_atomic(&path, &serde_json::to_vec(&o)?)?;
            Ok(o)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(FakeReviewPool { n_per_seed: config.n_per_seed, rng_base: config.rng_seed, outcomes })
}

#[derive(Debug, Serialize)]
struct PoolManifest<'a> {
    config_digest: &'a str,
    rng_base: u64,
    n_per_seed: usize,
    seeds: usize,
    accepted_total: usize,
    per_seed: Vec<PoolManifestEntry<'a>>,
}

#[derive(Debug, Serialize)]
struct PoolManifestEntry<'a> {
    seed_id: &'a str,
    accepted: usize,
    rejected: usize,
    rng_seeds: &'a [u64],
}

/// Write `pool.jsonl` (accepted fake reviews) and `pool.manifest.json` into `dir`.
pub fn write_pool(dir: &Path, pool: &FakeReviewPool, config_digest: &str) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let accepted: Vec<Review> = pool.accepted().cloned().collect();
    let mut out = BufWriter::new(fs::File::create(dir.join("pool.jsonl"))?);
    write_jsonl(&mut out, &accepted)?;
    out.flush()?;
    let manifest = PoolManifest {
        config_digest,
        rng_base: pool.rng_base,
        n_per_seed: pool.n_per_seed,
        seeds: pool.outcomes.len(),
        accepted_total: accepted.len(),
        per_seed: pool
            .outcomes
            .iter()
            .map(|o| PoolManifestEntry {
                seed_id: &o.seed_id,
                accepted: o.accepted.len(),
                rejected: o.rejected,
                rng_seeds: &o.rng_seeds,
            })
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join("pool.manifest.json"), json)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCount {
    pub seed_id: String,
    pub generated: usize,
    pub preserved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    /// `preserved_total / generated_total` over all candidates, unfiltered.
    pub rate: f64,
    /// Sample standard deviation of the per-seed rates over sqrt(#seeds).
    pub standard_error: f64,
    pub generated_total: usize,
    pub preserved_total: usize,
    pub per_seed: Vec<SeedCount>,
}

impl PreservationReport {
    pub fn from_outcomes(outcomes: &[SeedOutcome]) -> Self {
        let generated_total: usize = outcomes.iter().map(|o| o.generated).sum();
        let preserved_total: usize = outcomes.iter().map(|o| o.preserved).sum();
        let rate = if generated_total == 0 { 0.0 } else { preserved_total as f64 / generated_total as f64 };
        let rates: Vec<f64> =
            outcomes.iter().filter(|o| o.generated > 0).map(|o| o.preserved as f64 / o.generated as f64).collect();
        let standard_error = if rates.len() < 2 {
            0.0
        } else {
            let n = rates.len() as f64;
            let mean = rates.iter().sum::<f64>() / n;
            let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        PreservationReport {
            rate,
            standard_error,
            generated_total,
            preserved_total,
            per_seed: outcomes
                .iter()
                .map(|o| SeedCount { seed_id: o.seed_id.clone(), generated: o.generated, preserved: o.preserved })
                .collect(),
        }
    }
}

/// Run the attack and report the preservation rate over every generated candidate.
pub fn sentiment_preserving_rate<M, C>(
    lm: &M,
    vocab: &Vocabulary,
    clf: &C,
    seeds: &[Review],
    config: &AttackConfig,
) -> Result<PreservationReport, PipelineError>
where
    M: LanguageModel + Sync,
    C: SentimentPredictor + Sync + ?Sized,
{
    Ok(run_attack(lm, vocab, clf, seeds, config)?.preservation_report())
}

/// Aligned text table: one row per (model label, report), rate and SE in percent.
pub fn render_preservation_table(rows: &[(String, PreservationReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Model".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>14}  {:>10}", "Model", "Rate (%) ± SE", "Candidates");
    for (label, r) in rows {
        let cell = format!("{:.1} ± {:.1}", 100.0 * r.rate, 100.0 * r.standard_error);
        let _ = writeln!(out, "{label:<width$}  {cell:>14}  {:>10}", r.generated_total);
    }
    out
}
