//! Run configuration: a TOML file, dotted `--set` overrides, validation and
//! content digests.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fakerev::detect::{BinSpec, DetectorKind, DetectorSpec, DEFAULT_BIN_BOUNDS, DEFAULT_L2};
use fakerev::langmodel::{MlstmConfig, SamplerConfig, Smoothing};
use fakerev::pipeline::{AttackConfig, ClampPolicy};
use fakerev::seeds::{derive_named, digest_hex};
use fakerev::sentiment::ClassifierConfig;
use fakerev::synth::{Domain, SynthConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random stream in the run is derived from this by name.
    pub seed: u64,
    /// Outputs go here. Not part of any digest.
    pub run_dir: PathBuf,
    pub datasets: Vec<DatasetConfig>,
    pub lm: LmSection,
    pub classifier: ClassifierSection,
    pub attack: AttackSection,
    pub detect: DetectSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = |domain| DatasetConfig {
            name: Domain::name(domain).into(),
            reviews: None,
            synth: Some(SynthSection { domain, ..Default::default() }),
            train_fraction: default_train_fraction(),
        };
        RunConfig {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            datasets: vec![synth(Domain::Products), synth(Domain::Restaurants)],
            lm: LmSection::default(),
            classifier: ClassifierSection::default(),
            attack: AttackSection::default(),
            detect: DetectSection::default(),
        }
    }
}

/// One review site: either a corpus file (JSONL or CSV) or a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default)]
    pub reviews: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub domain: Domain,
    pub n_reviews: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            domain: d.domain,
            n_reviews: d.n_reviews,
            min_sentences: d.min_sentences,
            max_sentences: d.max_sentences,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmKind {
    #[default]
    Mlstm,
    Ngram,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub kind: LmKind,
    /// Tokens seen fewer times in the training split map to `<unk>`.
    pub min_count: usize,
    /// Training reviews used to locate the sentiment unit (mLSTM only).
    pub neuron_reviews: usize,
    pub mlstm: MlstmSection,
    pub ngram: NgramSection,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            kind: LmKind::Mlstm,
            min_count: 1,
            neuron_reviews: 400,
            mlstm: MlstmSection::default(),
            ngram: NgramSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlstmSection {
    pub hidden_size: usize,
    pub embed_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_len: usize,
}

impl Default for MlstmSection {
    fn default() -> Self {
        let d = MlstmConfig::default();
        MlstmSection {
            hidden_size: d.hidden_size,
            embed_size: d.embed_size,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            batch_len: d.batch_len,
        }
    }
}

impl MlstmSection {
    pub fn to_core(&self, rng_seed: u64) -> MlstmConfig {
        MlstmConfig {
            hidden_size: self.hidden_size,
            embed_size: self.embed_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_len: self.batch_len,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgramSection {
    pub order: usize,
    pub smoothing: Smoothing,
}

impl Default for NgramSection {
    fn default() -> Self {
        NgramSection { order: 3, smoothing: Smoothing::kneser_ney() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub hash_dim: usize,
    pub ngram_max: u8,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let d = ClassifierConfig::default();
        ClassifierSection {
            hash_dim: d.hash_dim,
            ngram_max: d.ngram_max,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            l2: d.l2,
        }
    }
}

impl ClassifierSection {
    pub fn to_core(&self, rng_seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            hash_dim: self.hash_dim,
            ngram_max: self.ngram_max,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            l2: self.l2,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    #[default]
    Off,
    /// Hold the sentiment unit at the value matching each seed's sentiment.
    FollowSeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub max_len: usize,
    pub min_len: usize,
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection { max_len: d.max_len, min_len: d.min_len, temperature: d.temperature, top_k: d.top_k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// The first this-many test reviews of each dataset seed the attack.
    pub seeds: usize,
    pub n_per_seed: usize,
    pub min_score: Option<f64>,
    pub clamp: ClampMode,
    pub sampler: SamplerSection,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::default();
        AttackSection {
            seeds: 100,
            n_per_seed: d.n_per_seed,
            min_score: d.min_score,
            clamp: ClampMode::Off,
            sampler: SamplerSection::default(),
        }
    }
}

impl AttackSection {
    /// `clamp` is the policy resolved against the trained model.
    pub fn to_core(&self, rng_seed: u64, clamp: ClampPolicy) -> AttackConfig {
        let s = &self.sampler;
        AttackConfig {
            n_per_seed: self.n_per_seed,
            sampler: SamplerConfig {
                max_len: s.max_len,
                min_len: s.min_len,
                temperature: s.temperature,
                top_k: s.top_k,
                ..Default::default()
            },
            min_score: self.min_score,
            clamp,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKindName {
    RankBin,
    Perplexity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorEntry {
    pub kind: DetectorKindName,
    /// Defaults to "rank-bin" or "perplexity".
    #[serde(default)]
    pub name: Option<String>,
    /// Rank-bin only: fixed bounds, default (10, 100, 1000).
    #[serde(default)]
    pub bins: Option<[usize; 3]>,
    /// Rank-bin only: bounds at 1%, 10% and 50% of the vocabulary.
    #[serde(default)]
    pub proportional: Option<bool>,
    /// Rank-bin only: bin fractions instead of counts.
    #[serde(default)]
    pub normalized: Option<bool>,
}

impl DetectorEntry {
    pub fn to_spec(&self) -> Result<DetectorSpec> {
        let kind = match self.kind {
            DetectorKindName::RankBin => {
                let proportional = self.proportional.unwrap_or(false);
                if proportional && self.bins.is_some() {
                    bail!("detector {:?}: set either bins or proportional, not both", self.name());
                }
                let bins = if proportional {
                    BinSpec::Proportional
                } else {
                    BinSpec::Fixed { bounds: self.bins.unwrap_or(DEFAULT_BIN_BOUNDS) }
                };
                DetectorKind::RankBin { bins, normalized: self.normalized.unwrap_or(false) }
            }
            DetectorKindName::Perplexity => {
                if self.bins.is_some() || self.proportional.is_some() || self.normalized.is_some() {
                    bail!("detector {:?}: bins, proportional and normalized apply to rank_bin only", self.name());
                }
                DetectorKind::Perplexity
            }
        };
        Ok(DetectorSpec { name: self.name(), kind })
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| match self.kind {
            DetectorKindName::RankBin => DetectorSpec::rank_bin().name,
            DetectorKindName::Perplexity => DetectorSpec::perplexity().name,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    pub train_fake: usize,
    pub train_real: usize,
    pub eval_fake: usize,
    pub eval_real: usize,
    pub l2: f64,
    pub detectors: Vec<DetectorEntry>,
    /// Each entry lists detector names fused at the score level.
    pub fusions: Vec<Vec<String>>,
}

impl Default for DetectSection {
    fn default() -> Self {
        let entry = |kind| DetectorEntry { kind, name: None, bins: None, proportional: None, normalized: None };
        DetectSection {
            train_fake: 240,
            train_real: 120,
            eval_fake: 160,
            eval_real: 80,
            l2: DEFAULT_L2,
            detectors: vec![entry(DetectorKindName::RankBin), entry(DetectorKindName::Perplexity)],
            fusions: vec![vec!["rank-bin".into(), "perplexity".into()]],
        }
    }
}

/// A configuration problem: reported with exit code 1.
#[derive(Debug)]
pub struct ValidationError(pub anyhow::Error);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ValidationError {}

fn invalid(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ValidationError(e))
}

/// Parse the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `path` (dot-separated; numeric segments index arrays) inside `root`,
/// creating tables as needed.
fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key {path:?}");
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if last {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let next = match next {
            toml::Value::Array(items) => {
                let idx_str = parts[i + 1];
                let idx: usize = idx_str
                    .parse()
                    .map_err(|_| anyhow!("{} is an array; expected an index after it", parts[..=i].join(".")))?;
                let len = items.len();
                let item = items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("index {idx} out of range for {} ({len} entries)", parts[..=i].join(".")))?;
                if i + 2 == parts.len() {
                    *item = value;
                    return Ok(());
                }
                return match item {
                    toml::Value::Table(t) => set_path(t, &parts[i + 2..].join("."), value),
                    _ => bail!("{} is not a table", parts[..=i + 1].join(".")),
                };
            }
            toml::Value::Table(t) => t,
            _ => bail!("{} is not a table", parts[..=i].join(".")),
        };
        cur = next;
    }
    unreachable!("the loop returns on the last segment")
}

/// The configured tree with the file's defaults filled in, so `--set
/// datasets.0.name=x` works when the file does not list datasets.
fn defaults_table() -> toml::Table {
    let v = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    match v {
        toml::Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// Load `path` (or the defaults), apply `overrides` in order, then `seed`.
/// Unknown keys and type errors are validation errors naming the key.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).map_err(invalid)?;
            toml::from_str::<toml::Table>(&text)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(invalid)?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| invalid(anyhow!("--set expects key=value, got {o:?}")))?;
        let key = key.trim();
        if key.split('.').any(|p| p.parse::<usize>().is_ok()) && !table.contains_key(key.split('.').next().unwrap()) {
            // indexing into a section the file left at its default
            let first = key.split('.').next().unwrap();
            if let Some(v) = defaults_table().remove(first) {
                table.insert(first.to_string(), v);
            }
        }
        set_path(&mut table, key, parse_value(raw.trim())).with_context(|| format!("--set {o}")).map_err(invalid)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        invalid(anyhow!("config key {path}: {}", inner.lines().next().unwrap_or_default()))
    })?;
    config.validate().map_err(invalid)?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            bail!("datasets: at least one dataset is required");
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if d.name.is_empty() || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                bail!("datasets: name {:?} must be non-empty and use only letters, digits, '-' and '_'", d.name);
            }
            if !names.insert(d.name.as_str()) {
                bail!("datasets: duplicate name {:?}", d.name);
            }
            match (&d.reviews, &d.synth) {
                (Some(p), None) => {
                    if !p.is_file() {
                        bail!("datasets.{}: reviews file {} does not exist", d.name, p.display());
                    }
                    if fakerev::corpus::Format::from_path(p).is_none() {
                        bail!("datasets.{}: cannot tell the format of {} (use .jsonl or .csv)", d.name, p.display());
                    }
                }
                (None, Some(s)) => {
                    if s.n_reviews < 2 || s.min_sentences == 0 || s.max_sentences < s.min_sentences {
                        bail!("datasets.{}.synth: need n_reviews >= 2 and 1 <= min_sentences <= max_sentences", d.name);
                    }
                }
                _ => bail!("datasets.{}: set exactly one of reviews and synth", d.name),
            }
            if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
                bail!("datasets.{}.train_fraction must lie in (0, 1), got {}", d.name, d.train_fraction);
            }
        }
        if self.lm.min_count == 0 {
            bail!("lm.min_count must be at least 1");
        }
        match self.lm.kind {
            LmKind::Mlstm => {
                self.lm.mlstm.to_core(0).validate().map_err(|e| anyhow!("lm.mlstm: {e}"))?;
                if self.lm.neuron_reviews < 2 {
                    bail!("lm.neuron_reviews must be at least 2");
                }
            }
            LmKind::Ngram => {
                if !(1..=8).contains(&self.lm.ngram.order) {
                    bail!("lm.ngram.order must lie in 1..=8, got {}", self.lm.ngram.order);
                }
                self.lm.ngram.smoothing.validate().map_err(|e| anyhow!("lm.ngram.smoothing: {e}"))?;
            }
            LmKind::Uniform => {}
        }
        self.classifier.to_core(0).validate().map_err(|e| anyhow!("classifier: {e}"))?;
        if self.attack.seeds == 0 {
            bail!("attack.seeds must be at least 1");
        }
        if self.attack.clamp == ClampMode::FollowSeed && self.lm.kind != LmKind::Mlstm {
            bail!("attack.clamp = \"follow_seed\" needs lm.kind = \"mlstm\"");
        }
        self.attack.to_core(0, ClampPolicy::Off).validate(usize::MAX).map_err(|e| anyhow!("attack: {e}"))?;
        let det = &self.detect;
        if det.train_fake == 0 || det.train_real == 0 || det.eval_fake == 0 || det.eval_real == 0 {
            bail!("detect: train and eval counts must all be positive");
        }
        if !(det.l2 > 0.0 && det.l2.is_finite()) {
            bail!("detect.l2 must be positive");
        }
        if det.detectors.is_empty() {
            bail!("detect.detectors: at least one detector is required");
        }
        let mut dnames = BTreeSet::new();
        for e in &det.detectors {
            e.to_spec()?;
            if !dnames.insert(e.name()) {
                bail!("detect.detectors: duplicate name {:?}", e.name());
            }
        }
        for f in &det.fusions {
            if f.is_empty() {
                bail!("detect.fusions: empty fusion");
            }
            if let Some(m) = f.iter().find(|m| !dnames.contains(*m)) {
                bail!("detect.fusions: unknown detector {m:?}");
            }
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetConfig> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// Seed for the named random stream of one dataset.
    pub fn stream_seed(&self, dataset: &str, stream: &str) -> u64 {
        derive_named(self.seed, &format!("{dataset}/{stream}"))
    }

    /// Digest of everything except `run_dir`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        digest_json(&c)
    }

    fn data_digest(&self, d: &DatasetConfig) -> Result<String> {
        let content = match &d.reviews {
            Some(p) => Some(digest_hex(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)),
            None => None,
        };
        Ok(digest_json(&(self.seed, d, content)))
    }

    pub fn lm_digest(&self, d: &DatasetConfig) -> Result<String> {
        Ok(digest_json(&("train-lm", self.data_digest(d)?, &self.lm)))
    }

    pub fn classifier_digest(&self, d: &DatasetConfig) -> Result<String> {
        Ok(digest_json(&("train-clf", self.data_digest(d)?, &self.classifier)))
    }

    pub fn attack_digest(&self, d: &DatasetConfig) -> Result<String> {
        Ok(digest_json(&("attack", self.lm_digest(d)?, self.classifier_digest(d)?, &self.attack)))
    }

    pub fn detect_digest(&self) -> Result<String> {
        let attacks = self.datasets.iter().map(|d| self.attack_digest(d)).collect::<Result<Vec<_>>>()?;
        Ok(digest_json(&("detect", attacks, &self.detect)))
    }
}

pub fn digest_json<T: Serialize>(value: &T) -> String {
    digest_hex(&serde_json::to_vec(value).expect("config values serialize"))
}
