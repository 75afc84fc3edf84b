//! Run directory layout, the shared manifest, and dataset preparation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fakerev::corpus::{load_reviews, split, Format, Provenance, Review, SplitSpec};
use fakerev::seeds::digest_hex;
use fakerev::synth::{generate, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, RunConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of the configuration this stage's outputs depend on.
    pub stage_digest: String,
    /// Digest of the whole configuration of the invocation that wrote it.
    pub config_digest: String,
    /// Output path (relative to the run directory) to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Configuration of the most recent invocation.
    pub config_digest: String,
    pub config: Option<RunConfig>,
    /// Keyed `command/dataset`, or just `command` for whole-run stages.
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    pub fn open(config: &RunConfig) -> Result<Self> {
        let root = config.run_dir.clone();
        fs::create_dir_all(&root).with_context(|| format!("creating run directory {}", root.display()))?;
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("reading {}", path.display()))?
        } else {
            Manifest::default()
        };
        Ok(RunDir { root, manifest })
    }

    /// Open an existing run directory for reading.
    pub fn existing(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.is_file() {
            bail!("{} is not a run directory (no {MANIFEST})", root.display());
        }
        let manifest =
            serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("reading {}", path.display()))?;
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Check that `stage` was produced under `digest` and that its outputs are
    /// unchanged on disk.
    pub fn require(&self, stage: &str, digest: &str) -> Result<()> {
        let command = stage.split('/').next().unwrap_or(stage);
        let Some(rec) = self.manifest.stages.get(stage) else {
            bail!("{stage} has not been run in {}; run `fakerev {command}` first", self.root.display());
        };
        if rec.stage_digest != digest {
            bail!(
                "{stage} in {} was produced with a different configuration; rerun `fakerev {command}`",
                self.root.display()
            );
        }
        for (rel, hash) in &rec.outputs {
            let bytes = fs::read(self.path(rel)).with_context(|| format!("reading {rel}"))?;
            if &digest_hex(&bytes) != hash {
                bail!("{rel} changed since {stage} wrote it; rerun `fakerev {command}`");
            }
        }
        Ok(())
    }

    /// Record a finished stage and rewrite the manifest.
    pub fn record(&mut self, config: &RunConfig, stage: &str, stage_digest: &str, outputs: &[&str]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for rel in outputs {
            let bytes = fs::read(self.path(rel)).with_context(|| format!("reading {rel}"))?;
            hashes.insert(rel.to_string(), digest_hex(&bytes));
        }
        let config_digest = config.digest();
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                stage_digest: stage_digest.to_string(),
                config_digest: config_digest.clone(),
                outputs: hashes,
            },
        );
        self.manifest.config_digest = config_digest;
        let mut stored = config.clone();
        stored.run_dir = PathBuf::new();
        self.manifest.config = Some(stored);
        write_json(&self.path(MANIFEST), &self.manifest)
    }
}

/// Pretty JSON with a trailing newline, written through a temporary file.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("parsing {}", path.display()))
}

pub struct Splits {
    pub train: Vec<Review>,
    pub test: Vec<Review>,
}

/// The dataset's real reviews, split into train and test.
pub fn prepare(config: &RunConfig, d: &DatasetConfig) -> Result<Splits> {
    let reviews = match (&d.reviews, &d.synth) {
        (Some(path), _) => {
            let format = Format::from_path(path).expect("validated");
            let all = load_reviews(path, format).with_context(|| format!("loading {}", path.display()))?;
            all.into_iter().filter(|r| r.provenance == Provenance::Real).collect()
        }
        (None, Some(s)) => generate(&SynthConfig {
            n_reviews: s.n_reviews,
            domain: s.domain,
            min_sentences: s.min_sentences,
            max_sentences: s.max_sentences,
            rng_seed: config.stream_seed(&d.name, "synth"),
            id_prefix: format!("{}-", d.name),
        }),
        (None, None) => unreachable!("validated"),
    };
    if reviews.len() < 2 {
        bail!("dataset {} has {} real reviews; need at least 2", d.name, reviews.len());
    }
    let (train, test) = split(
        &reviews,
        SplitSpec { train_fraction: d.train_fraction, rng_seed: config.stream_seed(&d.name, "split") },
    )?;
    Ok(Splits { train, test })
}
