//! One function per subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fakerev::container::{load_classifier, load_model, save_classifier, save_model};
use fakerev::corpus::{
    build_vocab, concat_training_text, encode_tokens, load_reviews, write_csv, write_jsonl, Format, Provenance, Review,
    TokenSequence, BOR_ID,
};
use fakerev::detect::{
    compute_eer, evaluate_detectors, render_detection_table, train_detector, train_fusion, write_scores_csv,
    DetectionReport, DetectorScore, EvalSet, FusionModel, LogisticRegression, ReportRow, ReviewDetector,
};
use fakerev::langmodel::{
    find_sentiment_neuron, AnyModel, LanguageModel, MlstmModel, NgramModel, SentimentNeuron, TrainReport, UniformModel,
};
use fakerev::pipeline::{render_preservation_table, run_attack_resumable, write_pool, ClampPolicy, PreservationReport};
use fakerev::sentiment::{evaluate_accuracy, train_classifier, ClassifierMetrics, ClassifierTrainReport};
use fakerev::synth::{generate, SynthConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{ClampMode, LmKind, RunConfig, ValidationError};
use crate::run::{prepare, read_json, write_atomic, write_json, RunDir};

fn lm_path(dataset: &str) -> String {
    format!("{dataset}/lm.rflm")
}

fn clf_path(dataset: &str) -> String {
    format!("{dataset}/classifier.rflm")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LmSummary {
    pub config_digest: String,
    pub stage_digest: String,
    pub dataset: String,
    pub kind: String,
    pub vocab_size: usize,
    pub train_reviews: usize,
    pub train_tokens: usize,
    pub training: Option<TrainReport>,
    pub neuron: Option<SentimentNeuron>,
}

pub fn train_lm(config: &RunConfig) -> Result<()> {
    let mut run = RunDir::open(config)?;
    for d in &config.datasets {
        let stage = format!("train-lm/{}", d.name);
        let digest = config.lm_digest(d)?;
        let splits = prepare(config, d)?;
        let vocab = build_vocab(&splits.train, config.lm.min_count)?;
        let stream = concat_training_text(&vocab, &splits.train);
        info!("{}: training {:?} on {} tokens, vocabulary {}", d.name, config.lm.kind, stream.len(), vocab.len());
        let (model, training, neuron) = match config.lm.kind {
            LmKind::Mlstm => {
                let cfg = config.lm.mlstm.to_core(config.stream_seed(&d.name, "lm"));
                let (mut m, report) = MlstmModel::train(&stream, vocab.len(), &cfg)?;
                let labeled: Vec<_> = splits
                    .train
                    .iter()
                    .take(config.lm.neuron_reviews)
                    .map(|r| {
                        let mut ids = vec![BOR_ID];
                        ids.extend(encode_tokens(&vocab, &r.text));
                        (TokenSequence(ids), r.sentiment)
                    })
                    .collect();
                let neuron = find_sentiment_neuron(&m, &labeled)?;
                if neuron.low_confidence {
                    warn!("{}: sentiment unit {} correlates weakly ({:.3})", d.name, neuron.index, neuron.correlation);
                }
                m.set_sentiment_neuron(neuron)?;
                (AnyModel::Mlstm(m), Some(report), Some(neuron))
            }
            LmKind::Ngram => {
                let n = &config.lm.ngram;
                (AnyModel::Ngram(NgramModel::train(&stream, n.order, n.smoothing, vocab.len())?), None, None)
            }
            LmKind::Uniform => (AnyModel::Uniform(UniformModel::new(vocab.len())?), None, None),
        };
        let rel = lm_path(&d.name);
        fs::create_dir_all(run.path(&d.name))?;
        save_model(&run.path(&rel), &model, &vocab)?;
        let summary_rel = format!("{}/train-lm.json", d.name);
        let summary = LmSummary {
            config_digest: config.digest(),
            stage_digest: digest.clone(),
            dataset: d.name.clone(),
            kind: model.kind_name().into(),
            vocab_size: vocab.len(),
            train_reviews: splits.train.len(),
            train_tokens: stream.len(),
            training,
            neuron,
        };
        write_json(&run.path(&summary_rel), &summary)?;
        run.record(config, &stage, &digest, &[&rel, &summary_rel])?;
        info!("{}: wrote {}", d.name, run.path(&rel).display());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub config_digest: String,
    pub stage_digest: String,
    pub dataset: String,
    pub training: ClassifierTrainReport,
    pub test: ClassifierMetrics,
}

pub fn train_clf(config: &RunConfig) -> Result<()> {
    let mut run = RunDir::open(config)?;
    for d in &config.datasets {
        let stage = format!("train-clf/{}", d.name);
        let digest = config.classifier_digest(d)?;
        let splits = prepare(config, d)?;
        let cfg = config.classifier.to_core(config.stream_seed(&d.name, "clf"));
        let (clf, training) = train_classifier(&splits.train, &cfg)?;
        let test = evaluate_accuracy(&clf, &splits.test)?;
        info!("{}: classifier test accuracy {:.4} on {} reviews", d.name, test.accuracy, test.total);
        let rel = clf_path(&d.name);
        fs::create_dir_all(run.path(&d.name))?;
        save_classifier(&run.path(&rel), &clf)?;
        let summary_rel = format!("{}/train-clf.json", d.name);
        let summary = ClassifierSummary {
            config_digest: config.digest(),
            stage_digest: digest.clone(),
            dataset: d.name.clone(),
            training,
            test,
        };
        write_json(&run.path(&summary_rel), &summary)?;
        run.record(config, &stage, &digest, &[&rel, &summary_rel])?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttackSummary {
    pub config_digest: String,
    pub stage_digest: String,
    pub dataset: String,
    pub model: String,
    pub seeds: usize,
    pub accepted: usize,
    pub preservation: PreservationReport,
}

pub fn attack(config: &RunConfig) -> Result<()> {
    let mut run = RunDir::open(config)?;
    for d in &config.datasets {
        let stage = format!("attack/{}", d.name);
        let digest = config.attack_digest(d)?;
        run.require(&format!("train-lm/{}", d.name), &config.lm_digest(d)?)?;
        run.require(&format!("train-clf/{}", d.name), &config.classifier_digest(d)?)?;
        let (lm, vocab) = load_model(&run.path(&lm_path(&d.name)))?;
        let clf = load_classifier(&run.path(&clf_path(&d.name)))?;
        let splits = prepare(config, d)?;
        let n_seeds = config.attack.seeds;
        if n_seeds > splits.test.len() {
            bail!("{}: attack.seeds = {n_seeds} but the test split has {} reviews", d.name, splits.test.len());
        }
        let clamp = match config.attack.clamp {
            ClampMode::Off => ClampPolicy::Off,
            ClampMode::FollowSeed => {
                let n = lm
                    .as_mlstm()
                    .and_then(MlstmModel::sentiment_neuron)
                    .ok_or_else(|| anyhow!("{}: the model has no sentiment unit to clamp", d.name))?;
                ClampPolicy::FollowSeed { neuron: n.index, polarity: n.polarity }
            }
        };
        let attack = config.attack.to_core(config.stream_seed(&d.name, "attack"), clamp);
        attack.validate(lm.vocab_size()).map_err(|e| anyhow::Error::new(ValidationError(anyhow!("attack: {e}"))))?;
        info!("{}: attacking with {n_seeds} seeds x {} candidates", d.name, attack.n_per_seed);
        let dir = run.path(&format!("{}/attack", d.name));
        let pool = run_attack_resumable(
            &lm,
            &vocab,
            &clf,
            &splits.test[..n_seeds],
            &attack,
            &dir.join("checkpoints"),
            &digest,
        )?;
        write_pool(&dir, &pool, &digest)?;
        let preservation = pool.preservation_report();
        info!(
            "{}: preservation rate {:.3} ± {:.3}, {} accepted",
            d.name,
            preservation.rate,
            preservation.standard_error,
            pool.accepted_count()
        );
        let summary = AttackSummary {
            config_digest: config.digest(),
            stage_digest: digest.clone(),
            dataset: d.name.clone(),
            model: lm.kind_name().into(),
            seeds: n_seeds,
            accepted: pool.accepted_count(),
            preservation,
        };
        let base = format!("{}/attack", d.name);
        write_json(&run.path(&format!("{base}/preservation.json")), &summary)?;
        let table = render_preservation_table(&[(summary.model.clone(), summary.preservation.clone())]);
        write_atomic(&run.path(&format!("{base}/preservation.txt")), table.as_bytes())?;
        let outputs = ["pool.jsonl", "pool.manifest.json", "preservation.json", "preservation.txt"]
            .map(|f| format!("{base}/{f}"));
        let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        run.record(config, &stage, &digest, &refs)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FittedDetector {
    pub name: String,
    pub regression: LogisticRegression,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetDetectors {
    pub dataset: String,
    pub train_fake: usize,
    pub train_real: usize,
    pub eval_fake: usize,
    pub eval_real: usize,
    pub detectors: Vec<FittedDetector>,
    pub fusions: Vec<FusionModel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectSummary {
    pub config_digest: String,
    pub stage_digest: String,
    pub report: DetectionReport,
    pub models: Vec<DatasetDetectors>,
}

/// Train and evaluate the detectors on one dataset. Fakes are the accepted
/// pool in order; reals are test reviews that never seeded the attack.
fn detect_dataset(
    config: &RunConfig,
    run: &RunDir,
    name: &str,
    lm: &AnyModel,
    vocab: &fakerev::corpus::Vocabulary,
) -> Result<(DetectionReport, DatasetDetectors)> {
    let d = config.dataset(name).expect("configured dataset");
    let det = &config.detect;
    let fakes = load_reviews(&run.path(&format!("{name}/attack/pool.jsonl")), Format::Jsonl)?;
    let splits = prepare(config, d)?;
    let reals = &splits.test[config.attack.seeds..];
    if fakes.len() < det.train_fake + det.eval_fake {
        bail!("{name}: the pool holds {} fakes; detect needs {} + {}", fakes.len(), det.train_fake, det.eval_fake);
    }
    if reals.len() < det.train_real + det.eval_real {
        bail!(
            "{name}: {} unseeded test reviews available; detect needs {} + {}",
            reals.len(),
            det.train_real,
            det.eval_real
        );
    }
    let train: Vec<Review> = fakes[..det.train_fake].iter().chain(&reals[..det.train_real]).cloned().collect();
    let eval: Vec<Review> = fakes[det.train_fake..det.train_fake + det.eval_fake]
        .iter()
        .chain(&reals[det.train_real..det.train_real + det.eval_real])
        .cloned()
        .collect();
    let mut trained = Vec::new();
    for entry in &det.detectors {
        let (detector, fit) = train_detector(entry.to_spec()?, lm, vocab, &train, det.l2)?;
        info!("{name}: {} loss {:.4} -> {:.4}", entry.name(), fit.initial_loss, fit.final_loss);
        trained.push(detector);
    }
    let members: Vec<&dyn ReviewDetector> = trained.iter().map(|d| d as &dyn ReviewDetector).collect();
    let labels: Vec<bool> = train.iter().map(|r| r.provenance == Provenance::Fake).collect();
    let mut fusions = Vec::new();
    for f in &det.fusions {
        let scores = f
            .iter()
            .map(|m| {
                let d = members.iter().find(|d| d.name() == m).expect("validated member");
                train.iter().map(|r| d.score(&r.text)).collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fusion = train_fusion(f, &scores, &labels, det.l2)?;
        if !fusion.anti_predictive.is_empty() {
            warn!("{name}: fusion {} gave negative weight to {:?}", fusion.name(), fusion.anti_predictive);
        }
        fusions.push(fusion);
    }
    let report = evaluate_detectors(&members, &fusions, &[EvalSet { name: name.into(), reviews: eval }])?;
    let models = DatasetDetectors {
        dataset: name.into(),
        train_fake: det.train_fake,
        train_real: det.train_real,
        eval_fake: det.eval_fake,
        eval_real: det.eval_real,
        detectors: trained
            .iter()
            .map(|t| FittedDetector { name: t.spec().name.clone(), regression: t.regression().clone() })
            .collect(),
        fusions,
    };
    Ok((report, models))
}

/// Join per-dataset reports into one table whose overall column pools the
/// scores of every dataset.
fn merge_reports(parts: Vec<DetectionReport>) -> Result<DetectionReport> {
    let datasets: Vec<String> = parts.iter().flat_map(|p| p.datasets.clone()).collect();
    let first = parts.first().ok_or_else(|| anyhow!("no datasets"))?;
    let mut rows = Vec::new();
    for (i, row) in first.rows.iter().enumerate() {
        let per_dataset = parts.iter().map(|p| p.rows[i].per_dataset[0]).collect();
        let pooled: Vec<(f64, bool)> = parts
            .iter()
            .flat_map(|p| p.scores.iter())
            .filter(|s| s.detector == row.detector)
            .map(|s| (s.score, s.is_fake))
            .collect();
        rows.push(ReportRow {
            detector: row.detector.clone(),
            fused: row.fused,
            per_dataset,
            overall: compute_eer(&pooled)?,
        });
    }
    let fusions = parts.iter().flat_map(|p| p.fusions.clone()).collect();
    let scores: Vec<DetectorScore> = parts.into_iter().flat_map(|p| p.scores).collect();
    Ok(DetectionReport { datasets, rows, fusions, scores })
}

pub fn detect(config: &RunConfig) -> Result<()> {
    let mut run = RunDir::open(config)?;
    let digest = config.detect_digest()?;
    let mut parts = Vec::new();
    let mut models = Vec::new();
    for d in &config.datasets {
        run.require(&format!("train-lm/{}", d.name), &config.lm_digest(d)?)?;
        run.require(&format!("attack/{}", d.name), &config.attack_digest(d)?)?;
        let (lm, vocab) = load_model(&run.path(&lm_path(&d.name)))?;
        let (report, fitted) = detect_dataset(config, &run, &d.name, &lm, &vocab)?;
        parts.push(report);
        models.push(fitted);
    }
    let report = merge_reports(parts)?;
    let mut csv = Vec::new();
    write_scores_csv(&mut csv, &report.scores)?;
    write_atomic(&run.path("detect/scores.csv"), &csv)?;
    write_atomic(&run.path("detect/report.txt"), render_detection_table(&report).as_bytes())?;
    let summary = DetectSummary { config_digest: config.digest(), stage_digest: digest.clone(), report, models };
    write_json(&run.path("detect/report.json"), &summary)?;
    info!("\n{}", render_detection_table(&summary.report));
    run.record(config, "detect", &digest, &["detect/report.json", "detect/report.txt", "detect/scores.csv"])?;
    Ok(())
}

/// Preservation and detection tables for every run directory given.
pub fn report(dirs: &[std::path::PathBuf]) -> Result<String> {
    let runs = dirs
        .iter()
        .map(|d| RunDir::existing(d).map_err(|e| anyhow::Error::new(ValidationError(e))))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for run in &runs {
        for stage in run.manifest.stages.keys().filter(|k| k.starts_with("attack/")) {
            let dataset = &stage["attack/".len()..];
            let s: AttackSummary = read_json(&run.path(&format!("{dataset}/attack/preservation.json")))?;
            rows.push((format!("{} {} ({})", run.root.display(), dataset, s.model), s.preservation));
        }
    }
    let mut out = String::new();
    if !rows.is_empty() {
        out.push_str("Sentiment-preserving rate\n");
        out.push_str(&render_preservation_table(&rows));
    }
    for run in &runs {
        if run.manifest.stages.contains_key("detect") {
            let s: DetectSummary = read_json(&run.path("detect/report.json"))?;
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "Equal error rate, {} (config {})", run.root.display(), &s.config_digest[..12]);
            out.push_str(&render_detection_table(&s.report));
        }
    }
    if out.is_empty() {
        bail!(
            "no attack or detect results in {}",
            dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(", ")
        );
    }
    Ok(out)
}

pub fn synth_corpus(config: &SynthConfig, out: &Path) -> Result<()> {
    let format = Format::from_path(out).ok_or_else(|| {
        anyhow::Error::new(ValidationError(anyhow!("cannot tell the format of {} (use .jsonl or .csv)", out.display())))
    })?;
    let reviews = generate(config);
    let mut bytes = Vec::new();
    match format {
        Format::Jsonl => write_jsonl(&mut bytes, &reviews)?,
        Format::Csv => write_csv(&mut bytes, &reviews)?,
    }
    write_atomic(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {} reviews to {}", reviews.len(), out.display());
    Ok(())
}
