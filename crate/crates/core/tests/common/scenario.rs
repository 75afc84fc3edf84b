//! Experiments on the synthetic world, shared by the toy integration tests
//! and the acceptance suite.

use std::path::Path;

use fakerev::corpus::{decode, Provenance, Review, Sentiment, TokenSequence, BOR_ID};
use fakerev::detect::{
    evaluate_detectors, train_detector, train_fusion, DetectionReport, DetectorSpec, EvalSet, ReviewDetector,
    DEFAULT_L2,
};
use fakerev::langmodel::{sample, sample_observed, AnyModel, SamplerConfig, UniformModel};
use fakerev::pipeline::{run_attack, write_pool, AttackConfig, FakeReviewPool};
use fakerev::sentiment::{evaluate_accuracy, SentimentPredictor};

use super::toy::{build, ToyWorld};

/// The clamped unit sits at the clamp value after every step, and a run
/// without a clamp matches plain sampling bit for bit.
pub fn clamp_contract(world: &ToyWorld) -> Result<String, String> {
    let neuron = world.lstm.sentiment_neuron().ok_or("no sentiment neuron recorded")?.index;
    let mut steps = 0usize;
    for (i, seed) in world.test.iter().take(20).enumerate() {
        let ctx = super::toy::open_sequence(&world.vocab, &seed.text);
        for value in [1.0, -1.0] {
            let cfg = SamplerConfig {
                clamp: Some(fakerev::langmodel::Clamp { neuron, value }),
                rng_seed: i as u64,
                ..Default::default()
            };
            let mut bad = None;
            sample_observed(&world.lstm, &ctx, &cfg, |s| {
                steps += 1;
                let h = s.hidden()[neuron];
                if h != value && bad.is_none() {
                    bad = Some(h);
                }
            })
            .map_err(|e| e.to_string())?;
            if let Some(h) = bad {
                return Err(format!("seed {i}: unit {neuron} read {h} under clamp {value}"));
            }
        }
        let plain = SamplerConfig { rng_seed: 100 + i as u64, ..Default::default() };
        let a = sample(&world.lstm, &ctx, &plain).map_err(|e| e.to_string())?;
        let b = sample_observed(&world.lstm, &ctx, &plain, |_| {}).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("seed {i}: clamp-off run differs from plain sampling"));
        }
    }
    Ok(format!("{steps} clamped steps on unit {neuron}, 20 clamp-off runs identical"))
}

pub struct PipelineNumbers {
    pub accuracy: f64,
    pub lstm_rate: f64,
    pub lstm_se: f64,
    pub ngram_rate: f64,
    pub uniform_rate: f64,
    pub clamp_positive: f64,
    pub clamp_negative: f64,
}

/// Classifier accuracy, preservation rates of the trained and uniform models
/// over `seeds` x 20 candidates, and positive fractions under both clamps.
pub fn pipeline_numbers(world: &ToyWorld, seeds: usize, clamp_samples: u64) -> Result<PipelineNumbers, String> {
    let accuracy = evaluate_accuracy(&world.clf, &world.test).map_err(|e| e.to_string())?.accuracy;
    let seeds = &world.test[..seeds];
    let cfg = AttackConfig::default();
    let rate = |lm: &AnyModel| run_attack(lm, &world.vocab, &world.clf, seeds, &cfg).map(|p| p.preservation_report());
    let lstm = rate(&AnyModel::Mlstm(world.lstm.clone())).map_err(|e| e.to_string())?;
    let ngram = rate(&AnyModel::Ngram(world.ngram.clone())).map_err(|e| e.to_string())?;
    let uniform = rate(&AnyModel::Uniform(UniformModel::new(world.vocab.len()).unwrap())).map_err(|e| e.to_string())?;
    let bor = TokenSequence(vec![BOR_ID]);
    let mut fractions = [0.0; 2];
    for (k, s) in [Sentiment::Positive, Sentiment::Negative].into_iter().enumerate() {
        let clamp = world.lstm.sentiment_clamp(s);
        let mut positive = 0;
        for i in 0..clamp_samples {
            let out = sample(&world.lstm, &bor, &SamplerConfig { rng_seed: i, clamp, ..Default::default() })
                .map_err(|e| e.to_string())?;
            let text = decode(&world.vocab, &out).map_err(|e| e.to_string())?;
            if !text.is_empty() && world.clf.predict(&text).map_err(|e| e.to_string())?.label == Sentiment::Positive {
                positive += 1;
            }
        }
        fractions[k] = positive as f64 / clamp_samples as f64;
    }
    Ok(PipelineNumbers {
        accuracy,
        lstm_rate: lstm.rate,
        lstm_se: lstm.standard_error,
        ngram_rate: ngram.rate,
        uniform_rate: uniform.rate,
        clamp_positive: fractions[0],
        clamp_negative: fractions[1],
    })
}

/// Detector training and evaluation shapes: (fake, real) counts.
pub struct DetectionShape {
    pub seeds: usize,
    pub n_per_seed: usize,
    pub train: (usize, usize),
    pub eval: (usize, usize),
}

impl DetectionShape {
    pub const PAPER: DetectionShape = DetectionShape { seeds: 80, n_per_seed: 10, train: (240, 120), eval: (160, 80) };
}

pub struct DetectionRun {
    pub pool: FakeReviewPool,
    pub report: DetectionReport,
}

/// Fakes are accepted candidates from the first `seeds` test reviews; reals are
/// later test reviews never used as seeds. Both detectors score with the
/// generating model; the fusion is fit on the members' training-set scores.
pub fn detection_run(world: &ToyWorld, shape: &DetectionShape) -> Result<DetectionRun, String> {
    let lm = &world.lstm;
    let seeds = &world.test[..shape.seeds];
    let config = AttackConfig { n_per_seed: shape.n_per_seed, ..Default::default() };
    let pool = run_attack(lm, &world.vocab, &world.clf, seeds, &config).map_err(|e| e.to_string())?;
    let fakes: Vec<Review> = pool.accepted().cloned().collect();
    let reals = &world.test[shape.seeds..];
    let (tf, tr) = shape.train;
    let (ef, er) = shape.eval;
    if fakes.len() < tf + ef || reals.len() < tr + er {
        return Err(format!("only {} fakes and {} reals available", fakes.len(), reals.len()));
    }
    let train: Vec<Review> = fakes[..tf].iter().chain(&reals[..tr]).cloned().collect();
    let eval: Vec<Review> = fakes[tf..tf + ef].iter().chain(&reals[tr..tr + er]).cloned().collect();
    let (rank, _) =
        train_detector(DetectorSpec::rank_bin(), lm, &world.vocab, &train, DEFAULT_L2).map_err(|e| e.to_string())?;
    let (ppl, _) =
        train_detector(DetectorSpec::perplexity(), lm, &world.vocab, &train, DEFAULT_L2).map_err(|e| e.to_string())?;
    let members: [&dyn ReviewDetector; 2] = [&rank, &ppl];
    let names: Vec<String> = members.iter().map(|d| d.name().to_string()).collect();
    let member_scores = members
        .iter()
        .map(|d| train.iter().map(|r| d.score(&r.text)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let labels: Vec<bool> = train.iter().map(|r| r.provenance == Provenance::Fake).collect();
    let fusion = train_fusion(&names, &member_scores, &labels, DEFAULT_L2).map_err(|e| e.to_string())?;
    let sets = [EvalSet { name: "products".into(), reviews: eval }];
    let report = evaluate_detectors(&members, &[fusion], &sets).map_err(|e| e.to_string())?;
    Ok(DetectionRun { pool, report })
}

/// Train everything from scratch, attack, detect, and write the pool and the
/// report JSON under `dir`.
pub fn end_to_end(n_reviews: usize, seed: u64, dir: &Path) -> Result<(), String> {
    let world = build(n_reviews, seed);
    let shape = DetectionShape { seeds: 30, n_per_seed: 6, train: (60, 30), eval: (40, 20) };
    let run = detection_run(&world, &shape)?;
    write_pool(dir, &run.pool, "end-to-end").map_err(|e| e.to_string())?;
    let mut json = serde_json::to_string_pretty(&run.report).map_err(|e| e.to_string())?;
    json.push('\n');
    std::fs::write(dir.join("detection.json"), json).map_err(|e| e.to_string())
}
