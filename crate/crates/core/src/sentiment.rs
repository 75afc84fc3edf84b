//! Hashed bag-of-n-grams logistic regression for review sentiment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Review, Sentiment};

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("classifier has not been trained")]
    Untrained,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training set must contain both sentiment classes")]
    SingleClass,
    #[error("evaluation set is empty")]
    EmptyTestSet,
    #[error("invalid classifier configuration: {0}")]
    BadConfig(String),
}

/// Anything that can label a review text. The validation step only needs this.
pub trait SentimentPredictor {
    fn predict(&self, text: &str) -> Result<Prediction, ClassifierError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Sentiment,
    /// Probability of the positive class.
    pub score: f64,
}

impl Prediction {
    /// `Positive` iff `score >= 0.5`.
    pub fn from_score(score: f64) -> Self {
        let label = if score >= 0.5 { Sentiment::Positive } else { Sentiment::Negative };
        Prediction { label, score }
    }

    /// Probability assigned to `sentiment`.
    pub fn confidence_in(&self, sentiment: Sentiment) -> f64 {
        match sentiment {
            Sentiment::Positive => self.score,
            Sentiment::Negative => 1.0 - self.score,
        }
    }
}

/// Signed feature hashing of word unigrams (and bigrams when `ngram_max == 2`),
/// L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedFeatures {
    pub dim: usize,
    pub ngram_max: u8,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashedFeatures {
    pub fn new(dim: usize, ngram_max: u8) -> Result<Self, ClassifierError> {
        if dim == 0 {
            return Err(ClassifierError::BadConfig("hash dimension must be positive".into()));
        }
        if !(1..=2).contains(&ngram_max) {
            return Err(ClassifierError::BadConfig(format!("ngram_max must be 1 or 2, got {ngram_max}")));
        }
        Ok(HashedFeatures { dim, ngram_max })
    }

    /// Sparse (index, value) pairs sorted by index.
    pub fn featurize(&self, text: &str) -> Vec<(usize, f64)> {
        let tokens = tokenize(text);
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let mut add = |gram: &str| {
            let h = fnv1a(gram.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            *acc.entry((h % self.dim as u64) as usize).or_default() += sign;
        };
        for t in &tokens {
            add(t);
        }
        if self.ngram_max >= 2 {
            for pair in tokens.windows(2) {
                add(&format!("{}\u{1f}{}", pair[0], pair[1]));
            }
        }
        let norm = acc.values().map(|v| v * v).sum::<f64>().sqrt();
        acc.into_iter().filter(|&(_, v)| v != 0.0).map(|(i, v)| (i, v / norm)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hash_dim: usize,
    pub ngram_max: u8,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub rng_seed: u64,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.l2.is_nan() || self.l2 < 0.0 {
            return Err(ClassifierError::BadConfig("learning_rate must be positive and l2 non-negative".into()));
        }
        HashedFeatures::new(self.hash_dim, self.ngram_max).map(|_| ())
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hash_dim: 1 << 18, ngram_max: 2, epochs: 10, learning_rate: 0.5, l2: 1e-6, rng_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentimentClassifier {
    features: HashedFeatures,
    weights: Vec<f64>,
    bias: f64,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_loss(score: f64, positive: bool) -> f64 {
    let p = if positive { score } else { 1.0 - score };
    -p.max(1e-300).ln()
}

impl SentimentClassifier {
    /// An untrained classifier with all-zero weights.
    pub fn untrained(features: HashedFeatures) -> Self {
        SentimentClassifier { features, weights: vec![0.0; features.dim], bias: 0.0, trained: false }
    }

    /// A ready-to-use classifier with explicit parameters.
    pub fn from_weights(features: HashedFeatures, weights: Vec<f64>, bias: f64) -> Result<Self, ClassifierError> {
        if weights.len() != features.dim {
            return Err(ClassifierError::BadConfig(format!(
                "expected {} weights, got {}",
                features.dim,
                weights.len()
            )));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifierError::BadConfig("weights must be finite".into()));
        }
        Ok(SentimentClassifier { features, weights, bias, trained: true })
    }

    pub fn features(&self) -> HashedFeatures {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn raw_score(&self, x: &[(usize, f64)]) -> f64 {
        sigmoid(x.iter().map(|&(i, v)| self.weights[i] * v).sum::<f64>() + self.bias)
    }

    fn mean_loss(&self, data: &[(Vec<(usize, f64)>, bool)]) -> f64 {
        data.iter().map(|(x, y)| log_loss(self.raw_score(x), *y)).sum::<f64>() / data.len() as f64
    }
}

impl SentimentPredictor for SentimentClassifier {
    fn predict(&self, text: &str) -> Result<Prediction, ClassifierError> {
        if !self.trained {
            return Err(ClassifierError::Untrained);
        }
        Ok(Prediction::from_score(self.raw_score(&self.features.featurize(text))))
    }
}

/// Plain SGD on the logistic loss with L2 decay applied to the weights each
/// example touches. Example order is reshuffled every epoch from `rng_seed`.
pub fn train_classifier(
    train: &[Review],
    config: &ClassifierConfig,
) -> Result<(SentimentClassifier, ClassifierTrainReport), ClassifierError> {
    if train.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    let has = |s| train.iter().any(|r| r.sentiment == s);
    if !(has(Sentiment::Positive) && has(Sentiment::Negative)) {
        return Err(ClassifierError::SingleClass);
    }
    config.validate()?;
    let features = HashedFeatures::new(config.hash_dim, config.ngram_max)?;
    let data: Vec<(Vec<(usize, f64)>, bool)> =
        train.iter().map(|r| (features.featurize(&r.text), r.sentiment == Sentiment::Positive)).collect();

    let mut clf = SentimentClassifier::untrained(features);
    let initial_loss = clf.mean_loss(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let lr = config.learning_rate;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = &data[i];
            let g = clf.raw_score(x) - if *y { 1.0 } else { 0.0 };
            for &(j, v) in x {
                let w = &mut clf.weights[j];
                *w -= lr * (g * v + config.l2 * *w);
            }
            clf.bias -= lr * g;
        }
    }
    clf.trained = true;
    let final_loss = clf.mean_loss(&data);
    Ok((clf, ClassifierTrainReport { initial_loss, final_loss }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Positive treated as the detected class.
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub precision_positive: Option<f64>,
    pub recall_positive: Option<f64>,
    pub precision_negative: Option<f64>,
    pub recall_negative: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn evaluate_accuracy<P: SentimentPredictor + ?Sized>(
    clf: &P,
    test: &[Review],
) -> Result<ClassifierMetrics, ClassifierError> {
    if test.is_empty() {
        return Err(ClassifierError::EmptyTestSet);
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for r in test {
        let pred = clf.predict(&r.text)?.label;
        match (r.sentiment, pred) {
            (Sentiment::Positive, Sentiment::Positive) => tp += 1,
            (Sentiment::Negative, Sentiment::Positive) => fp += 1,
            (Sentiment::Negative, Sentiment::Negative) => tn += 1,
            (Sentiment::Positive, Sentiment::Negative) => fneg += 1,
        }
    }
    let correct = tp + tn;
    Ok(ClassifierMetrics {
        total: test.len(),
        correct,
        accuracy: correct as f64 / test.len() as f64,
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
        precision_positive: ratio(tp, tp + fp),
        recall_positive: ratio(tp, tp + fneg),
        precision_negative: ratio(tn, tn + fneg),
        recall_negative: ratio(tn, tn + fp),
    })
}
