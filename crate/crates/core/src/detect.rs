//! Machine detection of generated reviews: rank-bin and perplexity features,
//! logistic regression on top, score-level fusion, and equal error rate.
//!
//! Scores follow one convention throughout: higher means more likely fake.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{encode_tokens, Provenance, Review, Vocabulary, BOR_ID};
use crate::langmodel::{rank_in, LanguageModel, LmError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("text has no tokens to score")]
    EmptyText,
    #[error("regression has not been trained")]
    Untrained,
    #[error("training data must contain both real and fake reviews")]
    SingleClass,
    #[error("scores must contain both real and fake examples")]
    SingleClassScores,
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error("inconsistent input: {0}")]
    Shape(String),
    #[error("fusion member {0:?} is not among the evaluated detectors")]
    UnknownMember(String),
    #[error("invalid detector configuration: {0}")]
    BadConfig(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub const DEFAULT_BIN_BOUNDS: [usize; 3] = [10, 100, 1000];

/// Upper rank bounds of the first three bins; the fourth bin is open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BinSpec {
    Fixed {
        bounds: [usize; 3],
    },
    /// 1%, 10% and 50% of the vocabulary size, for tiny vocabularies.
    Proportional,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::Fixed { bounds: DEFAULT_BIN_BOUNDS }
    }
}

impl BinSpec {
    pub fn resolve(&self, vocab_size: usize) -> Result<[usize; 3], DetectError> {
        let b = match *self {
            BinSpec::Fixed { bounds } => bounds,
            BinSpec::Proportional => {
                let b1 = (vocab_size / 100).max(1);
                let b2 = (vocab_size / 10).max(b1 + 1);
                let b3 = (vocab_size / 2).max(b2 + 1);
                [b1, b2, b3]
            }
        };
        if b[0] == 0 || b[0] >= b[1] || b[1] >= b[2] {
            return Err(DetectError::BadConfig(format!("bin bounds must be 0 < b1 < b2 < b3, got {b:?}")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBinFeature {
    /// Tokens with rank <= b1, in (b1, b2], in (b2, b3], and > b3.
    pub counts: [u64; 4],
    pub bounds: [usize; 3],
}

impl RankBinFeature {
    pub fn from_ranks(ranks: &[usize], bounds: [usize; 3]) -> Self {
        let mut counts = [0u64; 4];
        for &r in ranks {
            let bin = bounds.iter().position(|&b| r <= b).unwrap_or(3);
            counts[bin] += 1;
        }
        RankBinFeature { counts, bounds }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn as_vec(&self, normalized: bool) -> Vec<f64> {
        let n = if normalized { self.total().max(1) as f64 } else { 1.0 };
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Rank of every text token under `lm`, each given `<bor>` and the preceding
/// tokens. `<bor>` is context only and is never scored.
pub fn token_ranks<M: LanguageModel>(lm: &M, vocab: &Vocabulary, text: &str) -> Result<Vec<usize>, DetectError> {
    let ids = encode_tokens(vocab, text);
    if ids.is_empty() {
        return Err(DetectError::EmptyText);
    }
    let mut state = lm.start(None)?;
    lm.advance(&mut state, BOR_ID);
    let mut ranks = Vec::with_capacity(ids.len());
    for &t in &ids {
        ranks.push(rank_in(&lm.probs(&state), t));
        lm.advance(&mut state, t);
    }
    Ok(ranks)
}

pub fn rank_bin_features<M: LanguageModel>(
    lm: &M,
    vocab: &Vocabulary,
    text: &str,
    bins: BinSpec,
) -> Result<RankBinFeature, DetectError> {
    let bounds = bins.resolve(lm.vocab_size())?;
    Ok(RankBinFeature::from_ranks(&token_ranks(lm, vocab, text)?, bounds))
}

/// Floor applied to token probabilities so the mean NLL stays finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// (mean negative log-likelihood per token, token count).
pub fn perplexity_features<M: LanguageModel>(lm: &M, vocab: &Vocabulary, text: &str) -> Result<[f64; 2], DetectError> {
    let ids = encode_tokens(vocab, text);
    if ids.is_empty() {
        return Err(DetectError::EmptyText);
    }
    let mut state = lm.start(None)?;
    lm.advance(&mut state, BOR_ID);
    let mut nll = 0.0;
    for &t in &ids {
        nll -= lm.probs(&state)[t as usize].max(PROB_FLOOR).ln();
        lm.advance(&mut state, t);
    }
    Ok([nll / ids.len() as f64, ids.len() as f64])
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Minimize mean logistic loss + l2/2 * |w|^2 (bias unpenalized) by damped
/// Newton steps. Returns (weights, bias, report).
fn fit_logistic(xs: &[Vec<f64>], ys: &[bool], l2: f64) -> (Vec<f64>, f64, FitReport) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let objective = |theta: &DVector<f64>| {
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>() + theta[d];
            loss += softplus(z) - if y { z } else { 0.0 };
        }
        loss / n + 0.5 * l2 * theta.rows(0, d).norm_squared()
    };
    let mut theta = DVector::<f64>::zeros(d + 1);
    let initial_loss = objective(&theta);
    let mut current = initial_loss;
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let mut g = DVector::<f64>::zeros(d + 1);
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        for (x, &y) in xs.iter().zip(ys) {
            let xt = DVector::from_iterator(d + 1, x.iter().copied().chain(std::iter::once(1.0)));
            let p = sigmoid(xt.dot(&theta));
            g.axpy((p - if y { 1.0 } else { 0.0 }) / n, &xt, 1.0);
            h.ger(p * (1.0 - p) / n, &xt, &xt, 1.0);
        }
        for i in 0..d {
            g[i] += l2 * theta[i];
            h[(i, i)] += l2;
        }
        h[(d, d)] += 1e-12;
        let Some(chol) = h.cholesky() else { break };
        let delta = chol.solve(&g);
        let mut step = 1.0;
        let mut next = &theta - &delta;
        let mut next_loss = objective(&next);
        while next_loss > current && step > 1e-10 {
            step *= 0.5;
            next = &theta - step * &delta;
            next_loss = objective(&next);
        }
        if next_loss > current {
            break;
        }
        let moved = (step * &delta).amax();
        theta = next;
        current = next_loss;
        if moved < 1e-12 {
            break;
        }
    }
    let weights = theta.rows(0, d).iter().copied().collect();
    (weights, theta[d], FitReport { initial_loss, final_loss: current, iterations })
}

fn check_training(xs: &[Vec<f64>], ys: &[bool]) -> Result<(), DetectError> {
    if xs.len() != ys.len() {
        return Err(DetectError::Shape(format!("{} feature rows for {} labels", xs.len(), ys.len())));
    }
    if !(ys.iter().any(|&y| y) && ys.iter().any(|&y| !y)) {
        return Err(DetectError::SingleClass);
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(DetectError::Shape("feature rows are empty or ragged".into()));
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DetectError::Shape("non-finite feature".into()));
    }
    Ok(())
}

pub const DEFAULT_L2: f64 = 1e-4;

/// Logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub trained: bool,
}

impl LogisticRegression {
    pub fn untrained(dim: usize) -> Self {
        LogisticRegression {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            weights: vec![0.0; dim],
            bias: 0.0,
            trained: false,
        }
    }

    /// A trained model with identity standardization.
    pub fn from_weights(weights: Vec<f64>, bias: f64) -> Self {
        let d = weights.len();
        LogisticRegression { mean: vec![0.0; d], scale: vec![1.0; d], weights, bias, trained: true }
    }

    pub fn fit(xs: &[Vec<f64>], ys: &[bool], l2: f64) -> Result<(Self, FitReport), DetectError> {
        if xs.is_empty() {
            return Err(DetectError::SingleClass);
        }
        check_training(xs, ys)?;
        if !(l2 > 0.0 && l2.is_finite()) {
            return Err(DetectError::BadConfig(format!("l2 must be positive, got {l2}")));
        }
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z: Vec<Vec<f64>> = xs.iter().map(|x| (0..d).map(|j| (x[j] - mean[j]) / scale[j]).collect()).collect();
        let (weights, bias, report) = fit_logistic(&z, ys, l2);
        Ok((LogisticRegression { mean, scale, weights, bias, trained: true }, report))
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64, DetectError> {
        if !self.trained {
            return Err(DetectError::Untrained);
        }
        if x.len() != self.weights.len() {
            return Err(DetectError::Shape(format!("expected {} features, got {}", self.weights.len(), x.len())));
        }
        Ok((0..x.len()).map(|j| self.weights[j] * (x[j] - self.mean[j]) / self.scale[j]).sum::<f64>() + self.bias)
    }

    pub fn score(&self, x: &[f64]) -> Result<f64, DetectError> {
        Ok(sigmoid(self.decision(x)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorKind {
    RankBin {
        #[serde(default)]
        bins: BinSpec,
        #[serde(default)]
        normalized: bool,
    },
    Perplexity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: DetectorKind,
}

impl DetectorSpec {
    pub fn rank_bin() -> Self {
        DetectorSpec {
            name: "rank-bin".into(),
            kind: DetectorKind::RankBin { bins: BinSpec::default(), normalized: false },
        }
    }

    pub fn perplexity() -> Self {
        DetectorSpec { name: "perplexity".into(), kind: DetectorKind::Perplexity }
    }
}

/// Anything that scores a review text; higher means more likely fake.
pub trait ReviewDetector: Sync {
    fn name(&self) -> &str;
    fn score(&self, text: &str) -> Result<f64, DetectError>;
}

/// A feature extractor over a scoring language model plus its regression.
#[derive(Debug, Clone)]
pub struct Detector<'a, M> {
    spec: DetectorSpec,
    lm: &'a M,
    vocab: &'a Vocabulary,
    regression: LogisticRegression,
}

impl<'a, M: LanguageModel + Sync> Detector<'a, M> {
    pub fn new(spec: DetectorSpec, lm: &'a M, vocab: &'a Vocabulary, regression: LogisticRegression) -> Self {
        Detector { spec, lm, vocab, regression }
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn regression(&self) -> &LogisticRegression {
        &self.regression
    }

    pub fn features(&self, text: &str) -> Result<Vec<f64>, DetectError> {
        features(&self.spec, self.lm, self.vocab, text)
    }
}

impl<M: LanguageModel + Sync> ReviewDetector for Detector<'_, M> {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn score(&self, text: &str) -> Result<f64, DetectError> {
        self.regression.score(&self.features(text)?)
    }
}

pub fn features<M: LanguageModel>(
    spec: &DetectorSpec,
    lm: &M,
    vocab: &Vocabulary,
    text: &str,
) -> Result<Vec<f64>, DetectError> {
    match spec.kind {
        DetectorKind::RankBin { bins, normalized } => Ok(rank_bin_features(lm, vocab, text, bins)?.as_vec(normalized)),
        DetectorKind::Perplexity => Ok(perplexity_features(lm, vocab, text)?.to_vec()),
    }
}

fn is_fake(r: &Review) -> bool {
    r.provenance == Provenance::Fake
}

/// Fit the detector's regression on `labeled`; a review's label is its provenance.
/// Class proportions are used as given.
pub fn train_detector<'a, M: LanguageModel + Sync>(
    spec: DetectorSpec,
    lm: &'a M,
    vocab: &'a Vocabulary,
    labeled: &[Review],
    l2: f64,
) -> Result<(Detector<'a, M>, FitReport), DetectError> {
    let ys: Vec<bool> = labeled.iter().map(is_fake).collect();
    if !(ys.iter().any(|&y| y) && ys.iter().any(|&y| !y)) {
        return Err(DetectError::SingleClass);
    }
    let xs = labeled.par_iter().map(|r| features(&spec, lm, vocab, &r.text)).collect::<Result<Vec<_>, _>>()?;
    let (regression, report) = LogisticRegression::fit(&xs, &ys, l2)?;
    Ok((Detector::new(spec, lm, vocab, regression), report))
}

/// Logistic regression over raw member scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Members that received a negative weight, i.e. were anti-predictive in training.
    pub anti_predictive: Vec<String>,
}

impl FusionModel {
    pub fn name(&self) -> String {
        self.members.join(" + ")
    }

    pub fn fuse(&self, member_scores: &[f64]) -> Result<f64, DetectError> {
        if member_scores.len() != self.weights.len() {
            return Err(DetectError::Shape(format!(
                "fusion expects {} member scores, got {}",
                self.weights.len(),
                member_scores.len()
            )));
        }
        Ok(sigmoid(self.weights.iter().zip(member_scores).map(|(w, s)| w * s).sum::<f64>() + self.bias))
    }
}

/// `member_scores[m][i]` is member m's score on training example i. The
/// objective is mean logistic loss + l2/2 * |w|^2, with no standardization.
pub fn train_fusion(
    names: &[String],
    member_scores: &[Vec<f64>],
    labels: &[bool],
    l2: f64,
) -> Result<FusionModel, DetectError> {
    if names.is_empty() || names.len() != member_scores.len() {
        return Err(DetectError::Shape(format!("{} names for {} members", names.len(), member_scores.len())));
    }
    if member_scores.iter().any(|s| s.len() != labels.len()) {
        return Err(DetectError::Shape("member score vectors differ in length from the labels".into()));
    }
    if !(l2 > 0.0 && l2.is_finite()) {
        return Err(DetectError::BadConfig(format!("l2 must be positive, got {l2}")));
    }
    let xs: Vec<Vec<f64>> = (0..labels.len()).map(|i| member_scores.iter().map(|s| s[i]).collect()).collect();
    if xs.is_empty() {
        return Err(DetectError::SingleClass);
    }
    check_training(&xs, labels)?;
    let (weights, bias, _) = fit_logistic(&xs, labels, l2);
    let anti_predictive = names.iter().zip(&weights).filter(|(_, &w)| w < 0.0).map(|(n, _)| n.clone()).collect();
    Ok(FusionModel { members: names.to_vec(), weights, bias, anti_predictive })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    /// Score threshold at the FAR/FRR crossing; reviews scoring at or above it are called fake.
    pub threshold: f64,
    pub fakes: usize,
    pub reals: usize,
}

/// Equal error rate of `(score, is_fake)` pairs. FAR(t) is the fraction of
/// reals scoring >= t, FRR(t) the fraction of fakes scoring < t. Both are
/// evaluated at every distinct score and at +-infinity, and the crossing is
/// interpolated linearly between the two adjacent thresholds that bracket it.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<EerResult, DetectError> {
    if let Some(&(s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(DetectError::NonFiniteScore(s));
    }
    let mut fakes: Vec<f64> = scores.iter().filter(|p| p.1).map(|p| p.0).collect();
    let mut reals: Vec<f64> = scores.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if fakes.is_empty() || reals.is_empty() {
        return Err(DetectError::SingleClassScores);
    }
    fakes.sort_by(f64::total_cmp);
    reals.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = scores.iter().map(|p| p.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let (nf, nr) = (fakes.len() as f64, reals.len() as f64);
    let rates = |t: f64| {
        let far = (reals.len() - reals.partition_point(|&s| s < t)) as f64 / nr;
        let frr = fakes.partition_point(|&s| s < t) as f64 / nf;
        (far, frr)
    };
    let mut prev = (thresholds[0], rates(thresholds[0]));
    for &t in &thresholds[1..] {
        let (far, frr) = rates(t);
        let d = far - frr;
        if d <= 0.0 {
            let (pt, (pfar, pfrr)) = prev;
            let pd = pfar - pfrr;
            let (eer, threshold) = if d == 0.0 {
                (far, t)
            } else {
                let w = pd / (pd - d);
                let th = if pt.is_infinite() {
                    t
                } else if t.is_infinite() {
                    pt
                } else {
                    pt + w * (t - pt)
                };
                (pfar + w * (far - pfar), th)
            };
            return Ok(EerResult { eer, threshold, fakes: fakes.len(), reals: reals.len() });
        }
        prev = (t, (far, frr));
    }
    unreachable!("FAR - FRR is -1 at +infinity")
}

/// A named evaluation dataset; labels come from each review's provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub reviews: Vec<Review>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub review_id: String,
    pub detector: String,
    pub score: f64,
    pub is_fake: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub detector: String,
    pub fused: bool,
    pub per_dataset: Vec<EerResult>,
    /// Scores from every dataset pooled before computing the EER.
    pub overall: EerResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub datasets: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub fusions: Vec<FusionModel>,
    #[serde(skip)]
    pub scores: Vec<DetectorScore>,
}

impl DetectionReport {
    pub fn row(&self, detector: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.detector == detector)
    }
}

fn eer_row(name: String, fused: bool, per_set: &[Vec<(f64, bool)>]) -> Result<ReportRow, DetectError> {
    let per_dataset = per_set.iter().map(|s| compute_eer(s)).collect::<Result<Vec<_>, _>>()?;
    let pooled: Vec<(f64, bool)> = per_set.iter().flatten().copied().collect();
    Ok(ReportRow { detector: name, fused, per_dataset, overall: compute_eer(&pooled)? })
}

/// Score every review of every set with each detector and each fusion, and
/// tabulate EERs per dataset plus a pooled overall column.
pub fn evaluate_detectors(
    detectors: &[&dyn ReviewDetector],
    fusions: &[FusionModel],
    sets: &[EvalSet],
) -> Result<DetectionReport, DetectError> {
    let member_index = fusions
        .iter()
        .map(|f| {
            f.members
                .iter()
                .map(|m| {
                    detectors.iter().position(|d| d.name() == m).ok_or_else(|| DetectError::UnknownMember(m.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    // member_scores[d][s][i]
    let member_scores: Vec<Vec<Vec<f64>>> = detectors
        .iter()
        .map(|d| {
            sets.iter()
                .map(|set| set.reviews.par_iter().map(|r| d.score(&r.text)).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let labels: Vec<Vec<bool>> = sets.iter().map(|s| s.reviews.iter().map(is_fake).collect()).collect();
    let pair = |scores: &[Vec<f64>]| -> Vec<Vec<(f64, bool)>> {
        scores.iter().zip(&labels).map(|(s, l)| s.iter().copied().zip(l.iter().copied()).collect()).collect()
    };

    let mut rows = Vec::new();
    let mut dump = Vec::new();
    let mut push_scores = |name: &str, scores: &[Vec<f64>]| {
        for (set, s) in sets.iter().zip(scores) {
            for (r, &v) in set.reviews.iter().zip(s) {
                dump.push(DetectorScore {
                    review_id: r.id.clone(),
                    detector: name.to_string(),
                    score: v,
                    is_fake: is_fake(r),
                });
            }
        }
    };
    for (d, scores) in detectors.iter().zip(&member_scores) {
        rows.push(eer_row(d.name().to_string(), false, &pair(scores))?);
        push_scores(d.name(), scores);
    }
    for (f, idx) in fusions.iter().zip(&member_index) {
        let fused: Vec<Vec<f64>> = (0..sets.len())
            .map(|s| {
                (0..sets[s].reviews.len())
                    .map(|i| f.fuse(&idx.iter().map(|&d| member_scores[d][s][i]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        rows.push(eer_row(f.name(), true, &pair(&fused))?);
        push_scores(&f.name(), &fused);
    }
    Ok(DetectionReport {
        datasets: sets.iter().map(|s| s.name.clone()).collect(),
        rows,
        fusions: fusions.to_vec(),
        scores: dump,
    })
}

/// Aligned text table of EERs in percent: detector, one column per dataset, overall.
pub fn render_detection_table(report: &DetectionReport) -> String {
    let width = report.rows.iter().map(|r| r.detector.len()).max().unwrap_or(0).max("Detector".len());
    let cols: Vec<usize> = report.datasets.iter().map(|d| d.len().max(7)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Detector");
    for (d, w) in report.datasets.iter().zip(&cols) {
        let _ = write!(out, "  {d:>w$}");
    }
    let _ = writeln!(out, "  {:>7}", "Overall");
    for row in &report.rows {
        let _ = write!(out, "{:<width$}", row.detector);
        for (e, w) in row.per_dataset.iter().zip(&cols) {
            let _ = write!(out, "  {:>w$}", format!("{:.1}%", 100.0 * e.eer));
        }
        let _ = writeln!(out, "  {:>7}", format!("{:.1}%", 100.0 * row.overall.eer));
    }
    out
}

/// CSV with header `review_id,detector,score,is_fake`.
pub fn write_scores_csv<W: Write>(out: W, scores: &[DetectorScore]) -> Result<(), DetectError> {
    let mut w = csv::Writer::from_writer(out);
    for s in scores {
        w.serialize(s)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab_from_texts, Sentiment};
    use crate::langmodel::{NgramModel, Smoothing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(fakes: &[f64], reals: &[f64]) -> Vec<(f64, bool)> {
        fakes.iter().map(|&s| (s, true)).chain(reals.iter().map(|&s| (s, false))).collect()
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&pairs(&[0.9, 0.8], &[0.1, 0.2])).unwrap().eer, 0.0);
        let e = compute_eer(&pairs(&[0.9, 0.4, 0.8], &[0.1, 0.5, 0.2])).unwrap();
        assert!((e.eer - 1.0 / 3.0).abs() < 1e-12, "{e:?}");
        assert_eq!(compute_eer(&pairs(&[0.3, 0.7, 0.7], &[0.7, 0.3, 0.7])).unwrap().eer, 0.5);
        assert!(matches!(compute_eer(&pairs(&[0.1], &[])), Err(DetectError::SingleClassScores)));
        assert!(matches!(compute_eer(&pairs(&[f64::NAN], &[0.1])), Err(DetectError::NonFiniteScore(_))));
    }

    #[test]
    fn eer_threshold_separates_perfect_scores() {
        let e = compute_eer(&pairs(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert!(e.threshold > 0.2 && e.threshold <= 0.8, "{e:?}");
        assert_eq!((e.fakes, e.reals), (2, 2));
    }

    #[test]
    fn eer_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(2..30);
            let mut s: Vec<(f64, bool)> =
                (0..n).map(|_| ((rng.gen_range(0..5) as f64) / 4.0, rng.gen_bool(0.5))).collect();
            s.push((0.3, true));
            s.push((0.6, false));
            let e = compute_eer(&s).unwrap().eer;
            assert!((0.0..=1.0).contains(&e));
        }
        // perfectly inverted detector
        assert_eq!(compute_eer(&pairs(&[0.1, 0.2], &[0.8, 0.9])).unwrap().eer, 1.0);
    }

    #[test]
    fn rank_bins_all_top() {
        let b = RankBinFeature::from_ranks(&[1, 1, 1, 1, 1], DEFAULT_BIN_BOUNDS);
        assert_eq!(b.counts, [5, 0, 0, 0]);
        let b = RankBinFeature::from_ranks(&[10, 11, 100, 101, 1000, 1001], DEFAULT_BIN_BOUNDS);
        assert_eq!(b.counts, [1, 2, 2, 1]);
        assert_eq!(b.as_vec(true), vec![1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0]);
    }

    #[test]
    fn proportional_bins() {
        assert_eq!(BinSpec::Proportional.resolve(1000).unwrap(), [10, 100, 500]);
        assert_eq!(BinSpec::Proportional.resolve(12).unwrap(), [1, 2, 6]);
        assert!(BinSpec::Fixed { bounds: [5, 5, 9] }.resolve(100).is_err());
    }

    fn toy() -> (Vocabulary, NgramModel) {
        let texts = ["a b c a b c a b d", "a b c d d a"];
        let v = build_vocab_from_texts(texts.iter().copied(), 1).unwrap();
        let stream = crate::corpus::concat_training_text(
            &v,
            &texts
                .iter()
                .enumerate()
                .map(|(i, t)| Review::real(i.to_string(), *t, Sentiment::Positive).unwrap())
                .collect::<Vec<_>>(),
        );
        let m = NgramModel::train(&stream, 2, Smoothing::add_k(), v.len()).unwrap();
        (v, m)
    }

    #[test]
    fn ranks_match_full_sort() {
        let (v, m) = toy();
        let text = "a b c d a zzz";
        let ranks = token_ranks(&m, &v, text).unwrap();
        let ids = encode_tokens(&v, text);
        let mut ctx = vec![BOR_ID];
        for (i, &t) in ids.iter().enumerate() {
            let p = m.distribution(&ctx);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            assert_eq!(ranks[i], 1 + order.iter().position(|&j| j == t as usize).unwrap());
            ctx.push(t);
        }
        let f = rank_bin_features(&m, &v, text, BinSpec::Fixed { bounds: [1, 2, 3] }).unwrap();
        assert_eq!(f.total(), 6);
        assert_eq!(f, RankBinFeature::from_ranks(&ranks, [1, 2, 3]));
        assert!(matches!(token_ranks(&m, &v, "   "), Err(DetectError::EmptyText)));
    }

    #[test]
    fn zero_weight_regression_scores_one_half() {
        let (v, m) = toy();
        let d = Detector::new(DetectorSpec::rank_bin(), &m, &v, LogisticRegression::from_weights(vec![0.0; 4], 0.0));
        assert_eq!(d.score("a b c").unwrap(), 0.5);
        assert_eq!(d.score("d d a").unwrap(), 0.5);
        let u = Detector::new(DetectorSpec::perplexity(), &m, &v, LogisticRegression::untrained(2));
        assert!(matches!(u.score("a"), Err(DetectError::Untrained)));
    }

    #[test]
    fn separable_features_train_to_zero_eer() {
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let ys: Vec<bool> = (0..30).map(|i| i >= 10).collect();
        let (lr, rep) = LogisticRegression::fit(&xs, &ys, DEFAULT_L2).unwrap();
        assert!(rep.final_loss < rep.initial_loss);
        let scored: Vec<(f64, bool)> = xs.iter().zip(&ys).map(|(x, &y)| (lr.score(x).unwrap(), y)).collect();
        assert_eq!(compute_eer(&scored).unwrap().eer, 0.0);
        assert_eq!(LogisticRegression::fit(&xs, &ys, DEFAULT_L2).unwrap().0, lr);
        assert!(matches!(LogisticRegression::fit(&xs, &[true; 30], DEFAULT_L2), Err(DetectError::SingleClass)));
    }

    #[test]
    fn detector_training_needs_both_classes() {
        let (v, m) = toy();
        let reals = vec![Review::real("r", "a b", Sentiment::Positive).unwrap()];
        assert!(matches!(
            train_detector(DetectorSpec::rank_bin(), &m, &v, &reals, DEFAULT_L2),
            Err(DetectError::SingleClass)
        ));
    }

    #[test]
    fn fusion_shape_errors() {
        let names = vec!["a".to_string(), "b".to_string()];
        let r = train_fusion(&names, &[vec![0.1, 0.2], vec![0.3]], &[true, false], DEFAULT_L2);
        assert!(matches!(r, Err(DetectError::Shape(_))));
        let f = FusionModel { members: names, weights: vec![1.0, 1.0], bias: 0.0, anti_predictive: vec![] };
        assert!(f.fuse(&[0.1]).is_err());
        assert_eq!(f.name(), "a + b");
    }

    struct Fixed(&'static str, Vec<(String, f64)>);

    impl ReviewDetector for Fixed {
        fn name(&self) -> &str {
            self.0
        }
        fn score(&self, text: &str) -> Result<f64, DetectError> {
            Ok(self.1.iter().find(|(t, _)| t == text).unwrap().1)
        }
    }

    #[test]
    fn report_layout_and_pooling() {
        let mk = |id: &str, fake: bool| {
            if fake {
                Review::fake(id, id, Sentiment::Positive, "s").unwrap()
            } else {
                Review::real(id, id, Sentiment::Positive).unwrap()
            }
        };
        let a = EvalSet { name: "amazon".into(), reviews: vec![mk("a1", true), mk("a2", false)] };
        let b = EvalSet { name: "yelp".into(), reviews: vec![mk("b1", true), mk("b2", false)] };
        let det = Fixed("d", vec![("a1".into(), 0.9), ("a2".into(), 0.1), ("b1".into(), 0.3), ("b2".into(), 0.2)]);
        let fusion = FusionModel { members: vec!["d".into()], weights: vec![2.0], bias: -1.0, anti_predictive: vec![] };
        let rep = evaluate_detectors(&[&det], &[fusion], &[a, b]).unwrap();
        assert_eq!(rep.datasets, ["amazon", "yelp"]);
        assert_eq!(rep.rows.len(), 2);
        let row = rep.row("d").unwrap();
        assert_eq!((row.per_dataset[0].eer, row.per_dataset[1].eer), (0.0, 0.0));
        // pooled: fakes {0.9, 0.3}, reals {0.1, 0.2} still separate
        assert_eq!(row.overall.eer, 0.0);
        assert_eq!(rep.scores.len(), 8);
        let t = render_detection_table(&rep);
        assert!(t.lines().next().unwrap().contains("amazon"));
        assert!(t.lines().next().unwrap().trim_end().ends_with("Overall"));
        let mut csv = Vec::new();
        write_scores_csv(&mut csv, &rep.scores).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("review_id,detector,score,is_fake\n"));
        assert!(csv.contains("a1,d,0.9,true"));
        let missing =
            FusionModel { members: vec!["zz".into()], weights: vec![1.0], bias: 0.0, anti_predictive: vec![] };
        assert!(matches!(evaluate_detectors(&[&det], &[missing], &[]), Err(DetectError::UnknownMember(_))));
    }
}
