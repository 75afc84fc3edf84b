//! Locating the hidden unit that tracks sentiment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LmError, MlstmModel};
use crate::corpus::{Sentiment, TokenSequence};

/// Correlations weaker than this are flagged as low confidence.
pub const LOW_CONFIDENCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentNeuron {
    pub index: usize,
    /// +1 when the unit rises with positive sentiment, -1 otherwise.
    pub polarity: f64,
    /// Point-biserial correlation of the unit with the positive label.
    pub correlation: f64,
    pub low_confidence: bool,
}

/// Pearson correlation between `xs` and a 0/1 label; 0 when either side is constant.
fn point_biserial(xs: &[f64], labels: &[bool]) -> f64 {
    let n = xs.len() as f64;
    let ys: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Pick the unit with the largest absolute correlation with the label.
/// `activations[i]` is the hidden vector for example i. Ties go to the lower index.
pub fn select_neuron(activations: &[Vec<f64>], labels: &[Sentiment]) -> Result<SentimentNeuron, LmError> {
    let positive: Vec<bool> = labels.iter().map(|&s| s == Sentiment::Positive).collect();
    if !(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p)) {
        return Err(LmError::SingleClass);
    }
    let width = activations.first().map_or(0, Vec::len);
    if width == 0 || activations.len() != labels.len() || activations.iter().any(|a| a.len() != width) {
        return Err(LmError::BadConfig("activation matrix is empty or ragged".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for unit in 0..width {
        let column: Vec<f64> = activations.iter().map(|a| a[unit]).collect();
        let r = point_biserial(&column, &positive);
        if best.is_none_or(|(_, b)| r.abs() > b.abs()) {
            best = Some((unit, r));
        }
    }
    let (index, correlation) = best.expect("width > 0");
    Ok(SentimentNeuron {
        index,
        polarity: if correlation < 0.0 { -1.0 } else { 1.0 },
        correlation,
        low_confidence: correlation.abs() < LOW_CONFIDENCE,
    })
}

/// Final-step hidden activations of every labeled sequence, correlated with the label.
pub fn find_sentiment_neuron(
    model: &MlstmModel,
    labeled: &[(TokenSequence, Sentiment)],
) -> Result<SentimentNeuron, LmError> {
    if !model.is_trained() {
        return Err(LmError::Untrained);
    }
    let activations: Vec<Vec<f64>> = labeled.par_iter().map(|(seq, _)| model.final_hidden(seq.ids())).collect();
    let labels: Vec<Sentiment> = labeled.iter().map(|(_, s)| *s).collect();
    select_neuron(&activations, &labels)
}
