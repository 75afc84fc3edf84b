//! Autoregressive language models.
//!
//! Every model exposes the same incremental interface: start a state, feed it
//! tokens, and read off the next-token distribution. The sequence-level
//! operations (likelihood, perplexity, ranking, sampling) are written once on
//! top of that interface, so the chain rule holds for every model by
//! construction.

mod mlstm;
mod neuron;
mod ngram;

pub use mlstm::{Gradients, MlstmConfig, MlstmModel, MlstmParams, MlstmState, TrainReport, PARAM_GROUPS};
pub use neuron::{find_sentiment_neuron, select_neuron, SentimentNeuron, LOW_CONFIDENCE};
pub(crate) use ngram::Followers;
pub use ngram::{NgramModel, NgramState, Smoothing};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, TokenSequence, BOR_ID, EOR_ID};

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("model has not been trained")]
    Untrained,
    #[error("training stream of length {len} is shorter than model order {order}")]
    StreamTooShort { len: usize, order: usize },
    #[error("token id {id} is outside the vocabulary of size {size}")]
    InvalidToken { id: TokenId, size: usize },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("invalid sampler configuration: {0}")]
    BadSampler(String),
    #[error("this model kind does not support neuron clamping")]
    ClampUnsupported,
    #[error("clamp index {index} out of range for hidden size {hidden}")]
    ClampOutOfRange { index: usize, hidden: usize },
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("perplexity of an empty sequence is undefined")]
    EmptySequence,
    #[error("no token has non-zero probability in this context")]
    NoSupport,
    #[error("labeled set must contain both sentiment classes")]
    SingleClass,
}

/// Overwrite one hidden unit with a fixed value at every recurrence step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clamp {
    pub neuron: usize,
    pub value: f64,
}

/// Incremental interface shared by every language model.
pub trait LanguageModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Fresh state with an empty context. Fails on untrained models and on
    /// clamps the model cannot honour.
    fn start(&self, clamp: Option<Clamp>) -> Result<Self::State, LmError>;

    /// Consume one token. Callers validate the id.
    fn advance(&self, state: &mut Self::State, token: TokenId);

    /// P(next token | consumed context), one entry per vocabulary id.
    fn probs(&self, state: &Self::State) -> Vec<f64>;

    /// Unnormalized log-scores whose softmax is `probs`.
    fn logits(&self, state: &Self::State) -> Vec<f64> {
        self.probs(state).into_iter().map(f64::ln).collect()
    }
}

/// Uniform distribution over the vocabulary; the untrained baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformModel {
    vocab_size: usize,
}

impl UniformModel {
    pub fn new(vocab_size: usize) -> Result<Self, LmError> {
        if vocab_size == 0 {
            return Err(LmError::BadConfig("empty vocabulary".into()));
        }
        Ok(UniformModel { vocab_size })
    }
}

impl LanguageModel for UniformModel {
    type State = ();

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, clamp: Option<Clamp>) -> Result<(), LmError> {
        match clamp {
            Some(_) => Err(LmError::ClampUnsupported),
            None => Ok(()),
        }
    }

    fn advance(&self, _: &mut (), _: TokenId) {}

    fn probs(&self, _: &()) -> Vec<f64> {
        vec![1.0 / self.vocab_size as f64; self.vocab_size]
    }
}

/// Any of the supported model families, for storage and configuration-driven use.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Ngram(NgramModel),
    Mlstm(MlstmModel),
    Uniform(UniformModel),
}

#[derive(Debug, Clone)]
pub enum AnyState {
    Ngram(NgramState),
    Mlstm(MlstmState),
    Uniform,
}

impl AnyModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Ngram(_) => "ngram",
            AnyModel::Mlstm(_) => "mlstm",
            AnyModel::Uniform(_) => "uniform",
        }
    }

    pub fn as_mlstm(&self) -> Option<&MlstmModel> {
        match self {
            AnyModel::Mlstm(m) => Some(m),
            _ => None,
        }
    }
}

impl LanguageModel for AnyModel {
    type State = AnyState;

    fn vocab_size(&self) -> usize {
        match self {
            AnyModel::Ngram(m) => m.vocab_size(),
            AnyModel::Mlstm(m) => m.vocab_size(),
            AnyModel::Uniform(m) => m.vocab_size(),
        }
    }

    fn start(&self, clamp: Option<Clamp>) -> Result<AnyState, LmError> {
        Ok(match self {
            AnyModel::Ngram(m) => AnyState::Ngram(m.start(clamp)?),
            AnyModel::Mlstm(m) => AnyState::Mlstm(m.start(clamp)?),
            AnyModel::Uniform(m) => {
                m.start(clamp)?;
                AnyState::Uniform
            }
        })
    }

    fn advance(&self, state: &mut AnyState, token: TokenId) {
        match (self, state) {
            (AnyModel::Ngram(m), AnyState::Ngram(s)) => m.advance(s, token),
            (AnyModel::Mlstm(m), AnyState::Mlstm(s)) => m.advance(s, token),
            (AnyModel::Uniform(_), AnyState::Uniform) => {}
            _ => unreachable!("state does not belong to this model"),
        }
    }

    fn probs(&self, state: &AnyState) -> Vec<f64> {
        match (self, state) {
            (AnyModel::Ngram(m), AnyState::Ngram(s)) => m.probs(s),
            (AnyModel::Mlstm(m), AnyState::Mlstm(s)) => m.probs(s),
            (AnyModel::Uniform(m), AnyState::Uniform) => m.probs(&()),
            _ => unreachable!("state does not belong to this model"),
        }
    }

    fn logits(&self, state: &AnyState) -> Vec<f64> {
        match (self, state) {
            (AnyModel::Ngram(m), AnyState::Ngram(s)) => m.logits(s),
            (AnyModel::Mlstm(m), AnyState::Mlstm(s)) => m.logits(s),
            (AnyModel::Uniform(m), AnyState::Uniform) => m.logits(&()),
            _ => unreachable!("state does not belong to this model"),
        }
    }
}

pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// A validated next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    probs: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LmError> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(LmError::BadConfig("probability outside [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(LmError::BadConfig(format!("distribution sums to {total}")));
        }
        Ok(NextTokenDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    /// Most probable token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// 1-based rank under descending probability, ties by ascending id.
    pub fn rank_of(&self, token: TokenId) -> Result<usize, LmError> {
        let t = token as usize;
        let p = *self.probs.get(t).ok_or(LmError::InvalidToken { id: token, size: self.probs.len() })?;
        Ok(1 + rank_ahead(&self.probs, t, p))
    }
}

fn rank_ahead(probs: &[f64], t: usize, p: f64) -> usize {
    probs.iter().enumerate().filter(|&(j, &q)| q > p || (q == p && j < t)).count()
}

/// Rank of `token` among `probs`; shared with the detectors.
pub(crate) fn rank_in(probs: &[f64], token: TokenId) -> usize {
    let t = token as usize;
    1 + rank_ahead(probs, t, probs[t])
}

fn check_ids(ids: &[TokenId], size: usize) -> Result<(), LmError> {
    match ids.iter().find(|&&id| id as usize >= size) {
        Some(&id) => Err(LmError::InvalidToken { id, size }),
        None => Ok(()),
    }
}

/// Run a fresh state through `context`.
pub fn state_after<M: LanguageModel>(
    model: &M,
    context: &[TokenId],
    clamp: Option<Clamp>,
) -> Result<M::State, LmError> {
    check_ids(context, model.vocab_size())?;
    let mut state = model.start(clamp)?;
    for &t in context {
        model.advance(&mut state, t);
    }
    Ok(state)
}

pub fn next_token_dist<M: LanguageModel>(model: &M, context: &TokenSequence) -> Result<NextTokenDistribution, LmError> {
    let state = state_after(model, context.ids(), None)?;
    NextTokenDistribution::new(model.probs(&state))
}

/// Sum of log conditionals in nats. A conditional that is exactly zero is
/// reported as `Impossible` rather than folded into a float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogLikelihood {
    Finite(f64),
    Impossible { position: usize },
}

impl LogLikelihood {
    pub fn value(self) -> f64 {
        match self {
            LogLikelihood::Finite(v) => v,
            LogLikelihood::Impossible { .. } => f64::NEG_INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, LogLikelihood::Finite(_))
    }
}

/// log P(seq) with every token scored, the first one against an empty context.
pub fn log_likelihood<M: LanguageModel>(model: &M, seq: &TokenSequence) -> Result<LogLikelihood, LmError> {
    log_likelihood_given(model, &TokenSequence::default(), seq)
}

/// log P(seq | context): only `seq` tokens are scored.
pub fn log_likelihood_given<M: LanguageModel>(
    model: &M,
    context: &TokenSequence,
    seq: &TokenSequence,
) -> Result<LogLikelihood, LmError> {
    check_ids(seq.ids(), model.vocab_size())?;
    let mut state = state_after(model, context.ids(), None)?;
    let mut total = 0.0;
    for (pos, &t) in seq.ids().iter().enumerate() {
        let p = model.probs(&state)[t as usize];
        if p <= 0.0 {
            return Ok(LogLikelihood::Impossible { position: pos });
        }
        total += p.ln();
        model.advance(&mut state, t);
    }
    Ok(LogLikelihood::Finite(total))
}

/// exp(-loglik / T). Infinite when the sequence is impossible under the model.
pub fn perplexity<M: LanguageModel>(model: &M, seq: &TokenSequence) -> Result<f64, LmError> {
    if seq.is_empty() {
        return Err(LmError::EmptySequence);
    }
    let ll = log_likelihood(model, seq)?.value();
    Ok((-ll / seq.len() as f64).exp())
}

pub fn token_rank<M: LanguageModel>(model: &M, context: &TokenSequence, token: TokenId) -> Result<usize, LmError> {
    if token as usize >= model.vocab_size() {
        return Err(LmError::InvalidToken { id: token, size: model.vocab_size() });
    }
    next_token_dist(model, context)?.rank_of(token)
}

pub const DEFAULT_MAX_LEN: usize = 165;
pub const DEFAULT_TOP_K: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub max_len: usize,
    /// Boundary tokens (`<eor>`, `<bor>`) are masked until this many tokens
    /// have been generated.
    pub min_len: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub rng_seed: u64,
    pub clamp: Option<Clamp>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_len: DEFAULT_MAX_LEN,
            min_len: 1,
            temperature: 1.0,
            top_k: DEFAULT_TOP_K,
            rng_seed: 0,
            clamp: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<(), LmError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LmError::BadSampler(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(LmError::BadSampler(format!("top_k must lie in 1..={vocab_size}, got {}", self.top_k)));
        }
        if self.max_len == 0 || self.min_len > self.max_len {
            return Err(LmError::BadSampler(format!(
                "need 1 <= max_len and min_len <= max_len, got min {} max {}",
                self.min_len, self.max_len
            )));
        }
        if let Some(c) = self.clamp {
            if c.value != 1.0 && c.value != -1.0 {
                return Err(LmError::BadSampler(format!("clamp value must be +1 or -1, got {}", c.value)));
            }
        }
        Ok(())
    }
}

/// Sample a continuation of `seed`. The returned sequence excludes the seed
/// and the terminating `<eor>`.
pub fn sample<M: LanguageModel>(
    model: &M,
    seed: &TokenSequence,
    cfg: &SamplerConfig,
) -> Result<TokenSequence, LmError> {
    sample_observed(model, seed, cfg, |_| {})
}

/// Clamped sampling: `cfg.clamp` must name a unit of a trained recurrent model.
pub fn sample_clamped(model: &MlstmModel, seed: &TokenSequence, cfg: &SamplerConfig) -> Result<TokenSequence, LmError> {
    sample(model, seed, cfg)
}

/// `sample`, calling `observe` on every state a token is drawn from.
pub fn sample_observed<M, F>(
    model: &M,
    seed: &TokenSequence,
    cfg: &SamplerConfig,
    mut observe: F,
) -> Result<TokenSequence, LmError>
where
    M: LanguageModel,
    F: FnMut(&M::State),
{
    cfg.validate(model.vocab_size())?;
    let mut state = state_after(model, seed.ids(), cfg.clamp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        observe(&state);
        let mut logits = model.logits(&state);
        if out.len() < cfg.min_len {
            for boundary in [EOR_ID, BOR_ID] {
                if let Some(l) = logits.get_mut(boundary as usize) {
                    *l = f64::NEG_INFINITY;
                }
            }
        }
        let token = draw(&logits, cfg.temperature, cfg.top_k, &mut rng)?;
        if token == EOR_ID {
            break;
        }
        out.push(token);
        model.advance(&mut state, token);
    }
    Ok(TokenSequence(out))
}

/// logits / temperature, keep the `top_k` best (ties to lower id), softmax, draw.
fn draw<R: Rng>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> Result<TokenId, LmError> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).filter(|&i| scaled[i] > f64::NEG_INFINITY).collect();
    if order.is_empty() {
        return Err(LmError::NoSupport);
    }
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    order.sort_unstable();

    let max = order.iter().map(|&i| scaled[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (&i, w) in order.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(i as TokenId);
        }
    }
    Ok(*order.last().expect("non-empty") as TokenId)
}
