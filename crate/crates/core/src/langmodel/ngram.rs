use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Clamp, LanguageModel, LmError};
use crate::corpus::TokenId;

pub const DEFAULT_KN_DISCOUNT: f64 = 0.75;
pub const DEFAULT_ADD_K: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Smoothing {
    /// Relative frequencies. An unseen context backs off to its longest seen suffix.
    Mle,
    /// (c(h,w) + k) / (c(h) + k|V|)
    AddK { k: f64 },
    /// Interpolated Kneser-Ney with a single absolute discount.
    KneserNey { discount: f64 },
}

impl Smoothing {
    pub fn kneser_ney() -> Self {
        Smoothing::KneserNey { discount: DEFAULT_KN_DISCOUNT }
    }

    pub fn add_k() -> Self {
        Smoothing::AddK { k: DEFAULT_ADD_K }
    }

    pub fn validate(self) -> Result<(), LmError> {
        match self {
            Smoothing::Mle => Ok(()),
            Smoothing::AddK { k } if k > 0.0 && k.is_finite() => Ok(()),
            Smoothing::KneserNey { discount } if discount > 0.0 && discount < 1.0 => Ok(()),
            other => Err(LmError::BadConfig(format!("invalid smoothing parameter in {other:?}"))),
        }
    }
}

/// Occurrence counts of the tokens that follow one context.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Followers {
    pub total: u64,
    pub next: BTreeMap<TokenId, u64>,
}

impl Followers {
    fn add(&mut self, token: TokenId, n: u64) {
        *self.next.entry(token).or_default() += n;
        self.total += n;
    }

    fn count(&self, token: TokenId) -> u64 {
        self.next.get(&token).copied().unwrap_or(0)
    }
}

type Table = HashMap<Vec<TokenId>, Followers>;

/// Count-based n-gram model over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab_size: usize,
    smoothing: Smoothing,
    /// `raw[j]`: context of length j -> counts of following tokens.
    raw: Vec<Table>,
    /// `cont[j]`, j < order-1: context of length j -> number of distinct
    /// left extensions of `context + w`, per w.
    cont: Vec<Table>,
}

/// The last `order - 1` consumed tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NgramState {
    history: Vec<TokenId>,
}

impl NgramModel {
    pub fn train(stream: &[TokenId], order: usize, smoothing: Smoothing, vocab_size: usize) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::BadConfig("n-gram order must be at least 1".into()));
        }
        smoothing.validate()?;
        if stream.is_empty() || stream.len() < order {
            return Err(LmError::StreamTooShort { len: stream.len(), order });
        }
        if let Some(&id) = stream.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(LmError::InvalidToken { id, size: vocab_size });
        }
        let k = order - 1;
        let mut raw: Vec<Table> = vec![HashMap::new(); k + 1];
        for t in 0..stream.len() {
            for (j, table) in raw.iter_mut().enumerate().take(k.min(t) + 1) {
                table.entry(stream[t - j..t].to_vec()).or_default().add(stream[t], 1);
            }
        }
        Ok(Self::from_raw(order, vocab_size, smoothing, raw))
    }

    pub(crate) fn from_raw(order: usize, vocab_size: usize, smoothing: Smoothing, raw: Vec<Table>) -> Self {
        let k = order - 1;
        let mut cont: Vec<Table> = vec![HashMap::new(); k];
        for j in 0..k {
            // every (v, ctx...) context of length j+1 followed by w contributes
            // one distinct left extension to (ctx, w)
            for (ctx, followers) in &raw[j + 1] {
                let entry = cont[j].entry(ctx[1..].to_vec()).or_default();
                for &w in followers.next.keys() {
                    entry.add(w, 1);
                }
            }
        }
        NgramModel { order, vocab_size, smoothing, raw, cont }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub(crate) fn raw_tables(&self) -> &[Table] {
        &self.raw
    }

    /// Full conditional distribution given an arbitrary context; only the
    /// last `order - 1` tokens matter.
    pub fn distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let j = context.len().min(self.order - 1);
        let ctx = &context[context.len() - j..];
        match self.smoothing {
            Smoothing::Mle => self.mle(ctx),
            Smoothing::AddK { k } => self.add_k(ctx, k),
            Smoothing::KneserNey { discount } => self.kneser_ney(ctx, discount),
        }
    }

    fn mle(&self, ctx: &[TokenId]) -> Vec<f64> {
        let mut ctx = ctx;
        loop {
            if let Some(f) = self.raw[ctx.len()].get(ctx).filter(|f| f.total > 0) {
                let mut p = vec![0.0; self.vocab_size];
                for (&w, &c) in &f.next {
                    p[w as usize] = c as f64 / f.total as f64;
                }
                return p;
            }
            // the empty context is always present for a non-empty stream
            ctx = &ctx[1..];
        }
    }

    fn add_k(&self, ctx: &[TokenId], k: f64) -> Vec<f64> {
        let v = self.vocab_size as f64;
        let (total, f) = match self.raw[ctx.len()].get(ctx) {
            Some(f) => (f.total as f64, Some(f)),
            None => (0.0, None),
        };
        let denom = total + k * v;
        (0..self.vocab_size)
            .map(|w| {
                let c = f.map_or(0, |f| f.count(w as TokenId)) as f64;
                (c + k) / denom
            })
            .collect()
    }

    /// Built bottom-up: uniform, then each suffix of the context from the
    /// empty one to the full one. Lower levels use continuation counts, the
    /// top level raw counts.
    fn kneser_ney(&self, ctx: &[TokenId], d: f64) -> Vec<f64> {
        let mut p = vec![1.0 / self.vocab_size as f64; self.vocab_size];
        let top = ctx.len();
        for j in 0..=top {
            let suffix = &ctx[top - j..];
            let table = if j == top { &self.raw[j] } else { &self.cont[j] };
            let Some(f) = table.get(suffix).filter(|f| f.total > 0) else {
                continue;
            };
            let total = f.total as f64;
            let gamma = d * f.next.len() as f64 / total;
            for (w, pw) in p.iter_mut().enumerate() {
                let c = f.count(w as TokenId) as f64;
                *pw = (c - d).max(0.0) / total + gamma * *pw;
            }
        }
        p
    }
}

impl LanguageModel for NgramModel {
    type State = NgramState;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, clamp: Option<Clamp>) -> Result<NgramState, LmError> {
        match clamp {
            Some(_) => Err(LmError::ClampUnsupported),
            None => Ok(NgramState::default()),
        }
    }

    fn advance(&self, state: &mut NgramState, token: TokenId) {
        let k = self.order - 1;
        if k == 0 {
            return;
        }
        if state.history.len() == k {
            state.history.remove(0);
        }
        state.history.push(token);
    }

    fn probs(&self, state: &NgramState) -> Vec<f64> {
        self.distribution(&state.history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::langmodel::{log_likelihood, next_token_dist, perplexity, sample, token_rank, SamplerConfig};

    // a=3, b=4 in a vocabulary with the three reserved ids in front
    const A: TokenId = 3;
    const B: TokenId = 4;
    const V: usize = 5;

    fn abab(order: usize) -> NgramModel {
        NgramModel::train(&[A, B, A, B, A], order, Smoothing::Mle, V).unwrap()
    }

    #[test]
    fn bigram_mle_counts() {
        let m = abab(2);
        let d = m.distribution(&[A]);
        assert_eq!(d[B as usize], 1.0);
        assert_eq!(m.distribution(&[B])[A as usize], 1.0);
        let seq = TokenSequence(vec![A]);
        assert_eq!(next_token_dist(&m, &seq).unwrap().argmax(), B);
        assert_eq!(token_rank(&m, &seq, B).unwrap(), 1);
    }

    #[test]
    fn unigram_mle_counts() {
        let m = abab(1);
        assert_eq!(m.distribution(&[])[A as usize], 3.0 / 5.0);
        assert_eq!(m.distribution(&[B, B])[A as usize], 3.0 / 5.0);
    }

    #[test]
    fn too_short_streams_are_rejected() {
        assert!(matches!(
            NgramModel::train(&[], 1, Smoothing::Mle, V),
            Err(LmError::StreamTooShort { len: 0, order: 1 })
        ));
        assert!(NgramModel::train(&[A, B], 3, Smoothing::Mle, V).is_err());
        assert!(NgramModel::train(&[A, 9], 1, Smoothing::Mle, V).is_err());
    }

    #[test]
    fn bigram_loglik_with_unigram_start() {
        let m = abab(2);
        let ll = log_likelihood(&m, &TokenSequence(vec![A, B])).unwrap().value();
        let expect = 0.6f64.ln() + 1.0f64.ln();
        assert!((ll - expect).abs() < 1e-15);
        let ppl = perplexity(&m, &TokenSequence(vec![A, B])).unwrap();
        assert!((ppl - (-(0.6f64.ln()) / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn greedy_continuation_after_a_is_b() {
        let m = abab(2);
        let cfg = SamplerConfig { top_k: 1, max_len: 4, ..Default::default() };
        let out = sample(&m, &TokenSequence(vec![A]), &cfg).unwrap();
        assert_eq!(out.ids()[0], B);
    }

    #[test]
    fn markov_window() {
        let stream: Vec<TokenId> = [3, 4, 5, 3, 3, 4, 6, 5, 4, 3, 6].to_vec();
        for smoothing in [Smoothing::Mle, Smoothing::add_k(), Smoothing::kneser_ney()] {
            let m = NgramModel::train(&stream, 3, smoothing, 7).unwrap();
            assert_eq!(m.distribution(&[5, 6, 3, 4]), m.distribution(&[4, 3, 4]));
        }
    }

    #[test]
    fn smoothed_distributions_normalize_and_cover_vocab() {
        let stream: Vec<TokenId> = [3, 4, 5, 3, 3, 4, 6, 5, 4, 3, 6].to_vec();
        for smoothing in [Smoothing::add_k(), Smoothing::kneser_ney()] {
            let m = NgramModel::train(&stream, 3, smoothing, 9).unwrap();
            for ctx in [&[][..], &[3], &[8, 8], &[4, 6]] {
                let d = m.distribution(ctx);
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(d.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn bad_smoothing_parameters() {
        for s in [Smoothing::AddK { k: 0.0 }, Smoothing::KneserNey { discount: 1.5 }] {
            assert!(NgramModel::train(&[3, 4], 1, s, 5).is_err());
        }
    }
}
