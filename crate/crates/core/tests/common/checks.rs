//! Property checks shared by the per-module integration tests and the
//! acceptance suite. Each returns a short summary on success.

use fakerev::corpus::{TokenId, TokenSequence};
use fakerev::detect::compute_eer;
use fakerev::langmodel::{
    log_likelihood, log_likelihood_given, next_token_dist, LanguageModel, LogLikelihood, MlstmConfig, MlstmModel,
    NgramModel, Smoothing, UniformModel, PARAM_GROUPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{add_k, eer_sweep, kneser_ney, mle};

fn random_stream<R: Rng>(rng: &mut R, len: usize, vocab: usize) -> Vec<TokenId> {
    // skewed so some n-grams repeat and others are unseen
    (0..len).map(|_| (rng.gen_range(0.0f64..1.0).powi(2) * vocab as f64) as TokenId).collect()
}

/// Every conditional of random n-gram models against the brute-force
/// estimators, for orders 1-3, all smoothing modes, and every context of
/// length 0..=order-1 (including unseen ones).
pub fn smoothing_oracle(corpora: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for case in 0..corpora {
        let vocab = rng.gen_range(2..8);
        let len = rng.gen_range(3..=200);
        let stream = random_stream(&mut rng, len, vocab);
        for order in 1..=3usize {
            let modes = [
                Smoothing::Mle,
                Smoothing::AddK { k: rng.gen_range(0.01..2.0) },
                Smoothing::KneserNey { discount: rng.gen_range(0.05..0.95) },
            ];
            for smoothing in modes {
                let m = NgramModel::train(&stream, order, smoothing, vocab).map_err(|e| e.to_string())?;
                let mut contexts: Vec<Vec<TokenId>> = vec![vec![]];
                for _ in 0..6 {
                    let n = rng.gen_range(1..=order.max(1));
                    contexts.push((0..n).map(|_| rng.gen_range(0..vocab as TokenId)).collect());
                }
                if len > 3 {
                    let t = rng.gen_range(2..len);
                    contexts.push(stream[t.saturating_sub(order - 1)..t].to_vec());
                }
                for ctx in &contexts {
                    let got = m.distribution(ctx);
                    for w in 0..vocab as TokenId {
                        let want = match smoothing {
                            Smoothing::Mle => mle(&stream, order, ctx, w),
                            Smoothing::AddK { k } => add_k(&stream, order, vocab, k, ctx, w),
                            Smoothing::KneserNey { discount } => kneser_ney(&stream, order, vocab, discount, ctx, w),
                        };
                        let err = (got[w as usize] - want).abs();
                        worst = worst.max(err);
                        if err > 1e-12 {
                            return Err(format!(
                                "case {case}: order {order} {smoothing:?} ctx {ctx:?} token {w}: got {} want {want}",
                                got[w as usize]
                            ));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{checked} probabilities, max abs error {worst:.1e}"))
}

/// log P(a ++ b) = log P(a) + log P(b | a), and log P(s) equals the sum of
/// per-prefix conditionals computed from fresh states.
pub fn chain_rule(cases: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 9;
    let train = random_stream(&mut rng, 120, vocab);
    let cfg = MlstmConfig { hidden_size: 6, embed_size: 5, epochs: 1, batch_len: 16, ..Default::default() };
    let (lstm, _) = MlstmModel::train(&train, vocab, &cfg).map_err(|e| e.to_string())?;
    let uniform = UniformModel::new(vocab).unwrap();
    let ngrams: Vec<NgramModel> = [Smoothing::Mle, Smoothing::add_k(), Smoothing::kneser_ney()]
        .iter()
        .flat_map(|&s| (1..=3).map(move |o| (s, o)))
        .map(|(s, o)| NgramModel::train(&train, o, s, vocab).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(1..25);
        let seq: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
        let cut = rng.gen_range(0..=n);
        let err = match case % 3 {
            0 => additivity(&lstm, &seq, cut),
            1 => additivity(&uniform, &seq, cut),
            _ => additivity(&ngrams[case % ngrams.len()], &seq, cut),
        }
        .map_err(|e| format!("case {case}: {e}"))?;
        worst = worst.max(err);
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:.2e} exceeds 1e-9"));
    }
    Ok(format!("{cases} sequences, max deviation {worst:.1e}"))
}

fn additivity<M: LanguageModel>(m: &M, seq: &[TokenId], cut: usize) -> Result<f64, String> {
    let whole = log_likelihood(m, &TokenSequence(seq.to_vec())).map_err(|e| e.to_string())?;
    let head = log_likelihood(m, &TokenSequence(seq[..cut].to_vec())).map_err(|e| e.to_string())?;
    let tail = log_likelihood_given(m, &TokenSequence(seq[..cut].to_vec()), &TokenSequence(seq[cut..].to_vec()))
        .map_err(|e| e.to_string())?;
    let mut stepwise = 0.0;
    for t in 0..seq.len() {
        let p = next_token_dist(m, &TokenSequence(seq[..t].to_vec())).map_err(|e| e.to_string())?.prob(seq[t]);
        stepwise += p.ln();
    }
    match (whole, head, tail) {
        (LogLikelihood::Finite(w), LogLikelihood::Finite(h), LogLikelihood::Finite(t)) => {
            Ok((w - (h + t)).abs().max((w - stepwise).abs()))
        }
        (LogLikelihood::Impossible { position }, h, t) => {
            let split_ok = !h.is_finite() || !t.is_finite();
            if split_ok && stepwise == f64::NEG_INFINITY && position < seq.len() {
                Ok(0.0)
            } else {
                Err(format!("impossible whole sequence but parts {h:?} {t:?}"))
            }
        }
        (w, h, t) => Err(format!("finite whole {w:?} with impossible part {h:?} {t:?}")),
    }
}

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) per
/// parameter group, central differences with step 1e-5.
pub fn gradient_check(hidden: usize, seed: u64) -> Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 7;
    let cfg = MlstmConfig { hidden_size: hidden, embed_size: 5, rng_seed: seed, ..Default::default() };
    let mut model = MlstmModel::new(vocab, &cfg).map_err(|e| e.to_string())?;
    // move away from the symmetric initialization
    for g in model.params_mut().groups_mut() {
        for v in g.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let stream: Vec<TokenId> = (0..10).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
    let (_, analytic) = model.loss_and_gradient(&stream);
    let step = 1e-5;
    let mut out = Vec::new();
    for (gi, name) in PARAM_GROUPS.iter().enumerate() {
        let a = analytic.groups()[gi].to_vec();
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().groups()[gi][i];
            model.params_mut().groups_mut()[gi][i] = orig + step;
            let up = model.mean_nll(&stream);
            model.params_mut().groups_mut()[gi][i] = orig - step;
            let down = model.mean_nll(&stream);
            model.params_mut().groups_mut()[gi][i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) };
        out.push((*name, rel));
    }
    if let Some((name, rel)) = out.iter().find(|(_, r)| r.is_nan() || *r >= 1e-4) {
        return Err(format!("group {name}: relative error {rel:.2e}"));
    }
    Ok(out)
}

fn random_scores<R: Rng>(rng: &mut R) -> Vec<(f64, bool)> {
    let n = rng.gen_range(2..=500);
    let coarse = rng.gen_bool(0.3);
    let shift = rng.gen_range(0.0..1.5);
    let balance = rng.gen_range(0.2..0.8);
    let mut s: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let fake = rng.gen_bool(balance);
            let mut x: f64 = rng.gen_range(0.0..1.0) + if fake { shift } else { 0.0 };
            if coarse {
                x = (x * 8.0).round() / 8.0;
            }
            (x, fake)
        })
        .collect();
    s[0].1 = true;
    s[1].1 = false;
    s
}

/// `compute_eer` against the midpoint sweep on random instances (with and
/// without ties), up to 500 scores each.
pub fn eer_oracle(instances: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let s = random_scores(&mut rng);
        let got = compute_eer(&s).map_err(|e| e.to_string())?.eer;
        let want = eer_sweep(&s);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-9 {
            return Err(format!("instance {i}: got {got} want {want}"));
        }
    }
    Ok(format!("{instances} instances, max deviation {worst:.1e}"))
}

/// EER is unchanged by strictly increasing transforms of the scores.
pub fn eer_monotone_invariance(instances: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let s = random_scores(&mut rng);
        let base = compute_eer(&s).map_err(|e| e.to_string())?.eer;
        let a = rng.gen_range(0.1..5.0);
        let b = rng.gen_range(-3.0..3.0);
        let maps: [&dyn Fn(f64) -> f64; 3] =
            [&|x| a * x + b, &|x| x * x * x + a * x, &|x| 1.0 / (1.0 + (-a * x).exp())];
        for (k, f) in maps.iter().enumerate() {
            let t: Vec<(f64, bool)> = s.iter().map(|&(x, y)| (f(x), y)).collect();
            let e = compute_eer(&t).map_err(|e| e.to_string())?.eer;
            if (e - base).abs() > 1e-12 {
                return Err(format!("instance {i}, map {k}: {base} became {e}"));
            }
        }
    }
    Ok(format!("{instances} instances x 3 maps"))
}
