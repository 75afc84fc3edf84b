//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use fakerev::corpus::TokenId;

pub mod checks;
pub mod scenario;
pub mod toy;

/// Number of positions t with `stream[t-len(ctx)..t] == ctx` and
/// `stream[t] == w` (`w = None` counts every follower).
fn scan(stream: &[TokenId], ctx: &[TokenId], w: Option<TokenId>) -> u64 {
    let j = ctx.len();
    (j..stream.len()).filter(|&t| &stream[t - j..t] == ctx && w.is_none_or(|w| stream[t] == w)).count() as u64
}

/// Distinct left neighbours v such that `v ctx w` occurs in the stream.
fn left_extensions(stream: &[TokenId], ctx: &[TokenId], w: TokenId) -> u64 {
    let j = ctx.len();
    let mut seen = BTreeSet::new();
    for t in j + 1..stream.len() {
        if &stream[t - j..t] == ctx && stream[t] == w {
            seen.insert(stream[t - j - 1]);
        }
    }
    seen.len() as u64
}

fn effective(order: usize, ctx: &[TokenId]) -> &[TokenId] {
    let k = order - 1;
    &ctx[ctx.len().saturating_sub(k)..]
}

pub fn mle(stream: &[TokenId], order: usize, ctx: &[TokenId], w: TokenId) -> f64 {
    let mut ctx = effective(order, ctx);
    loop {
        let total = scan(stream, ctx, None);
        if total > 0 {
            return scan(stream, ctx, Some(w)) as f64 / total as f64;
        }
        ctx = &ctx[1..];
    }
}

pub fn add_k(stream: &[TokenId], order: usize, vocab: usize, k: f64, ctx: &[TokenId], w: TokenId) -> f64 {
    let ctx = effective(order, ctx);
    (scan(stream, ctx, Some(w)) as f64 + k) / (scan(stream, ctx, None) as f64 + k * vocab as f64)
}

/// Interpolated Kneser-Ney written as the textbook recursion: the highest
/// level uses raw counts, every lower level continuation counts, and the
/// recursion bottoms out in the uniform distribution.
pub fn kneser_ney(stream: &[TokenId], order: usize, vocab: usize, d: f64, ctx: &[TokenId], w: TokenId) -> f64 {
    let ctx = effective(order, ctx);
    kn_level(stream, vocab, d, ctx, ctx.len(), w)
}

fn kn_level(stream: &[TokenId], vocab: usize, d: f64, full: &[TokenId], j: usize, w: TokenId) -> f64 {
    let lower = |w| if j == 0 { 1.0 / vocab as f64 } else { kn_level(stream, vocab, d, full, j - 1, w) };
    let ctx = &full[full.len() - j..];
    let top = j == full.len();
    let count = |x: TokenId| if top { scan(stream, ctx, Some(x)) } else { left_extensions(stream, ctx, x) };
    let counts: Vec<u64> = (0..vocab as TokenId).map(count).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return lower(w);
    }
    let types = counts.iter().filter(|&&c| c > 0).count() as f64;
    let c = counts[w as usize] as f64;
    (c - d).max(0.0) / total as f64 + d * types / total as f64 * lower(w)
}

/// EER by sweeping thresholds placed below, between and above the distinct
/// scores, then intersecting the piecewise-linear (FAR, FRR) curve with the
/// diagonal.
pub fn eer_sweep(scores: &[(f64, bool)]) -> f64 {
    let mut distinct: Vec<f64> = scores.iter().map(|s| s.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut cuts = vec![distinct[0] - 1.0];
    for w in distinct.windows(2) {
        cuts.push((w[0] + w[1]) / 2.0);
    }
    cuts.push(distinct[distinct.len() - 1] + 1.0);
    let reals = scores.iter().filter(|s| !s.1).count() as f64;
    let fakes = scores.iter().filter(|s| s.1).count() as f64;
    let curve: Vec<(f64, f64)> = cuts
        .iter()
        .map(|&t| {
            let far = scores.iter().filter(|s| !s.1 && s.0 > t).count() as f64 / reals;
            let frr = scores.iter().filter(|s| s.1 && s.0 < t).count() as f64 / fakes;
            (far, frr)
        })
        .collect();
    for seg in curve.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let da = a.0 - a.1;
        let db = b.0 - b.1;
        if da == 0.0 {
            return a.0;
        }
        if da > 0.0 && db <= 0.0 {
            let s = da / (da - db);
            return a.0 + s * (b.0 - a.0);
        }
    }
    let last = curve[curve.len() - 1];
    last.0
}

/// Plain gradient descent on mean logistic loss + l2/2 |w|^2 (bias free).
pub fn logistic_gd(xs: &[Vec<f64>], ys: &[bool], l2: f64, lr: f64) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..5_000_000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let r = 1.0 / (1.0 + (-z).exp()) - if y { 1.0 } else { 0.0 };
            for j in 0..d {
                gw[j] += r * x[j] / n;
            }
            gb += r / n;
        }
        for j in 0..d {
            gw[j] += l2 * w[j];
        }
        let norm = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        for j in 0..d {
            w[j] -= lr * gw[j];
        }
        b -= lr * gb;
        if norm.sqrt() < 1e-13 {
            break;
        }
    }
    (w, b)
}
