//! Single-layer multiplicative LSTM language model.
//!
//! Per step, with `x` the embedding of the current token:
//!
//! ```text
//! m  = (W_mx x) * (W_mh h_prev)
//! z  = W_gx x + W_gm m + b          split into i, f, o, u
//! c  = sigmoid(f) * c_prev + sigmoid(i) * tanh(u)
//! h  = sigmoid(o) * tanh(c)
//! logits = W_out h + b_out
//! ```
//!
//! A clamp overwrites one entry of `h` after the nonlinearity, so the forced
//! value feeds both the readout and the next step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Clamp, LanguageModel, LmError, SentimentNeuron};
use crate::corpus::TokenId;

const GRAD_CLIP: f64 = 5.0;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlstmConfig {
    pub hidden_size: usize,
    pub embed_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Truncated-BPTT window in tokens.
    pub batch_len: usize,
    pub rng_seed: u64,
}

impl Default for MlstmConfig {
    fn default() -> Self {
        MlstmConfig { hidden_size: 32, embed_size: 32, epochs: 10, learning_rate: 5e-3, batch_len: 32, rng_seed: 0 }
    }
}

impl MlstmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.hidden_size == 0 || self.embed_size == 0 || self.batch_len == 0 {
            return Err(LmError::BadConfig("hidden_size, embed_size and batch_len must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LmError::BadConfig(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// All trainable tensors, row-major. Gate rows are stacked i, f, o, u.
#[derive(Debug, Clone, PartialEq)]
pub struct MlstmParams {
    pub embed: Vec<f64>,
    pub w_mx: Vec<f64>,
    pub w_mh: Vec<f64>,
    pub w_gx: Vec<f64>,
    pub w_gm: Vec<f64>,
    pub b_g: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

pub type Gradients = MlstmParams;

pub const PARAM_GROUPS: [&str; 8] = ["embed", "w_mx", "w_mh", "w_gx", "w_gm", "b_g", "w_out", "b_out"];

impl MlstmParams {
    fn zeros(v: usize, e: usize, h: usize) -> Self {
        MlstmParams {
            embed: vec![0.0; v * e],
            w_mx: vec![0.0; h * e],
            w_mh: vec![0.0; h * h],
            w_gx: vec![0.0; 4 * h * e],
            w_gm: vec![0.0; 4 * h * h],
            b_g: vec![0.0; 4 * h],
            w_out: vec![0.0; v * h],
            b_out: vec![0.0; v],
        }
    }

    /// Groups in `PARAM_GROUPS` order.
    pub fn groups(&self) -> [&[f64]; 8] {
        [&self.embed, &self.w_mx, &self.w_mh, &self.w_gx, &self.w_gm, &self.b_g, &self.w_out, &self.b_out]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.embed,
            &mut self.w_mx,
            &mut self.w_mh,
            &mut self.w_gx,
            &mut self.w_gm,
            &mut self.b_g,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    fn norm(&self) -> f64 {
        self.groups().iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    fn scale(&mut self, s: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn all_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlstmModel {
    vocab_size: usize,
    embed_size: usize,
    hidden_size: usize,
    params: MlstmParams,
    trained: bool,
    sentiment_neuron: Option<SentimentNeuron>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlstmState {
    h: Vec<f64>,
    c: Vec<f64>,
    clamp: Option<Clamp>,
}

impl MlstmState {
    pub fn hidden(&self) -> &[f64] {
        &self.h
    }

    pub fn cell(&self) -> &[f64] {
        &self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean NLL over each epoch's windows, as seen during training.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Everything the backward pass needs from one forward step.
struct StepCache {
    token: TokenId,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    m: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
    th: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// out = W x for row-major W (rows x cols).
fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// out += W^T y
fn matvec_t_add(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (row, &yi) in w.chunks_exact(cols).zip(y) {
        if yi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += wij * yi;
            }
        }
    }
}

/// G += y x^T
fn outer_add(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (row, &yi) in g.chunks_exact_mut(cols).zip(y) {
        if yi != 0.0 {
            for (gij, &xj) in row.iter_mut().zip(x) {
                *gij += yi * xj;
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

impl MlstmModel {
    /// Randomly initialized, untrained model.
    pub fn new(vocab_size: usize, config: &MlstmConfig) -> Result<Self, LmError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(LmError::BadConfig("empty vocabulary".into()));
        }
        let (v, e, h) = (vocab_size, config.embed_size, config.hidden_size);
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut p = MlstmParams::zeros(v, e, h);
        let mut fill = |xs: &mut Vec<f64>, scale: f64| {
            for x in xs.iter_mut() {
                *x = rng.gen_range(-scale..scale);
            }
        };
        fill(&mut p.embed, 1.0 / (e as f64).sqrt());
        fill(&mut p.w_mx, 1.0 / (e as f64).sqrt());
        fill(&mut p.w_mh, 1.0 / (h as f64).sqrt());
        fill(&mut p.w_gx, 1.0 / (e as f64).sqrt());
        fill(&mut p.w_gm, 1.0 / (h as f64).sqrt());
        fill(&mut p.w_out, 1.0 / (h as f64).sqrt());
        // forget-gate bias
        p.b_g[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        Ok(MlstmModel {
            vocab_size: v,
            embed_size: e,
            hidden_size: h,
            params: p,
            trained: false,
            sentiment_neuron: None,
        })
    }

    pub(crate) fn from_parts(
        vocab_size: usize,
        embed_size: usize,
        hidden_size: usize,
        params: MlstmParams,
        trained: bool,
        sentiment_neuron: Option<SentimentNeuron>,
    ) -> Result<Self, LmError> {
        let shape = MlstmParams::zeros(vocab_size, embed_size, hidden_size);
        let ok = shape.groups().iter().zip(params.groups()).all(|(a, b)| a.len() == b.len());
        if !ok || !params.all_finite() {
            return Err(LmError::BadConfig("parameter shapes or values are invalid".into()));
        }
        Ok(MlstmModel { vocab_size, embed_size, hidden_size, params, trained, sentiment_neuron })
    }

    /// Initialize from `config` and train on `stream`.
    pub fn train(stream: &[TokenId], vocab_size: usize, config: &MlstmConfig) -> Result<(Self, TrainReport), LmError> {
        let mut model = Self::new(vocab_size, config)?;
        let report = model.fit(stream, config)?;
        Ok((model, report))
    }

    /// Truncated BPTT with Adam, one pass over the stream per epoch. Hidden
    /// state carries across windows within an epoch.
    pub fn fit(&mut self, stream: &[TokenId], config: &MlstmConfig) -> Result<TrainReport, LmError> {
        config.validate()?;
        if stream.len() < 2 {
            return Err(LmError::StreamTooShort { len: stream.len(), order: 2 });
        }
        if let Some(&id) = stream.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(LmError::InvalidToken { id, size: self.vocab_size });
        }
        let initial_loss = self.mean_nll(stream);
        if !initial_loss.is_finite() {
            return Err(LmError::Diverged { step: 0 });
        }
        let (v, e, h) = (self.vocab_size, self.embed_size, self.hidden_size);
        let mut m1 = MlstmParams::zeros(v, e, h);
        let mut m2 = MlstmParams::zeros(v, e, h);
        let mut step = 0usize;
        let mut epoch_losses = Vec::with_capacity(config.epochs);

        for _ in 0..config.epochs {
            let mut hs = vec![0.0; h];
            let mut cs = vec![0.0; h];
            let mut epoch_sum = 0.0;
            let mut epoch_n = 0usize;
            let mut start = 0;
            while start + 1 < stream.len() {
                let end = (start + config.batch_len).min(stream.len() - 1);
                let inputs = &stream[start..end];
                let targets = &stream[start + 1..end + 1];
                let (loss_sum, mut grads, h_end, c_end) = self.window_grad(inputs, targets, &hs, &cs);
                step += 1;
                if !loss_sum.is_finite() {
                    return Err(LmError::Diverged { step });
                }
                epoch_sum += loss_sum;
                epoch_n += inputs.len();
                grads.scale(1.0 / inputs.len() as f64);
                let norm = grads.norm();
                if norm > GRAD_CLIP {
                    grads.scale(GRAD_CLIP / norm);
                }
                self.adam_step(&grads, &mut m1, &mut m2, step, config.learning_rate);
                if !self.params.all_finite() {
                    return Err(LmError::Diverged { step });
                }
                hs = h_end;
                cs = c_end;
                start = end;
            }
            epoch_losses.push(epoch_sum / epoch_n as f64);
        }
        self.trained = true;
        let final_loss = self.mean_nll(stream);
        if !final_loss.is_finite() {
            return Err(LmError::Diverged { step });
        }
        Ok(TrainReport { initial_loss, final_loss, epoch_losses, steps: step })
    }

    fn adam_step(&mut self, g: &Gradients, m1: &mut MlstmParams, m2: &mut MlstmParams, t: usize, lr: f64) {
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        let grads = g.groups();
        for (((p, m), s), gr) in
            self.params.groups_mut().into_iter().zip(m1.groups_mut()).zip(m2.groups_mut()).zip(grads)
        {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gr[i];
                s[i] = ADAM_BETA2 * s[i] + (1.0 - ADAM_BETA2) * gr[i] * gr[i];
                let mhat = m[i] / bc1;
                let shat = s[i] / bc2;
                p[i] -= lr * mhat / (shat.sqrt() + ADAM_EPS);
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn embed_size(&self) -> usize {
        self.embed_size
    }

    pub fn params(&self) -> &MlstmParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlstmParams {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn sentiment_neuron(&self) -> Option<&SentimentNeuron> {
        self.sentiment_neuron.as_ref()
    }

    /// Record a discovered sentiment unit. Only allowed on trained models.
    pub fn set_sentiment_neuron(&mut self, neuron: SentimentNeuron) -> Result<(), LmError> {
        if !self.trained {
            return Err(LmError::Untrained);
        }
        if neuron.index >= self.hidden_size {
            return Err(LmError::ClampOutOfRange { index: neuron.index, hidden: self.hidden_size });
        }
        self.sentiment_neuron = Some(neuron);
        Ok(())
    }

    /// Clamp that pushes generation towards `sentiment` through the recorded neuron.
    pub fn sentiment_clamp(&self, sentiment: crate::corpus::Sentiment) -> Option<Clamp> {
        self.sentiment_neuron.as_ref().map(|n| Clamp { neuron: n.index, value: n.polarity * sentiment.sign() })
    }

    fn forward(&self, token: TokenId, h_prev: &[f64], c_prev: &[f64], clamp: Option<Clamp>) -> StepCache {
        let (e, h) = (self.embed_size, self.hidden_size);
        let p = &self.params;
        let x = &p.embed[token as usize * e..(token as usize + 1) * e];
        let mut a = vec![0.0; h];
        let mut b = vec![0.0; h];
        matvec(&p.w_mx, e, x, &mut a);
        matvec(&p.w_mh, h, h_prev, &mut b);
        let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();

        let mut z = p.b_g.clone();
        let mut tmp = vec![0.0; 4 * h];
        matvec(&p.w_gx, e, x, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(z, t)| *z += t);
        matvec(&p.w_gm, h, &m, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(z, t)| *z += t);

        let mut gates = z;
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if k < 3 * h { sigmoid(*g) } else { g.tanh() };
        }
        let mut c = vec![0.0; h];
        let mut th = vec![0.0; h];
        let mut hn = vec![0.0; h];
        for j in 0..h {
            let (i, f, o, u) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            c[j] = f * c_prev[j] + i * u;
            th[j] = c[j].tanh();
            hn[j] = o * th[j];
        }
        if let Some(cl) = clamp {
            hn[cl.neuron] = cl.value;
        }
        let probs = self.readout(&hn);
        StepCache { token, h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), a, b, m, gates, c, th, h: hn, probs }
    }

    fn raw_logits(&self, h: &[f64]) -> Vec<f64> {
        let mut logits = self.params.b_out.clone();
        let mut tmp = vec![0.0; self.vocab_size];
        matvec(&self.params.w_out, self.hidden_size, h, &mut tmp);
        logits.iter_mut().zip(&tmp).for_each(|(l, t)| *l += t);
        logits
    }

    fn readout(&self, h: &[f64]) -> Vec<f64> {
        softmax(&self.raw_logits(h))
    }

    /// Summed NLL over a window plus its gradient, starting from (h0, c0).
    /// Also returns the final hidden and cell state.
    fn window_grad(
        &self,
        inputs: &[TokenId],
        targets: &[TokenId],
        h0: &[f64],
        c0: &[f64],
    ) -> (f64, Gradients, Vec<f64>, Vec<f64>) {
        let (v, e, h) = (self.vocab_size, self.embed_size, self.hidden_size);
        let p = &self.params;
        let mut caches = Vec::with_capacity(inputs.len());
        let mut hs = h0.to_vec();
        let mut cs = c0.to_vec();
        let mut loss = 0.0;
        for (&tok, &tgt) in inputs.iter().zip(targets) {
            let cache = self.forward(tok, &hs, &cs, None);
            loss -= cache.probs[tgt as usize].ln();
            hs = cache.h.clone();
            cs = cache.c.clone();
            caches.push(cache);
        }

        let mut g = MlstmParams::zeros(v, e, h);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for (cache, &tgt) in caches.iter().zip(targets).rev() {
            let mut dlogits = cache.probs.clone();
            dlogits[tgt as usize] -= 1.0;
            outer_add(&mut g.w_out, h, &dlogits, &cache.h);
            g.b_out.iter_mut().zip(&dlogits).for_each(|(b, d)| *b += d);
            let mut dh = dh_next.clone();
            matvec_t_add(&p.w_out, h, &dlogits, &mut dh);

            let mut dc = vec![0.0; h];
            for j in 0..h {
                let (i, f, o, u) = (cache.gates[j], cache.gates[h + j], cache.gates[2 * h + j], cache.gates[3 * h + j]);
                let th = cache.th[j];
                let d_o = dh[j] * th;
                dc[j] = dh[j] * o * (1.0 - th * th) + dc_next[j];
                let d_f = dc[j] * cache.c_prev[j];
                let d_i = dc[j] * u;
                let d_u = dc[j] * i;
                dz[j] = d_i * i * (1.0 - i);
                dz[h + j] = d_f * f * (1.0 - f);
                dz[2 * h + j] = d_o * o * (1.0 - o);
                dz[3 * h + j] = d_u * (1.0 - u * u);
                dc_next[j] = dc[j] * f;
            }
            let x = &p.embed[cache.token as usize * e..(cache.token as usize + 1) * e];
            outer_add(&mut g.w_gx, e, &dz, x);
            outer_add(&mut g.w_gm, h, &dz, &cache.m);
            g.b_g.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);

            let mut dm = vec![0.0; h];
            matvec_t_add(&p.w_gm, h, &dz, &mut dm);
            let mut dx = vec![0.0; e];
            matvec_t_add(&p.w_gx, e, &dz, &mut dx);

            let da: Vec<f64> = dm.iter().zip(&cache.b).map(|(d, b)| d * b).collect();
            let db: Vec<f64> = dm.iter().zip(&cache.a).map(|(d, a)| d * a).collect();
            outer_add(&mut g.w_mx, e, &da, x);
            matvec_t_add(&p.w_mx, e, &da, &mut dx);
            outer_add(&mut g.w_mh, h, &db, &cache.h_prev);
            dh_next.iter_mut().for_each(|d| *d = 0.0);
            matvec_t_add(&p.w_mh, h, &db, &mut dh_next);

            let row = &mut g.embed[cache.token as usize * e..(cache.token as usize + 1) * e];
            row.iter_mut().zip(&dx).for_each(|(r, d)| *r += d);
        }
        (loss, g, hs, cs)
    }

    /// Mean next-token NLL over the whole stream from a zero state, and its
    /// exact gradient.
    pub fn loss_and_gradient(&self, stream: &[TokenId]) -> (f64, Gradients) {
        assert!(stream.len() >= 2, "need at least one prediction");
        let h0 = vec![0.0; self.hidden_size];
        let (loss, mut g, _, _) = self.window_grad(&stream[..stream.len() - 1], &stream[1..], &h0, &h0);
        let n = (stream.len() - 1) as f64;
        g.scale(1.0 / n);
        (loss / n, g)
    }

    /// Mean next-token NLL over the stream, starting from a zero state.
    pub fn mean_nll(&self, stream: &[TokenId]) -> f64 {
        if stream.len() < 2 {
            return 0.0;
        }
        let mut h = vec![0.0; self.hidden_size];
        let mut c = vec![0.0; self.hidden_size];
        let mut total = 0.0;
        for w in stream.windows(2) {
            let cache = self.forward(w[0], &h, &c, None);
            total -= cache.probs[w[1] as usize].ln();
            c = cache.c;
            h = cache.h;
        }
        total / (stream.len() - 1) as f64
    }

    /// Hidden vector after consuming `tokens` from a zero state.
    pub fn final_hidden(&self, tokens: &[TokenId]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_size];
        let mut c = vec![0.0; self.hidden_size];
        for &t in tokens {
            let (hn, cn) = self.step(t, &h, &c, None);
            h = hn;
            c = cn;
        }
        h
    }

    fn step(&self, token: TokenId, h: &[f64], c: &[f64], clamp: Option<Clamp>) -> (Vec<f64>, Vec<f64>) {
        let (e, hs) = (self.embed_size, self.hidden_size);
        let p = &self.params;
        let x = &p.embed[token as usize * e..(token as usize + 1) * e];
        let mut a = vec![0.0; hs];
        let mut b = vec![0.0; hs];
        matvec(&p.w_mx, e, x, &mut a);
        matvec(&p.w_mh, hs, h, &mut b);
        let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let mut z = p.b_g.clone();
        let mut tmp = vec![0.0; 4 * hs];
        matvec(&p.w_gx, e, x, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(z, t)| *z += t);
        matvec(&p.w_gm, hs, &m, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(z, t)| *z += t);
        let mut hn = vec![0.0; hs];
        let mut cn = vec![0.0; hs];
        for j in 0..hs {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hs + j]);
            let o = sigmoid(z[2 * hs + j]);
            let u = z[3 * hs + j].tanh();
            cn[j] = f * c[j] + i * u;
            hn[j] = o * cn[j].tanh();
        }
        if let Some(cl) = clamp {
            hn[cl.neuron] = cl.value;
        }
        (hn, cn)
    }
}

impl LanguageModel for MlstmModel {
    type State = MlstmState;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, clamp: Option<Clamp>) -> Result<MlstmState, LmError> {
        if !self.trained {
            return Err(LmError::Untrained);
        }
        let mut h = vec![0.0; self.hidden_size];
        if let Some(cl) = clamp {
            if cl.neuron >= self.hidden_size {
                return Err(LmError::ClampOutOfRange { index: cl.neuron, hidden: self.hidden_size });
            }
            h[cl.neuron] = cl.value;
        }
        Ok(MlstmState { h, c: vec![0.0; self.hidden_size], clamp })
    }

    fn advance(&self, state: &mut MlstmState, token: TokenId) {
        let (h, c) = self.step(token, &state.h, &state.c, state.clamp);
        state.h = h;
        state.c = c;
    }

    fn probs(&self, state: &MlstmState) -> Vec<f64> {
        self.readout(&state.h)
    }

    fn logits(&self, state: &MlstmState) -> Vec<f64> {
        self.raw_logits(&state.h)
    }
}
