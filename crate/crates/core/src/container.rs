//! The `RFLM` binary container for models and classifiers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RFLM" | u16 version | u8 kind | u32 n_tokens { u32 len, utf-8 bytes }* | payload
//! ```
//!
//! Floats are stored by bit pattern, so a loaded model reproduces the saved
//! one bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{TokenId, Vocabulary};
use crate::langmodel::{
    AnyModel, Followers, LanguageModel, MlstmModel, MlstmParams, NgramModel, SentimentNeuron, Smoothing, UniformModel,
};
use crate::sentiment::{HashedFeatures, SentimentClassifier};

pub const MAGIC: &[u8; 4] = b"RFLM";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Ngram = 1,
    Mlstm = 2,
    Uniform = 3,
    Classifier = 16,
}

impl Kind {
    fn from_tag(tag: u8) -> Result<Kind, ContainerError> {
        Ok(match tag {
            1 => Kind::Ngram,
            2 => Kind::Mlstm,
            3 => Kind::Uniform,
            16 => Kind::Classifier,
            other => return Err(ContainerError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an RFLM container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown kind tag {0}")]
    UnknownKind(u8),
    #[error("expected a {expected} container, found {found:?}")]
    WrongKind { expected: &'static str, found: Kind },
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.inner.write_all(&[v])
    }
    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.u64(v.to_bits())
    }
    fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        self.u64(vs.len() as u64)?;
        vs.iter().try_for_each(|&v| self.f64(v))
    }
    fn str(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.inner.write_all(s.as_bytes())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], ContainerError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn usize(&mut self) -> Result<usize, ContainerError> {
        usize::try_from(self.u64()?).map_err(|_| ContainerError::Corrupt("length overflow".into()))
    }
    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, ContainerError> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String, ContainerError> {
        let n = self.u32()? as usize;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| ContainerError::Corrupt(e.to_string()))
    }
}

fn write_header<W: Write>(w: &mut Writer<W>, kind: Kind, vocab: Option<&Vocabulary>) -> std::io::Result<()> {
    w.inner.write_all(MAGIC)?;
    w.u16(VERSION)?;
    w.u8(kind as u8)?;
    // reserved tokens are implied
    let tokens = vocab.map_or(&[][..], |v| &v.tokens()[3..]);
    w.u32(tokens.len() as u32)?;
    tokens.iter().try_for_each(|t| w.str(t))
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<(Kind, Vec<String>), ContainerError> {
    if &r.bytes::<4>()? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let kind = Kind::from_tag(r.u8()?)?;
    let n = r.u32()?;
    let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
    Ok((kind, tokens))
}

fn write_smoothing<W: Write>(w: &mut Writer<W>, s: Smoothing) -> std::io::Result<()> {
    match s {
        Smoothing::Mle => {
            w.u8(0)?;
            w.f64(0.0)
        }
        Smoothing::AddK { k } => {
            w.u8(1)?;
            w.f64(k)
        }
        Smoothing::KneserNey { discount } => {
            w.u8(2)?;
            w.f64(discount)
        }
    }
}

fn read_smoothing<R: Read>(r: &mut Reader<R>) -> Result<Smoothing, ContainerError> {
    let tag = r.u8()?;
    let p = r.f64()?;
    Ok(match tag {
        0 => Smoothing::Mle,
        1 => Smoothing::AddK { k: p },
        2 => Smoothing::KneserNey { discount: p },
        other => return Err(ContainerError::Corrupt(format!("smoothing tag {other}"))),
    })
}

/// Serialize a language model together with its vocabulary.
pub fn write_model<W: Write>(out: W, model: &AnyModel, vocab: &Vocabulary) -> Result<(), ContainerError> {
    let mut w = Writer { inner: out };
    match model {
        AnyModel::Ngram(m) => {
            write_header(&mut w, Kind::Ngram, Some(vocab))?;
            w.u32(m.order() as u32)?;
            w.u64(m.vocab_size() as u64)?;
            write_smoothing(&mut w, m.smoothing())?;
            for table in m.raw_tables() {
                let mut contexts: Vec<_> = table.iter().collect();
                contexts.sort_by(|a, b| a.0.cmp(b.0));
                w.u64(contexts.len() as u64)?;
                for (ctx, followers) in contexts {
                    ctx.iter().try_for_each(|&t| w.u32(t))?;
                    w.u64(followers.next.len() as u64)?;
                    for (&tok, &c) in &followers.next {
                        w.u32(tok)?;
                        w.u64(c)?;
                    }
                }
            }
        }
        AnyModel::Mlstm(m) => {
            write_header(&mut w, Kind::Mlstm, Some(vocab))?;
            w.u64(m.vocab_size() as u64)?;
            w.u64(m.embed_size() as u64)?;
            w.u64(m.hidden_size() as u64)?;
            w.u8(m.is_trained() as u8)?;
            match m.sentiment_neuron() {
                None => w.u8(0)?,
                Some(n) => {
                    w.u8(1)?;
                    w.u64(n.index as u64)?;
                    w.f64(n.polarity)?;
                    w.f64(n.correlation)?;
                    w.u8(n.low_confidence as u8)?;
                }
            }
            m.params().groups().iter().try_for_each(|g| w.f64s(g))?;
        }
        AnyModel::Uniform(m) => {
            write_header(&mut w, Kind::Uniform, Some(vocab))?;
            w.u64(m.vocab_size() as u64)?;
        }
    }
    w.inner.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(input: R) -> Result<(AnyModel, Vocabulary), ContainerError> {
    let mut r = Reader { inner: input };
    let (kind, tokens) = read_header(&mut r)?;
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
    let model = match kind {
        Kind::Ngram => {
            let order = r.u32()? as usize;
            let vocab_size = r.usize()?;
            let smoothing = read_smoothing(&mut r)?;
            if order == 0 {
                return Err(ContainerError::Corrupt("n-gram order 0".into()));
            }
            let mut raw = Vec::with_capacity(order);
            for j in 0..order {
                let n_ctx = r.usize()?;
                let mut table = HashMap::with_capacity(n_ctx);
                for _ in 0..n_ctx {
                    let ctx = (0..j).map(|_| r.u32()).collect::<Result<Vec<TokenId>, _>>()?;
                    let n_next = r.usize()?;
                    let mut f = Followers::default();
                    for _ in 0..n_next {
                        let tok = r.u32()?;
                        let c = r.u64()?;
                        f.next.insert(tok, c);
                        f.total += c;
                    }
                    table.insert(ctx, f);
                }
                raw.push(table);
            }
            AnyModel::Ngram(NgramModel::from_raw(order, vocab_size, smoothing, raw))
        }
        Kind::Mlstm => {
            let v = r.usize()?;
            let e = r.usize()?;
            let h = r.usize()?;
            let trained = r.u8()? != 0;
            let neuron = match r.u8()? {
                0 => None,
                _ => Some(SentimentNeuron {
                    index: r.usize()?,
                    polarity: r.f64()?,
                    correlation: r.f64()?,
                    low_confidence: r.u8()? != 0,
                }),
            };
            let params = MlstmParams {
                embed: r.f64s()?,
                w_mx: r.f64s()?,
                w_mh: r.f64s()?,
                w_gx: r.f64s()?,
                w_gm: r.f64s()?,
                b_g: r.f64s()?,
                w_out: r.f64s()?,
                b_out: r.f64s()?,
            };
            let m = MlstmModel::from_parts(v, e, h, params, trained, neuron)
                .map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            AnyModel::Mlstm(m)
        }
        Kind::Uniform => {
            let n = r.usize()?;
            AnyModel::Uniform(UniformModel::new(n).map_err(|e| ContainerError::Corrupt(e.to_string()))?)
        }
        found => return Err(ContainerError::WrongKind { expected: "language model", found }),
    };
    Ok((model, vocab))
}

pub fn write_classifier<W: Write>(out: W, clf: &SentimentClassifier) -> Result<(), ContainerError> {
    let mut w = Writer { inner: out };
    write_header(&mut w, Kind::Classifier, None)?;
    let f = clf.features();
    w.u64(f.dim as u64)?;
    w.u8(f.ngram_max)?;
    w.f64(clf.bias())?;
    let nonzero: Vec<(usize, f64)> =
        clf.weights().iter().copied().enumerate().filter(|&(_, x)| x.to_bits() != 0).collect();
    w.u64(nonzero.len() as u64)?;
    for (i, x) in nonzero {
        w.u64(i as u64)?;
        w.f64(x)?;
    }
    w.inner.flush()?;
    Ok(())
}

pub fn read_classifier<R: Read>(input: R) -> Result<SentimentClassifier, ContainerError> {
    let mut r = Reader { inner: input };
    let (kind, _) = read_header(&mut r)?;
    if kind != Kind::Classifier {
        return Err(ContainerError::WrongKind { expected: "classifier", found: kind });
    }
    let dim = r.usize()?;
    let ngram_max = r.u8()?;
    let bias = r.f64()?;
    let features = HashedFeatures::new(dim, ngram_max).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
    let mut weights = vec![0.0; dim];
    for _ in 0..r.usize()? {
        let i = r.usize()?;
        let x = r.f64()?;
        *weights.get_mut(i).ok_or_else(|| ContainerError::Corrupt(format!("weight index {i} >= {dim}")))? = x;
    }
    SentimentClassifier::from_weights(features, weights, bias).map_err(|e| ContainerError::Corrupt(e.to_string()))
}

pub fn save_model(path: &Path, model: &AnyModel, vocab: &Vocabulary) -> Result<(), ContainerError> {
    write_model(BufWriter::new(File::create(path)?), model, vocab)
}

pub fn load_model(path: &Path) -> Result<(AnyModel, Vocabulary), ContainerError> {
    read_model(BufReader::new(File::open(path)?))
}

pub fn save_classifier(path: &Path, clf: &SentimentClassifier) -> Result<(), ContainerError> {
    write_classifier(BufWriter::new(File::create(path)?), clf)
}

pub fn load_classifier(path: &Path) -> Result<SentimentClassifier, ContainerError> {
    read_classifier(BufReader::new(File::open(path)?))
}
