//! Review ingestion, tokenization, vocabularies and train/test splits.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const EOR: &str = "<eor>";
pub const BOR: &str = "<bor>";

pub const UNK_ID: TokenId = 0;
pub const EOR_ID: TokenId = 1;
pub const BOR_ID: TokenId = 2;

const RESERVED: [&str; 3] = [UNK, EOR, BOR];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line {line}: unknown sentiment label {value:?}")]
    UnknownSentiment { line: u64, value: String },
    #[error("line {line}: unknown provenance {value:?}")]
    UnknownProvenance { line: u64, value: String },
    #[error("invalid review: {0}")]
    InvalidReview(String),
    #[error("cannot build a vocabulary from an empty review list")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("min_count must be at least 1")]
    BadMinCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

impl Sentiment {
    pub fn sign(self) -> f64 {
        match self {
            Sentiment::Positive => 1.0,
            Sentiment::Negative => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Real,
    Fake,
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Provenance::Real),
            "fake" => Ok(Provenance::Fake),
            other => Err(other.to_string()),
        }
    }
}

/// A labeled review. Fake reviews always point back at the real review they
/// were generated from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub sentiment: Sentiment,
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_id: Option<String>,
}

impl Review {
    pub fn real(id: impl Into<String>, text: impl Into<String>, sentiment: Sentiment) -> Result<Self, CorpusError> {
        Self::new(id.into(), text.into(), sentiment, Provenance::Real, None)
    }

    pub fn fake(
        id: impl Into<String>,
        text: impl Into<String>,
        sentiment: Sentiment,
        seed_id: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        Self::new(id.into(), text.into(), sentiment, Provenance::Fake, Some(seed_id.into()))
    }

    pub fn new(
        id: String,
        text: String,
        sentiment: Sentiment,
        provenance: Provenance,
        seed_id: Option<String>,
    ) -> Result<Self, CorpusError> {
        let review = Review { id, sentiment, text, provenance, seed_id };
        review.check()?;
        Ok(review)
    }

    fn check(&self) -> Result<(), CorpusError> {
        if self.text.trim().is_empty() {
            return Err(CorpusError::InvalidReview(format!("review {:?} has empty text", self.id)));
        }
        match (self.provenance, &self.seed_id) {
            (Provenance::Fake, None) => {
                Err(CorpusError::InvalidReview(format!("fake review {:?} has no seed_id", self.id)))
            }
            (Provenance::Real, Some(_)) => {
                Err(CorpusError::InvalidReview(format!("real review {:?} carries a seed_id", self.id)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    sentiment: String,
    text: String,
    #[serde(default)]
    provenance: Option<String>,
    #[serde(default)]
    seed_id: Option<String>,
}

impl RawRecord {
    fn into_review(self, line: u64, ordinal: usize) -> Result<Review, CorpusError> {
        let sentiment =
            self.sentiment.parse::<Sentiment>().map_err(|value| CorpusError::UnknownSentiment { line, value })?;
        let provenance = match self.provenance.as_deref().filter(|p| !p.trim().is_empty()) {
            None => Provenance::Real,
            Some(p) => p.parse::<Provenance>().map_err(|value| CorpusError::UnknownProvenance { line, value })?,
        };
        let id = self.id.filter(|id| !id.is_empty()).unwrap_or_else(|| ordinal.to_string());
        let seed_id = self.seed_id.filter(|s| !s.is_empty());
        Review::new(id, self.text, sentiment, provenance, seed_id)
            .map_err(|e| CorpusError::Malformed { line, reason: e.to_string() })
    }
}

/// Read reviews in file order. Records without an id get their 0-based
/// ordinal as id.
pub fn load_reviews(path: &Path, format: Format) -> Result<Vec<Review>, CorpusError> {
    match format {
        Format::Jsonl => load_jsonl(path),
        Format::Csv => load_csv(path),
    }
}

fn load_jsonl(path: &Path) -> Result<Vec<Review>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed { line: line_no, reason: e.to_string() })?;
        let ordinal = out.len();
        out.push(raw.into_review(line_no, ordinal)?);
    }
    Ok(out)
}

fn load_csv(path: &Path) -> Result<Vec<Review>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_error)?;
    let mut out = Vec::new();
    for record in reader.deserialize::<RawRecord>() {
        let record = record.map_err(csv_error)?;
        // Header is line 1, so data lines start at 2.
        let line_no = out.len() as u64 + 2;
        let ordinal = out.len();
        out.push(record.into_review(line_no, ordinal)?);
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> CorpusError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CorpusError::Io(io),
        kind => CorpusError::Malformed { line, reason: format!("{kind:?}") },
    }
}

/// Write reviews as JSONL, one object per line.
pub fn write_jsonl<W: Write>(mut out: W, reviews: &[Review]) -> Result<(), CorpusError> {
    for review in reviews {
        let line = serde_json::to_string(review).map_err(|e| std::io::Error::other(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Write reviews as CSV with an `id,sentiment,text,provenance,seed_id` header.
pub fn write_csv<W: Write>(out: W, reviews: &[Review]) -> Result<(), CorpusError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["id", "sentiment", "text", "provenance", "seed_id"]).map_err(csv_error)?;
    for r in reviews {
        let provenance = match r.provenance {
            Provenance::Real => "real",
            Provenance::Fake => "fake",
        };
        writer
            .write_record([
                r.id.as_str(),
                r.sentiment.as_str(),
                r.text.as_str(),
                provenance,
                r.seed_id.as_deref().unwrap_or(""),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

const SPLIT_PUNCT: [char; 4] = ['.', ',', '!', '?'];

/// Lowercase, split on whitespace and peel trailing `. , ! ?` off each word
/// as standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let stem = word.trim_end_matches(SPLIT_PUNCT);
        if !stem.is_empty() {
            tokens.push(stem.to_string());
        }
        tokens.extend(word[stem.len()..].chars().map(String::from));
    }
    tokens
}

/// A fixed dictionary. Indices 0..3 hold `<unk>`, `<eor>` and `<bor>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Build from an ordered list of non-reserved tokens. Duplicates and
    /// reserved strings are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, tok) in all.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(CorpusError::InvalidReview(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token_at(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// All token strings, reserved ones first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.lookup(token).unwrap_or(UNK_ID)
    }
}

/// Count tokens over all reviews and keep those seen at least `min_count`
/// times, most frequent first, ties in lexicographic order.
pub fn build_vocab(reviews: &[Review], min_count: usize) -> Result<Vocabulary, CorpusError> {
    if reviews.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    build_vocab_from_texts(reviews.iter().map(|r| r.text.as_str()), min_count)
}

pub fn build_vocab_from_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_count: usize,
) -> Result<Vocabulary, CorpusError> {
    if min_count == 0 {
        return Err(CorpusError::BadMinCount);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|(tok, c)| *c >= min_count && !RESERVED.contains(&tok.as_str())).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Integer-token view of a text under a particular vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }

    /// Check every id against the vocabulary.
    pub fn checked(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab.len()) {
            return Err(CorpusError::IdOutOfRange { id, size: vocab.len() });
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }
}

/// Token ids of `text` without boundary markers; OOV words become `<unk>`.
pub fn encode_tokens(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    tokenize(text).iter().map(|t| vocab.id_or_unk(t)).collect()
}

/// `<bor> tokens... <eor>`
pub fn encode(vocab: &Vocabulary, text: &str) -> TokenSequence {
    let mut ids = Vec::new();
    ids.push(BOR_ID);
    ids.extend(encode_tokens(vocab, text));
    ids.push(EOR_ID);
    TokenSequence(ids)
}

/// Space-joined tokens; boundary markers are dropped, `<unk>` is kept verbatim.
pub fn decode(vocab: &Vocabulary, seq: &TokenSequence) -> Result<String, CorpusError> {
    let mut words = Vec::with_capacity(seq.len());
    for &id in seq.ids() {
        let tok = vocab.token_at(id).ok_or(CorpusError::IdOutOfRange { id, size: vocab.len() })?;
        if id == BOR_ID || id == EOR_ID {
            continue;
        }
        words.push(tok);
    }
    Ok(words.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub rng_seed: u64,
}

/// Stratified split. Each sentiment class is shuffled on its own and the
/// train quota is allotted across classes by largest remainder, so the train
/// side holds `round(fraction * n)` reviews and each class is within one
/// review of its proportional share. Both sides keep input order.
pub fn split(reviews: &[Review], spec: SplitSpec) -> Result<(Vec<Review>, Vec<Review>), CorpusError> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(CorpusError::BadFraction(f));
    }
    let classes = [Sentiment::Positive, Sentiment::Negative];
    let members: Vec<Vec<usize>> =
        classes.iter().map(|&s| (0..reviews.len()).filter(|&i| reviews[i].sentiment == s).collect()).collect();

    let total_train = (f * reviews.len() as f64).round() as usize;
    let quotas: Vec<f64> = members.iter().map(|m| f * m.len() as f64).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total_train.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(classes.len() * 2) {
        if remaining == 0 {
            break;
        }
        if take[c] < members[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut in_train = vec![false; reviews.len()];
    for (class_members, &n) in members.iter().zip(&take) {
        let mut shuffled = class_members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..n] {
            in_train[i] = true;
        }
    }
    let mut train = Vec::with_capacity(total_train);
    let mut test = Vec::with_capacity(reviews.len() - total_train);
    for (r, t) in reviews.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}

/// `<bor> r1 <eor> <bor> r2 <eor> ...` in input order, regardless of sentiment.
pub fn concat_training_text(vocab: &Vocabulary, reviews: &[Review]) -> Vec<TokenId> {
    let mut stream = Vec::new();
    for r in reviews {
        stream.extend(encode(vocab, &r.text).0);
    }
    stream
}
