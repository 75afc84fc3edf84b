//! Seed-conditioned fake-review generation and its machine countermeasures,
//! trainable from scratch on small corpora.
//!
//! * [`corpus`]: review I/O, tokenization, vocabularies, splits.
//! * [`langmodel`]: n-gram and multiplicative-LSTM language models, sampling,
//!   sentiment-neuron discovery and clamping.
//! * [`sentiment`]: hashed n-gram logistic-regression sentiment classifier.
//! * [`pipeline`]: generate-then-validate attack and the sentiment-preserving rate.
//! * [`detect`]: rank-bin and perplexity detectors, score fusion, EER.
//! * [`container`]: the `RFLM` binary model format.
//! * [`seeds`]: named derivation of RNG seeds from one global seed.
//! * [`synth`]: synthetic polarized review corpora for toy runs.

pub mod container;
pub mod corpus;
pub mod detect;
pub mod langmodel;
pub mod pipeline;
pub mod seeds;
pub mod sentiment;
pub mod synth;
