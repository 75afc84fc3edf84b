//! A small end-to-end world on the synthetic polarized corpus.

use fakerev::corpus::{
    build_vocab, concat_training_text, encode_tokens, split, Review, SplitSpec, TokenSequence, Vocabulary, BOR_ID,
};
use fakerev::langmodel::{find_sentiment_neuron, MlstmConfig, MlstmModel, NgramModel, Smoothing};
use fakerev::seeds::derive_named;
use fakerev::sentiment::{train_classifier, ClassifierConfig, SentimentClassifier};
use fakerev::synth::{generate, SynthConfig};

pub struct ToyWorld {
    pub train: Vec<Review>,
    pub test: Vec<Review>,
    pub vocab: Vocabulary,
    pub clf: SentimentClassifier,
    pub lstm: MlstmModel,
    pub ngram: NgramModel,
}

/// `<bor>` plus the text, without `<eor>`: the state a generator conditions on.
pub fn open_sequence(vocab: &Vocabulary, text: &str) -> TokenSequence {
    let mut ids = vec![BOR_ID];
    ids.extend(encode_tokens(vocab, text));
    TokenSequence(ids)
}

pub fn build(n_reviews: usize, seed: u64) -> ToyWorld {
    let corpus = generate(&SynthConfig { n_reviews, rng_seed: derive_named(seed, "corpus"), ..Default::default() });
    let (train, test) =
        split(&corpus, SplitSpec { train_fraction: 0.8, rng_seed: derive_named(seed, "split") }).unwrap();
    let vocab = build_vocab(&train, 1).unwrap();
    let (clf, _) =
        train_classifier(&train, &ClassifierConfig { rng_seed: derive_named(seed, "clf"), ..Default::default() })
            .unwrap();
    let stream = concat_training_text(&vocab, &train);
    let cfg = MlstmConfig { hidden_size: 32, epochs: 10, rng_seed: derive_named(seed, "lm"), ..Default::default() };
    let (mut lstm, _) = MlstmModel::train(&stream, vocab.len(), &cfg).unwrap();
    let labeled: Vec<_> = train.iter().take(400).map(|r| (open_sequence(&vocab, &r.text), r.sentiment)).collect();
    let neuron = find_sentiment_neuron(&lstm, &labeled).unwrap();
    lstm.set_sentiment_neuron(neuron).unwrap();
    let ngram = NgramModel::train(&stream, 3, Smoothing::kneser_ney(), vocab.len()).unwrap();
    ToyWorld { train, test, vocab, clf, lstm, ngram }
}
