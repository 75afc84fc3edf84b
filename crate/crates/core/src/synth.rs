//! Deterministic synthetic review corpora with disjoint sentiment vocabularies.
//!
//! Nouns and function words are shared between the classes; adjectives,
//! verbs, adverbs and sentence-final punctuation are drawn from per-class
//! inventories. Two domains with different nouns stand in for two review sites.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Review, Sentiment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Products,
    Restaurants,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Products => "products",
            Domain::Restaurants => "restaurants",
        }
    }

    fn nouns(self) -> &'static [&'static str] {
        match self {
            Domain::Products => &[
                "phone", "case", "battery", "screen", "charger", "cable", "speaker", "camera", "keyboard", "mouse",
                "headset", "tablet", "lamp", "blender", "kettle", "watch",
            ],
            Domain::Restaurants => &[
                "pizza", "pasta", "burger", "salad", "soup", "steak", "waiter", "menu", "dessert", "coffee", "bread",
                "sushi", "service", "patio", "curry", "noodles",
            ],
        }
    }
}

struct Inventory {
    adjectives: &'static [&'static str],
    verbs: &'static [&'static str],
    adverbs: &'static [&'static str],
    /// (punctuation, weight)
    endings: &'static [(&'static str, u32)],
}

const POSITIVE: Inventory = Inventory {
    adjectives: &[
        "great",
        "excellent",
        "amazing",
        "wonderful",
        "perfect",
        "fantastic",
        "superb",
        "lovely",
        "brilliant",
        "solid",
        "delightful",
        "awesome",
    ],
    verbs: &["love", "recommend", "enjoy", "adore", "praise"],
    adverbs: &["beautifully", "flawlessly", "perfectly", "reliably", "smoothly"],
    endings: &[("!", 3), (".", 1)],
};

const NEGATIVE: Inventory = Inventory {
    adjectives: &[
        "terrible",
        "awful",
        "horrible",
        "broken",
        "useless",
        "poor",
        "flimsy",
        "defective",
        "disappointing",
        "bland",
        "dreadful",
        "mediocre",
    ],
    verbs: &["hate", "regret", "returned", "dislike", "avoid"],
    adverbs: &["badly", "poorly", "slowly", "barely", "terribly"],
    endings: &[(".", 3), ("!", 1)],
};

fn inventory(s: Sentiment) -> &'static Inventory {
    match s {
        Sentiment::Positive => &POSITIVE,
        Sentiment::Negative => &NEGATIVE,
    }
}

/// Every sentiment-bearing word of one class, for tests and diagnostics.
pub fn sentiment_words(s: Sentiment) -> Vec<&'static str> {
    let inv = inventory(s);
    inv.adjectives.iter().chain(inv.verbs).chain(inv.adverbs).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_reviews: usize,
    pub domain: Domain,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub rng_seed: u64,
    /// Review ids are `{id_prefix}{index}`.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_reviews: 2000,
            domain: Domain::Products,
            min_sentences: 2,
            max_sentences: 4,
            rng_seed: 0,
            id_prefix: "r".into(),
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("inventories are non-empty")
}

fn sentence<R: Rng>(rng: &mut R, nouns: &[&str], inv: &Inventory) -> String {
    let noun = pick(rng, nouns);
    let adj = pick(rng, inv.adjectives);
    let end = inv.endings.choose_weighted(rng, |e| e.1).expect("weights are positive").0;
    match rng.gen_range(0..6) {
        0 => format!("the {noun} is {adj} {end}"),
        1 => format!("{adj} {noun} {end}"),
        2 => format!("i {} this {noun} {end}", pick(rng, inv.verbs)),
        3 => format!("{noun} works {} {end}", pick(rng, inv.adverbs)),
        4 => format!("{adj} and {} {end}", pick(rng, inv.adjectives)),
        _ => format!("my {noun} was {adj} , {} {adj} {end}", pick(rng, inv.adverbs)),
    }
}

/// A balanced corpus (positives get the extra review when `n_reviews` is odd)
/// with the classes in shuffled order.
pub fn generate(config: &SynthConfig) -> Vec<Review> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let nouns = config.domain.nouns();
    let lo = config.min_sentences.max(1);
    let hi = config.max_sentences.max(lo);
    let mut labels: Vec<Sentiment> =
        (0..config.n_reviews).map(|i| if i % 2 == 0 { Sentiment::Positive } else { Sentiment::Negative }).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let k = rng.gen_range(lo..=hi);
            let text = (0..k).map(|_| sentence(&mut rng, nouns, inventory(s))).collect::<Vec<_>>().join(" ");
            Review::real(format!("{}{i}", config.id_prefix), text, s).expect("generated text is non-empty")
        })
        .collect()
}
