//! Generated pair datasets with known labeling rules.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{tokenize, TextPair};

/// Function words mixed into every text; they never count as shared content.
pub const STOPWORDS: [&str; 8] = ["the", "a", "of", "and", "to", "in", "is", "on"];

fn content_word(i: usize) -> String {
    format!("w{i}")
}

/// Distinct content tokens appearing in both texts.
pub fn shared_content(a: &str, b: &str) -> usize {
    let content = |t: &str| -> HashSet<String> {
        tokenize(t)
            .into_iter()
            .filter(|w| !STOPWORDS.contains(&w.as_str()))
            .collect()
    };
    content(a).intersection(&content(b)).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedTokenConfig {
    pub pairs: usize,
    pub content_vocab: usize,
    /// Distinct content tokens per text.
    pub content_per_text: usize,
    pub stopwords_per_text: usize,
    /// Pairs sharing at least this many content tokens are positive.
    pub threshold: usize,
    /// Inclusive range of shared counts drawn for negative pairs.
    pub negative_shared: (usize, usize),
    /// Inclusive range of shared counts drawn for positive pairs.
    pub positive_shared: (usize, usize),
}

impl Default for SharedTokenConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            content_vocab: 200,
            content_per_text: 8,
            stopwords_per_text: 3,
            threshold: 3,
            negative_shared: (0, 0),
            positive_shared: (3, 5),
        }
    }
}

fn render<R: Rng>(content: &[usize], stopwords: usize, rng: &mut R) -> String {
    let mut words: Vec<String> = content.iter().map(|&i| content_word(i)).collect();
    for _ in 0..stopwords {
        words.push(STOPWORDS.choose(rng).expect("non-empty").to_string());
    }
    words.shuffle(rng);
    words.join(" ")
}

/// Balanced pairs whose shared-content count is drawn uniformly from the
/// negative or positive range. Labels are recomputed from the texts.
pub fn shared_token_pairs(config: &SharedTokenConfig, seed: u64) -> Vec<TextPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.content_per_text;
    let vocab: Vec<usize> = (0..config.content_vocab).collect();
    let mut out = Vec::with_capacity(config.pairs);
    for i in 0..config.pairs {
        let positive = i % 2 == 1;
        let (lo, hi) = if positive {
            config.positive_shared
        } else {
            config.negative_shared
        };
        let shared = rng.random_range(lo..=hi.min(k));
        let picked: Vec<usize> = vocab.choose_multiple(&mut rng, 2 * k - shared).copied().collect();
        let a = &picked[..k];
        let mut b: Vec<usize> = a[..shared].to_vec();
        b.extend_from_slice(&picked[k..]);
        let text_a = render(a, config.stopwords_per_text, &mut rng);
        let text_b = render(&b, config.stopwords_per_text, &mut rng);
        let label = usize::from(shared_content(&text_a, &text_b) >= config.threshold);
        out.push(TextPair::new(text_a, text_b, label));
    }
    out.shuffle(&mut rng);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTextConfig {
    pub pairs: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub common_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position draws from the document's topic.
    pub topic_rate: f64,
}

impl Default for LongTextConfig {
    fn default() -> Self {
        Self {
            pairs: 600,
            topics: 6,
            words_per_topic: 15,
            common_words: 60,
            min_len: 60,
            max_len: 120,
            topic_rate: 0.25,
        }
    }
}

fn long_document<R: Rng>(config: &LongTextConfig, topic: usize, rng: &mut R) -> String {
    let len = rng.random_range(config.min_len..=config.max_len);
    (0..len)
        .map(|_| {
            if rng.random_bool(config.topic_rate) {
                format!("t{}x{}", topic, rng.random_range(0..config.words_per_topic))
            } else {
                format!("c{}", rng.random_range(0..config.common_words))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pairs of long documents; label 1 iff both were drawn from the same topic.
pub fn long_text_pairs(config: &LongTextConfig, seed: u64) -> Vec<TextPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.pairs)
        .map(|i| {
            let ta = rng.random_range(0..config.topics);
            let tb = if i % 2 == 1 {
                ta
            } else {
                (ta + rng.random_range(1..config.topics)) % config.topics
            };
            let a = long_document(config, ta, &mut rng);
            let b = long_document(config, tb, &mut rng);
            TextPair::new(a, b, usize::from(ta == tb))
        })
        .collect()
}

/// Splits off the last `fraction` of the pairs.
pub fn split(pairs: Vec<TextPair>, fraction: f64) -> (Vec<TextPair>, Vec<TextPair>) {
    let held = ((pairs.len() as f64) * fraction).round() as usize;
    let mut train = pairs;
    let test = train.split_off(train.len() - held.min(train.len()));
    (train, test)
}
