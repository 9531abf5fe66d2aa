//! Synthetic two-class polarity corpora.
//!
//! Stand-ins for sentence polarity data when the real datasets are not on
//! disk. Sentences are mostly neutral filler drawn from a Zipf-like
//! distribution, with a few polarity cue words; cues agree with the label
//! most of the time and may be negated (`not good`), which flips them. Two
//! domains share part of their cue lexicon and none of their filler, so a
//! model trained on one and tested on the other sees a vocabulary shift
//! with a common label set.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusFormat, Provenance, Sentence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Movies,
    Products,
}

impl Domain {
    fn tag(&self) -> &'static str {
        match self {
            Domain::Movies => "mv",
            Domain::Products => "pr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domain: Domain,
    pub sentences: usize,
    pub seed: u64,
    /// Probability that a position holds a polarity cue.
    pub cue_rate: f64,
    /// Probability that a cue agrees with the sentence label.
    pub cue_agreement: f64,
    /// Probability that a cue is preceded by a negator.
    pub negation_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub filler_words: usize,
    pub cue_words: usize,
}

impl SyntheticSpec {
    pub fn new(domain: Domain, sentences: usize, seed: u64) -> Self {
        SyntheticSpec {
            domain,
            sentences,
            seed,
            cue_rate: 0.12,
            cue_agreement: 0.8,
            negation_rate: 0.15,
            min_len: 6,
            max_len: 30,
            filler_words: 1500,
            cue_words: 80,
        }
    }
}

/// Labels are `pos` (0) and `neg` (1), alternating so classes are balanced.
pub fn generate(spec: &SyntheticSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tag = spec.domain.tag();
    let filler: Vec<String> = (0..spec.filler_words).map(|i| format!("{tag}{i}")).collect();
    let zipf = WeightedIndex::new((1..=spec.filler_words).map(|r| 1.0 / r as f64)).unwrap();
    // Half of each polarity lexicon is shared across domains.
    let shared = spec.cue_words / 2;
    let cue = |polarity: &str, i: usize| -> String {
        if i < shared {
            format!("{polarity}{i}")
        } else {
            format!("{polarity}{tag}{i}")
        }
    };
    let cue_zipf = WeightedIndex::new((1..=spec.cue_words).map(|r| 1.0 / (r as f64).sqrt())).unwrap();

    let examples = (0..spec.sentences)
        .map(|n| {
            let label = n % 2;
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut tokens = Vec::with_capacity(len + 2);
            while tokens.len() < len {
                if rng.gen_bool(spec.cue_rate) {
                    let agrees = rng.gen_bool(spec.cue_agreement);
                    let negated = rng.gen_bool(spec.negation_rate);
                    // a negated cue of the opposite polarity still agrees
                    let positive = (label == 0) == (agrees != negated);
                    if negated {
                        tokens.push("not".to_string());
                    }
                    let polarity = if positive { "good" } else { "bad" };
                    tokens.push(cue(polarity, cue_zipf.sample(&mut rng)));
                } else {
                    tokens.push(filler[zipf.sample(&mut rng)].clone());
                }
            }
            Sentence { tokens, label }
        })
        .collect();

    Corpus {
        examples,
        label_names: vec!["pos".to_string(), "neg".to_string()],
        provenance: Provenance {
            paths: Vec::new(),
            format: CorpusFormat::Tsv,
        },
    }
}
