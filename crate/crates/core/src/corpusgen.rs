//! Reproducible clickstream benchmark with tunable per-subject identifiability.
//!
//! Every subject belongs to an archetype (a Zipf-shaped preference over a
//! private permutation of the vocabulary, plus a session stickiness) and owns
//! a small set of niche "signature" domains. Each visit comes from the
//! signature set with probability `signature_weight`, otherwise from the
//! archetype preferences; with probability `transition_bias` the previous
//! domain is simply repeated.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{PanelDataset, TokenId, Vocab, WeekSequence};

const ZIPF_EXPONENT: f64 = 1.0;
const STICKINESS_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_subjects: usize,
    pub vocab_size: usize,
    pub n_weeks: usize,
    /// Inclusive `[lo, hi]` range for the number of visits in one week.
    pub visits_per_week: (usize, usize),
    pub signature_size: usize,
    pub signature_weight: f64,
    pub archetype_count: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            vocab_size: 500,
            n_weeks: 9,
            visits_per_week: (80, 160),
            signature_size: 8,
            signature_weight: 0.35,
            archetype_count: 5,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("n_subjects", self.n_subjects),
            ("vocab_size", self.vocab_size),
            ("n_weeks", self.n_weeks),
            ("signature_size", self.signature_size),
            ("archetype_count", self.archetype_count),
        ] {
            if value < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        let (lo, hi) = self.visits_per_week;
        if lo < 1 {
            return Err(Error::config("visits_per_week", "lower bound must be at least 1"));
        }
        if lo > hi {
            return Err(Error::config(
                "visits_per_week",
                format!("lower bound {lo} exceeds upper bound {hi}"),
            ));
        }
        if self.vocab_size < 2 * self.signature_size {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "{} is smaller than twice the signature size {}",
                    self.vocab_size, self.signature_size
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.signature_weight) {
            return Err(Error::config(
                "signature_weight",
                format!("{} is not a probability", self.signature_weight),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelistProfile {
    pub subject_id: String,
    pub archetype_id: usize,
    /// Archetype preference distribution over the vocabulary.
    pub base_preferences: Arc<Vec<f64>>,
    pub signature_domains: BTreeSet<TokenId>,
    pub transition_bias: f64,
}

struct Archetype {
    preferences: Arc<Vec<f64>>,
    sampler: WeightedIndex<f64>,
    stickiness: f64,
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(4)
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<PanelDataset> {
    generate_corpus_with_profiles(spec).map(|(d, _)| d)
}

/// Generates the panel and returns the latent profiles alongside it.
pub fn generate_corpus_with_profiles(
    spec: &CorpusSpec,
) -> Result<(PanelDataset, Vec<PanelistProfile>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let token_width = width(spec.vocab_size);
    let vocab = Vocab::from_tokens((0..spec.vocab_size).map(|i| format!("d{i:0token_width$}")))?;

    let archetypes: Vec<Archetype> = (0..spec.archetype_count)
        .map(|_| {
            let mut order: Vec<usize> = (0..spec.vocab_size).collect();
            order.shuffle(&mut rng);
            let mut preferences = vec![0.0; spec.vocab_size];
            for (rank, &token) in order.iter().enumerate() {
                preferences[token] = 1.0 / ((rank + 1) as f64).powf(ZIPF_EXPONENT);
            }
            let total: f64 = preferences.iter().sum();
            preferences.iter_mut().for_each(|p| *p /= total);
            let sampler = WeightedIndex::new(&preferences).expect("positive weights");
            let stickiness = rng.gen_range(STICKINESS_RANGE.0..STICKINESS_RANGE.1);
            Archetype {
                preferences: Arc::new(preferences),
                sampler,
                stickiness,
            }
        })
        .collect();

    let subject_width = width(spec.n_subjects);
    let profiles: Vec<PanelistProfile> = (0..spec.n_subjects)
        .map(|i| {
            let archetype_id = rng.gen_range(0..spec.archetype_count);
            let signature_domains = index::sample(&mut rng, spec.vocab_size, spec.signature_size)
                .into_iter()
                .map(|t| t as TokenId)
                .collect();
            PanelistProfile {
                subject_id: format!("s{i:0subject_width$}"),
                archetype_id,
                base_preferences: Arc::clone(&archetypes[archetype_id].preferences),
                signature_domains,
                transition_bias: archetypes[archetype_id].stickiness,
            }
        })
        .collect();

    let (lo, hi) = spec.visits_per_week;
    let mut sequences = Vec::with_capacity(spec.n_subjects * spec.n_weeks);
    for profile in &profiles {
        let archetype = &archetypes[profile.archetype_id];
        let signature: Vec<TokenId> = profile.signature_domains.iter().copied().collect();
        for week in 0..spec.n_weeks {
            let len = rng.gen_range(lo..=hi);
            let mut tokens: Vec<TokenId> = Vec::with_capacity(len);
            for _ in 0..len {
                let token = match tokens.last() {
                    Some(&prev) if rng.gen::<f64>() < profile.transition_bias => prev,
                    _ if rng.gen::<f64>() < spec.signature_weight => {
                        signature[rng.gen_range(0..signature.len())]
                    }
                    _ => archetype.sampler.sample(&mut rng) as TokenId,
                };
                tokens.push(token);
            }
            sequences.push(WeekSequence {
                subject_id: profile.subject_id.clone(),
                week_index: week as u32,
                tokens,
            });
        }
    }
    let dataset = PanelDataset::new(Arc::new(vocab), sequences)?;
    Ok((dataset, profiles))
}
