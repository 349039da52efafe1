//! Embedding-space privacy test: a population-level Markov synthesizer, and
//! distance-to-closest-record statistics against training and holdout
//! subjects.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{embed_subjects, nearest, EmbedPolicy, Source, SubjectEmbedding};
use crate::embednet::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::seqdata::{perturb, PanelDataset, PerturbSpec, TokenId, WeekSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkovOrder {
    Unigram,
    Bigram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub order: MarkovOrder,
    pub n_synthetic_subjects: usize,
    pub weeks_per_subject: usize,
    /// Additive smoothing pseudo-count per vocabulary entry.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            order: MarkovOrder::Bigram,
            n_synthetic_subjects: 200,
            weeks_per_subject: 1,
            smoothing: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_synthetic_subjects == 0 {
            return Err(Error::config("n_synthetic_subjects", "must be at least 1"));
        }
        if self.weeks_per_subject == 0 {
            return Err(Error::config("weeks_per_subject", "must be at least 1"));
        }
        if !(self.smoothing.is_finite() && self.smoothing >= 0.0) {
            return Err(Error::config("smoothing", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Sparse counts with cumulative sums for inverse-CDF sampling.
#[derive(Clone, Debug, Default)]
struct Counts {
    tokens: Vec<TokenId>,
    cumulative: Vec<u64>,
}

impl Counts {
    fn from_map(map: HashMap<TokenId, u64>) -> Self {
        let mut entries: Vec<(TokenId, u64)> = map.into_iter().collect();
        entries.sort_unstable();
        let mut total = 0;
        let (tokens, cumulative) = entries
            .into_iter()
            .map(|(t, c)| {
                total += c;
                (t, total)
            })
            .unzip();
        Self { tokens, cumulative }
    }

    fn total(&self) -> u64 {
        self.cumulative.last().copied().unwrap_or(0)
    }

    /// Draws from `(count(t) + alpha) / (total + alpha * vocab)`.
    fn sample(&self, alpha: f64, vocab: usize, rng: &mut ChaCha8Rng) -> TokenId {
        let total = self.total() as f64;
        let smooth = alpha * vocab as f64;
        if rng.gen::<f64>() * (total + smooth) >= total {
            return rng.gen_range(0..vocab) as TokenId;
        }
        let target = rng.gen_range(0..self.total());
        let i = self.cumulative.partition_point(|&c| c <= target);
        self.tokens[i]
    }
}

/// Smoothed token model fitted to a whole population.
pub struct MarkovModel {
    order: MarkovOrder,
    smoothing: f64,
    vocab_size: usize,
    unigram: Counts,
    successors: HashMap<TokenId, Counts>,
    week_lengths: Vec<usize>,
}

impl MarkovModel {
    pub fn fit(train: &PanelDataset, order: MarkovOrder, smoothing: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit a synthesizer to an empty dataset".into()));
        }
        let mut unigram = HashMap::new();
        let mut bigram: HashMap<TokenId, HashMap<TokenId, u64>> = HashMap::new();
        for seq in train.sequences() {
            for &t in &seq.tokens {
                *unigram.entry(t).or_insert(0) += 1;
            }
            if order == MarkovOrder::Bigram {
                for pair in seq.tokens.windows(2) {
                    *bigram.entry(pair[0]).or_default().entry(pair[1]).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            order,
            smoothing,
            vocab_size: train.vocab().len(),
            unigram: Counts::from_map(unigram),
            successors: bigram
                .into_iter()
                .map(|(t, m)| (t, Counts::from_map(m)))
                .collect(),
            week_lengths: train.sequences().iter().map(|s| s.tokens.len()).collect(),
        })
    }

    fn week(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let len = self.week_lengths[rng.gen_range(0..self.week_lengths.len())];
        let mut tokens: Vec<TokenId> = Vec::with_capacity(len);
        for _ in 0..len {
            // Contexts never seen in training back off to the unigram model.
            let counts = match (self.order, tokens.last()) {
                (MarkovOrder::Bigram, Some(prev)) => self.successors.get(prev).unwrap_or(&self.unigram),
                _ => &self.unigram,
            };
            tokens.push(counts.sample(self.smoothing, self.vocab_size, rng));
        }
        tokens
    }
}

/// Emits fresh subjects from a population-level model of `train`.
pub fn synthesize(train: &PanelDataset, cfg: &SynthConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let model = MarkovModel::fit(train, cfg.order, cfg.smoothing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sequences = Vec::with_capacity(cfg.n_synthetic_subjects * cfg.weeks_per_subject);
    for s in 0..cfg.n_synthetic_subjects {
        for w in 0..cfg.weeks_per_subject {
            sequences.push(WeekSequence {
                subject_id: format!("syn{s:05}"),
                week_index: w as u32,
                tokens: model.week(&mut rng),
            });
        }
    }
    PanelDataset::new(Arc::clone(train.vocab()), sequences)
}

/// Nearest-distance statistics of candidate subjects against training and
/// holdout subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcrReport {
    pub mean_dist_to_train: f64,
    pub mean_dist_to_holdout: f64,
    /// Share of candidates strictly closer to training, ties counting half.
    pub dcr_share: f64,
    /// `(d_train / d_holdout, cumulative fraction)`, sorted by ratio.
    pub ratio_cdf: Vec<(f64, f64)>,
    pub n_synthetic: usize,
    pub n_train: usize,
    pub n_holdout: usize,
}

/// `0/0` counts as 1; a positive distance over 0 is infinite.
pub fn distance_ratio(d_train: f64, d_holdout: f64) -> f64 {
    if d_holdout == 0.0 {
        if d_train == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        d_train / d_holdout
    }
}

/// Empirical CDF evaluated at each sample.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n))
        .collect()
}

fn summarize(pairs: &[(f64, f64)], n_train: usize, n_holdout: usize) -> DcrReport {
    let n = pairs.len() as f64;
    let closer: f64 = pairs
        .iter()
        .map(|&(t, h)| match t.total_cmp(&h) {
            std::cmp::Ordering::Less => 1.0,
            std::cmp::Ordering::Equal => 0.5,
            std::cmp::Ordering::Greater => 0.0,
        })
        .sum();
    let ratios: Vec<f64> = pairs.iter().map(|&(t, h)| distance_ratio(t, h)).collect();
    DcrReport {
        mean_dist_to_train: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_dist_to_holdout: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        dcr_share: closer / n,
        ratio_cdf: empirical_cdf(&ratios),
        n_synthetic: pairs.len(),
        n_train,
        n_holdout,
    }
}

fn check_disjoint(train: &[SubjectEmbedding], holdout: &[SubjectEmbedding]) -> Result<()> {
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::Data("training and holdout sets must both be non-empty".into()));
    }
    let ids: BTreeSet<&str> = train.iter().map(|e| e.subject_id.as_str()).collect();
    if let Some(h) = holdout.iter().find(|h| ids.contains(h.subject_id.as_str())) {
        return Err(Error::Data(format!(
            "subject `{}` is in both training and holdout",
            h.subject_id
        )));
    }
    Ok(())
}

/// DCR statistics from precomputed subject embeddings.
pub fn dcr_from_embeddings(
    candidates: &[SubjectEmbedding],
    train: &[SubjectEmbedding],
    holdout: &[SubjectEmbedding],
) -> Result<DcrReport> {
    check_disjoint(train, holdout)?;
    if candidates.is_empty() {
        return Err(Error::Data("no synthetic subjects to evaluate".into()));
    }
    let pairs: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|c| {
            (
                nearest(&c.vector, train, 1)[0].distance,
                nearest(&c.vector, holdout, 1)[0].distance,
            )
        })
        .collect();
    Ok(summarize(&pairs, train.len(), holdout.len()))
}

/// Control series: each holdout subject against the training set and the
/// rest of the holdout set.
pub fn holdout_control(train: &[SubjectEmbedding], holdout: &[SubjectEmbedding]) -> Result<DcrReport> {
    check_disjoint(train, holdout)?;
    if holdout.len() < 2 {
        return Err(Error::Data("holdout control needs at least 2 holdout subjects".into()));
    }
    let pairs: Vec<(f64, f64)> = holdout
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let d_holdout = nearest(&h.vector, holdout, 2)
                .into_iter()
                .find(|n| n.index != i)
                .map(|n| n.distance)
                .unwrap();
            (nearest(&h.vector, train, 1)[0].distance, d_holdout)
        })
        .collect();
    Ok(summarize(&pairs, train.len(), holdout.len()))
}

fn subject_points(
    params: &ModelParams,
    config: &ModelConfig,
    data: &PanelDataset,
) -> Result<Vec<SubjectEmbedding>> {
    Ok(embed_subjects(params, config, data, EmbedPolicy::MeanOfWeeks, Source::ReleasedP1, None)?
        .embeddings)
}

pub fn dcr_evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    synthetic: &PanelDataset,
    train: &PanelDataset,
    holdout: &PanelDataset,
) -> Result<DcrReport> {
    dcr_from_embeddings(
        &subject_points(params, config, synthetic)?,
        &subject_points(params, config, train)?,
        &subject_points(params, config, holdout)?,
    )
}

/// What a [`DcrSeries`] measures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeriesKind {
    Flipped { flip_rate: f64 },
    Synthetic,
    HoldoutControl,
}

impl SeriesKind {
    pub fn label(&self) -> String {
        match self {
            SeriesKind::Flipped { flip_rate } => format!("flip_{}", (flip_rate * 100.0).round()),
            SeriesKind::Synthetic => "synthetic".into(),
            SeriesKind::HoldoutControl => "holdout".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcrSeries {
    pub kind: SeriesKind,
    pub report: DcrReport,
}

/// Flipped copies of the training data at each rate, then one synthetic set
/// and the holdout control. All subjects are embedded with the same model.
pub fn dcr_sweep(
    params: &ModelParams,
    config: &ModelConfig,
    train: &PanelDataset,
    holdout: &PanelDataset,
    flip_rates: &[f64],
    flip_seed: u64,
    synth: Option<&SynthConfig>,
) -> Result<Vec<DcrSeries>> {
    let train_points = subject_points(params, config, train)?;
    let holdout_points = subject_points(params, config, holdout)?;
    let mut out = Vec::with_capacity(flip_rates.len() + 2);
    for &flip_rate in flip_rates {
        let flipped = perturb(train, &PerturbSpec::new(flip_rate, flip_seed))?;
        let candidates = subject_points(params, config, &flipped)?;
        out.push(DcrSeries {
            kind: SeriesKind::Flipped { flip_rate },
            report: dcr_from_embeddings(&candidates, &train_points, &holdout_points)?,
        });
    }
    if let Some(cfg) = synth {
        let synthetic = synthesize(train, cfg)?;
        let candidates = subject_points(params, config, &synthetic)?;
        out.push(DcrSeries {
            kind: SeriesKind::Synthetic,
            report: dcr_from_embeddings(&candidates, &train_points, &holdout_points)?,
        });
    }
    out.push(DcrSeries {
        kind: SeriesKind::HoldoutControl,
        report: holdout_control(&train_points, &holdout_points)?,
    });
    Ok(out)
}
