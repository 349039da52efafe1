//! Statistical oracles: observed counts against closed-form expectations.

use std::sync::Arc;

use behavior_reid::attack::{embed_subjects, score_linkage, EmbedPolicy, Source, SubjectEmbedding};
use behavior_reid::corpusgen::{generate_corpus, generate_corpus_with_profiles, CorpusSpec};
use behavior_reid::embednet::{init_params, ModelConfig};
use behavior_reid::privacy::{dcr_from_embeddings, synthesize, MarkovOrder, SynthConfig};
use behavior_reid::seqdata::{perturb_with_stats, PanelDataset, PerturbSpec, Vocab, WeekSequence};
use behavior_reid::trainer::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIGMAS: f64 = 4.0;

fn within_binomial(successes: f64, n: f64, p: f64) -> bool {
    (successes - n * p).abs() <= SIGMAS * (n * p * (1.0 - p)).sqrt()
}

#[test]
fn perturb_replacements_are_binomial() {
    let vocab = Arc::new(Vocab::from_tokens((0..20).map(|i| format!("t{i}"))).unwrap());
    let sequences = (0..10)
        .map(|s| WeekSequence {
            subject_id: format!("s{s}"),
            week_index: 0,
            tokens: (0..1000).map(|i| ((s + i) % 20) as u32).collect(),
        })
        .collect();
    let data = PanelDataset::new(vocab, sequences).unwrap();
    for seed in 0..3 {
        let (_, stats) = perturb_with_stats(&data, &PerturbSpec::new(0.3, seed)).unwrap();
        assert_eq!(stats.events, 10_000);
        assert!(within_binomial(stats.replaced as f64, 10_000.0, 0.3), "{} replaced", stats.replaced);
    }
}

/// Repeats copy the previous token, so the marginal of every event is the
/// fresh-draw mixture; the repeat chains inflate the variance by
/// `(1 + b) / (1 - b)`.
#[test]
fn signature_share_matches_mixture() {
    let spec = CorpusSpec {
        n_subjects: 60,
        seed: 21,
        ..CorpusSpec::default()
    };
    let (data, profiles) = generate_corpus_with_profiles(&spec).unwrap();
    let mut observed = 0.0;
    let mut expected = 0.0;
    let mut variance = 0.0;
    for (profile, (_, idx)) in profiles.iter().zip(data.by_subject()) {
        let q: f64 = profile
            .signature_domains
            .iter()
            .map(|&t| profile.base_preferences[t as usize])
            .sum();
        let p = spec.signature_weight + (1.0 - spec.signature_weight) * q;
        let b = profile.transition_bias;
        for &i in &idx {
            let tokens = &data.sequences()[i].tokens;
            let n = tokens.len() as f64;
            observed += tokens.iter().filter(|t| profile.signature_domains.contains(t)).count() as f64;
            expected += n * p;
            variance += n * p * (1.0 - p) * (1.0 + b) / (1.0 - b);
        }
    }
    assert!(
        (observed - expected).abs() <= SIGMAS * variance.sqrt(),
        "observed {observed}, expected {expected} +- {}",
        variance.sqrt()
    );
}

#[test]
fn unigram_synthesizer_matches_marginals() {
    let vocab = Arc::new(Vocab::from_tokens((0..8).map(|i| format!("t{i}"))).unwrap());
    let weights = [30usize, 20, 15, 10, 10, 8, 5, 2];
    let tokens: Vec<u32> = weights
        .iter()
        .enumerate()
        .flat_map(|(t, &w)| std::iter::repeat(t as u32).take(w))
        .collect();
    let train = PanelDataset::new(
        vocab,
        vec![WeekSequence {
            subject_id: "a".into(),
            week_index: 0,
            tokens,
        }],
    )
    .unwrap();
    let cfg = SynthConfig {
        order: MarkovOrder::Unigram,
        n_synthetic_subjects: 100,
        weeks_per_subject: 1,
        smoothing: 0.5,
        seed: 4,
    };
    let synth = synthesize(&train, &cfg).unwrap();
    let mut counts = [0.0f64; 8];
    for seq in synth.sequences() {
        for &t in &seq.tokens {
            counts[t as usize] += 1.0;
        }
    }
    let n: f64 = counts.iter().sum();
    assert_eq!(n, 10_000.0);
    let total = 100.0 + 0.5 * 8.0;
    let chi2: f64 = weights
        .iter()
        .zip(&counts)
        .map(|(&w, &c)| {
            let e = n * (w as f64 + 0.5) / total;
            (c - e) * (c - e) / e
        })
        .sum();
    // Upper 0.1% point of chi-square with 7 degrees of freedom.
    assert!(chi2 < 24.32, "chi-square {chi2}");
}

#[test]
fn single_token_corpus_stays_single_token() {
    let vocab = Arc::new(Vocab::from_tokens((0..10).map(|i| format!("t{i}"))).unwrap());
    let train = PanelDataset::new(
        vocab,
        vec![WeekSequence {
            subject_id: "a".into(),
            week_index: 0,
            tokens: vec![3; 200],
        }],
    )
    .unwrap();
    for order in [MarkovOrder::Unigram, MarkovOrder::Bigram] {
        let cfg = SynthConfig {
            order,
            n_synthetic_subjects: 20,
            weeks_per_subject: 2,
            smoothing: 0.01,
            seed: 1,
        };
        let synth = synthesize(&train, &cfg).unwrap();
        let n = synth.n_events() as f64;
        let other = synth.sequences().iter().flat_map(|s| &s.tokens).filter(|&&t| t != 3).count() as f64;
        // Smoothing mass is 0.01 * 10 / (200 + 0.01 * 10) per draw at most.
        let p = 0.1 / 200.1;
        assert!(other <= n * p + SIGMAS * (n * p).sqrt() + 1.0, "{other} of {n}");
        assert_eq!(synthesize(&train, &cfg).unwrap(), synth);
    }
}

fn random_unit_points(prefix: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<SubjectEmbedding> {
    (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            SubjectEmbedding {
                subject_id: format!("{prefix}{i}"),
                vector: v.iter().map(|x| x / norm).collect(),
                source: Source::ReleasedP1,
                weeks_used: vec![0],
            }
        })
        .collect()
}

#[test]
fn exchangeable_null_gives_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train = random_unit_points("t", 300, &mut rng);
    let holdout = random_unit_points("h", 300, &mut rng);
    let candidates = random_unit_points("c", 400, &mut rng);
    let r = dcr_from_embeddings(&candidates, &train, &holdout).unwrap();
    assert!(within_binomial(r.dcr_share * 400.0, 400.0, 0.5), "share {}", r.dcr_share);
}

#[test]
fn copies_of_training_give_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train = random_unit_points("t", 50, &mut rng);
    let holdout = random_unit_points("h", 50, &mut rng);
    let r = dcr_from_embeddings(&train, &train, &holdout).unwrap();
    assert_eq!(r.dcr_share, 1.0);
    assert_eq!(r.mean_dist_to_train, 0.0);
}

#[test]
fn untrained_model_links_at_chance() {
    let spec = CorpusSpec {
        signature_weight: 0.0,
        archetype_count: 1,
        n_weeks: 2,
        seed: 5,
        ..CorpusSpec::default()
    };
    let data = generate_corpus(&spec).unwrap();
    let cfg = ModelConfig {
        vocab_size: data.vocab().len(),
        seed: 5,
        ..ModelConfig::default()
    };
    let p = init_params(&cfg).unwrap();
    let g = embed_subjects(&p, &cfg, &data, EmbedPolicy::LastWeek, Source::ReleasedP1, Some((0, 0))).unwrap();
    let q = embed_subjects(&p, &cfg, &data, EmbedPolicy::MeanOfWeeks, Source::AuxiliaryP2, Some((1, 1))).unwrap();
    assert_eq!(g.embeddings.len(), spec.n_subjects);
    let rates = score_linkage(&q.embeddings, &g.embeddings, &[1]).unwrap();
    let n = spec.n_subjects as f64;
    assert!(within_binomial(rates[&1] * n, n, 1.0 / n), "hit@1 {}", rates[&1]);
}

#[test]
fn embedded_subject_count() {
    let data = generate_corpus(&CorpusSpec {
        n_subjects: 30,
        vocab_size: 40,
        n_weeks: 4,
        visits_per_week: (5, 10),
        seed: 8,
        ..CorpusSpec::default()
    })
    .unwrap();
    // Drop week 3 for every third subject.
    let sequences: Vec<WeekSequence> = data
        .sequences()
        .iter()
        .enumerate()
        .filter(|(i, s)| !(s.week_index == 3 && (i / 4) % 3 == 0))
        .map(|(_, s)| s.clone())
        .collect();
    let data = PanelDataset::new(Arc::clone(data.vocab()), sequences).unwrap();
    let cfg = ModelConfig {
        vocab_size: 40,
        token_embed_dim: 4,
        hidden_dim: 6,
        output_dim: 4,
        ..ModelConfig::default()
    };
    let p = init_params(&cfg).unwrap();
    let expected = data.by_subject().iter().filter(|(_, idx)| idx.len() == 4).count();
    let out = embed_subjects(&p, &cfg, &data, EmbedPolicy::LastWeek, Source::AuxiliaryP2, Some((3, 3))).unwrap();
    assert_eq!(out.embeddings.len(), expected);
    assert_eq!(out.excluded.len(), 30 - expected);
}

#[test]
fn training_reduces_loss() {
    let data = generate_corpus(&CorpusSpec {
        n_subjects: 20,
        signature_weight: 0.6,
        seed: 13,
        ..CorpusSpec::default()
    })
    .unwrap();
    let mcfg = ModelConfig {
        vocab_size: data.vocab().len(),
        seed: 13,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: 30,
        seed: 13,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let state = train(&data, &mcfg, &tcfg).unwrap();
    let first = state.loss_history.first().unwrap().1;
    let last = state.loss_history.last().unwrap().1;
    assert!(last < first, "loss {first} -> {last}");
    assert!(state.params.all_finite());
}
