//! The pattern attack: embed released-period and auxiliary-period behavior,
//! link subjects by exact nearest-neighbor search, and score top-k hits.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embednet::{euclidean, Encoder, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::seqdata::{perturb, PanelDataset, PerturbSpec};
use crate::trainer::{train, TrainConfig, TrainState};

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    ReleasedP1,
    AuxiliaryP2,
}

/// How a subject's weeks collapse into one point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedPolicy {
    /// Embedding of the subject's final week.
    LastWeek,
    /// Mean of the per-week embeddings, re-normalized.
    MeanOfWeeks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEmbedding {
    pub subject_id: String,
    pub vector: Vec<f64>,
    pub source: Source,
    pub weeks_used: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEmbeddings {
    pub embeddings: Vec<SubjectEmbedding>,
    /// Subjects with no week inside the requested scope.
    pub excluded: Vec<String>,
}

/// Embeds each subject of `data` from its weeks in `scope` (inclusive).
pub fn embed_subjects(
    params: &ModelParams,
    config: &ModelConfig,
    data: &PanelDataset,
    policy: EmbedPolicy,
    source: Source,
    scope: Option<(u32, u32)>,
) -> Result<SubjectEmbeddings> {
    let encoder = Encoder::new(params, config);
    let seqs = data.sequences();
    let groups = data.by_subject();
    let in_scope = |i: &usize| scope.map_or(true, |(lo, hi)| (lo..=hi).contains(&seqs[*i].week_index));

    let mut excluded = Vec::new();
    let mut work = Vec::new();
    for (subject, idx) in &groups {
        let weeks: Vec<usize> = idx.iter().copied().filter(in_scope).collect();
        if weeks.is_empty() {
            excluded.push(subject.to_string());
            continue;
        }
        let weeks = match policy {
            EmbedPolicy::LastWeek => vec![*weeks.last().unwrap()],
            EmbedPolicy::MeanOfWeeks => weeks,
        };
        work.push((*subject, weeks));
    }

    let embeddings = work
        .par_iter()
        .map(|(subject, weeks)| {
            let mut mean = vec![0.0; config.output_dim];
            for &i in weeks {
                let e = encoder.embed(&seqs[i].tokens)?;
                mean.iter_mut().zip(&e.0).for_each(|(m, v)| *m += v);
            }
            let vector = if weeks.len() == 1 {
                mean
            } else {
                let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Data(format!(
                        "week embeddings of `{subject}` cancel out"
                    )));
                }
                mean.iter().map(|v| v / norm).collect()
            };
            Ok(SubjectEmbedding {
                subject_id: subject.to_string(),
                vector,
                source,
                weeks_used: weeks.iter().map(|&i| seqs[i].week_index).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectEmbeddings {
        embeddings,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    /// Position in the gallery.
    pub index: usize,
    pub subject_id: String,
    pub distance: f64,
}

/// The `k` nearest gallery points to `query` by Euclidean distance; ties go
/// to the earlier gallery entry.
pub fn nearest(query: &[f64], gallery: &[SubjectEmbedding], k: usize) -> Vec<Neighbor> {
    let mut scored: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (euclidean(query, &g.vector), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored
        .into_iter()
        .map(|(distance, index)| Neighbor {
            index,
            subject_id: gallery[index].subject_id.clone(),
            distance,
        })
        .collect()
}

/// Exact brute-force k-NN for every query.
pub fn nn_search(
    queries: &[SubjectEmbedding],
    gallery: &[SubjectEmbedding],
    k: usize,
) -> Result<Vec<Vec<Neighbor>>> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    if k > gallery.len() {
        return Err(Error::config(
            "k",
            format!("{k} exceeds the gallery size {}", gallery.len()),
        ));
    }
    Ok(queries
        .par_iter()
        .map(|q| nearest(&q.vector, gallery, k))
        .collect())
}

/// Top-k re-identification rates for one perturbation level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReidReport {
    pub n_gallery: usize,
    pub n_queries: usize,
    pub hit_rate_at_k: BTreeMap<usize, f64>,
    pub random_baseline: f64,
    pub perturb_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackOptions {
    pub ks: Vec<usize>,
    pub gallery_policy: EmbedPolicy,
    pub query_policy: EmbedPolicy,
    /// Attack only a random subset of this many auxiliary subjects.
    pub query_sample: Option<usize>,
    pub query_seed: u64,
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            gallery_policy: EmbedPolicy::LastWeek,
            query_policy: EmbedPolicy::MeanOfWeeks,
            query_sample: None,
            query_seed: 0,
        }
    }
}

/// Scores queries against a gallery whose subject ids are the ground truth.
pub fn score_linkage(
    queries: &[SubjectEmbedding],
    gallery: &[SubjectEmbedding],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if queries.is_empty() {
        return Err(Error::Data("no auxiliary subjects to re-identify".into()));
    }
    let known: BTreeSet<&str> = gallery.iter().map(|g| g.subject_id.as_str()).collect();
    if let Some(q) = queries.iter().find(|q| !known.contains(q.subject_id.as_str())) {
        return Err(Error::Data(format!(
            "auxiliary subject `{}` is absent from the released data",
            q.subject_id
        )));
    }
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let neighbors = nn_search(queries, gallery, k_max)?;
    let ranks: Vec<Option<usize>> = queries
        .iter()
        .zip(&neighbors)
        .map(|(q, nn)| nn.iter().position(|n| n.subject_id == q.subject_id))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(i) if *i < k)).count();
            (k, hits as f64 / queries.len() as f64)
        })
        .collect())
}

/// Links auxiliary subjects back to the (optionally perturbed) release.
///
/// The model is expected to have been trained on the same release the
/// gallery is built from.
pub fn run_attack(
    params: &ModelParams,
    config: &ModelConfig,
    released: &PanelDataset,
    auxiliary: &PanelDataset,
    perturbation: Option<&PerturbSpec>,
    options: &AttackOptions,
) -> Result<ReidReport> {
    if options.ks.is_empty() || options.ks.contains(&0) {
        return Err(Error::config("ks", "need at least one k >= 1"));
    }
    let perturbed;
    let released = match perturbation {
        Some(spec) => {
            perturbed = perturb(released, spec)?;
            &perturbed
        }
        None => released,
    };
    let auxiliary = match options.query_sample {
        Some(n) => auxiliary.sample_subjects(n, options.query_seed),
        None => auxiliary.clone(),
    };
    let gallery = embed_subjects(
        params,
        config,
        released,
        options.gallery_policy,
        Source::ReleasedP1,
        None,
    )?
    .embeddings;
    let queries = embed_subjects(
        params,
        config,
        &auxiliary,
        options.query_policy,
        Source::AuxiliaryP2,
        None,
    )?
    .embeddings;
    let hit_rate_at_k = score_linkage(&queries, &gallery, &options.ks)?;
    Ok(ReidReport {
        n_gallery: gallery.len(),
        n_queries: queries.len(),
        hit_rate_at_k,
        random_baseline: 1.0 / gallery.len() as f64,
        perturb_rate: perturbation.map_or(0.0, |p| p.flip_rate),
    })
}

pub struct SweepPoint {
    pub report: ReidReport,
    pub state: TrainState,
}

/// For each flip rate: perturb the release, retrain on it, and attack.
pub fn attack_sweep(
    released: &PanelDataset,
    auxiliary: &PanelDataset,
    flip_rates: &[f64],
    perturb_seed: u64,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    options: &AttackOptions,
) -> Result<Vec<SweepPoint>> {
    flip_rates
        .iter()
        .map(|&rate| {
            let spec = PerturbSpec::new(rate, perturb_seed);
            let data = perturb(released, &spec)?;
            let state = train(&data, mcfg, tcfg)?;
            let report = run_attack(&state.params, mcfg, &data, auxiliary, None, options)?;
            Ok(SweepPoint {
                report: ReidReport {
                    perturb_rate: rate,
                    ..report
                },
                state,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::embednet::init_params;
    use crate::seqdata::{Vocab, WeekSequence};

    fn point(id: &str, v: Vec<f64>) -> SubjectEmbedding {
        SubjectEmbedding {
            subject_id: id.into(),
            vector: v,
            source: Source::ReleasedP1,
            weeks_used: vec![0],
        }
    }

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            token_embed_dim: 4,
            hidden_dim: 6,
            output_dim: 3,
            max_seq_len: 16,
            seed: 4,
        }
    }

    fn dataset() -> PanelDataset {
        let vocab = Arc::new(Vocab::from_tokens(["a", "b", "c", "d", "e", "f"]).unwrap());
        let mut seqs = Vec::new();
        for (s, base) in [("p", 0u32), ("q", 2), ("r", 4)] {
            for w in 0..3 {
                seqs.push(WeekSequence {
                    subject_id: s.into(),
                    week_index: w,
                    tokens: vec![base, base + 1, (base + w) % 6],
                });
            }
        }
        seqs.push(WeekSequence {
            subject_id: "solo".into(),
            week_index: 0,
            tokens: vec![5],
        });
        PanelDataset::new(vocab, seqs).unwrap()
    }

    #[test]
    fn identical_query_ranks_first() {
        let gallery = vec![point("a", vec![1.0, 0.0]), point("b", vec![0.0, 1.0])];
        let nn = nearest(&[0.0, 1.0], &gallery, 1);
        assert_eq!(nn[0].subject_id, "b");
        assert_eq!(nn[0].distance, 0.0);
    }

    #[test]
    fn full_k_is_sorted_permutation_with_stable_ties() {
        let gallery = vec![
            point("a", vec![1.0, 0.0]),
            point("b", vec![-1.0, 0.0]),
            point("c", vec![0.0, 1.0]),
            point("d", vec![1.0, 0.0]),
        ];
        let nn = nearest(&[1.0, 0.0], &gallery, 4);
        let ids: Vec<&str> = nn.iter().map(|n| n.subject_id.as_str()).collect();
        assert_eq!(ids, ["a", "d", "c", "b"]);
        assert!(nn.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn k_larger_than_gallery_fails() {
        let gallery = vec![point("a", vec![1.0])];
        assert!(nn_search(&gallery, &gallery, 2).is_err());
        assert!(nn_search(&gallery, &[], 1).is_err());
    }

    #[test]
    fn policies_agree_on_single_week() {
        let cfg = config();
        let p = init_params(&cfg).unwrap();
        let d = dataset();
        let last = embed_subjects(&p, &cfg, &d, EmbedPolicy::LastWeek, Source::ReleasedP1, None).unwrap();
        let mean = embed_subjects(&p, &cfg, &d, EmbedPolicy::MeanOfWeeks, Source::ReleasedP1, None).unwrap();
        let solo = |s: &SubjectEmbeddings| {
            s.embeddings.iter().find(|e| e.subject_id == "solo").unwrap().clone()
        };
        assert_eq!(solo(&last).vector, solo(&mean).vector);
        assert_eq!(last.embeddings.len(), 4);
        for e in &mean.embeddings {
            let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_of_identical_weeks() {
        let cfg = config();
        let p = init_params(&cfg).unwrap();
        let vocab = Arc::new(Vocab::from_tokens(["a", "b"]).unwrap());
        let seqs = (0..4)
            .map(|w| WeekSequence {
                subject_id: "x".into(),
                week_index: w,
                tokens: vec![0, 1, 1],
            })
            .collect();
        let d = PanelDataset::new(vocab, seqs).unwrap();
        let mean = embed_subjects(&p, &cfg, &d, EmbedPolicy::MeanOfWeeks, Source::ReleasedP1, None).unwrap();
        let single = crate::embednet::embed_tokens(&p, &cfg, &[0, 1, 1]).unwrap();
        for (a, b) in mean.embeddings[0].vector.iter().zip(&single.0) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(mean.embeddings[0].weeks_used, vec![0, 1, 2, 3]);
    }

    #[test]
    fn scope_excludes_subjects() {
        let cfg = config();
        let p = init_params(&cfg).unwrap();
        let out = embed_subjects(&p, &cfg, &dataset(), EmbedPolicy::MeanOfWeeks, Source::AuxiliaryP2, Some((1, 2)))
            .unwrap();
        assert_eq!(out.excluded, vec!["solo".to_string()]);
        assert_eq!(out.embeddings.len(), 3);
        assert!(out.embeddings.iter().all(|e| e.weeks_used == vec![1, 2]));
    }

    #[test]
    fn self_match_hits_everything() {
        let gallery: Vec<SubjectEmbedding> = (0..5)
            .map(|i| point(&format!("s{i}"), vec![i as f64, 1.0]))
            .collect();
        let rates = score_linkage(&gallery, &gallery, &[1, 3]).unwrap();
        assert_eq!(rates[&1], 1.0);
        assert_eq!(rates[&3], 1.0);
    }

    #[test]
    fn unknown_query_subject_fails() {
        let gallery = vec![point("a", vec![1.0])];
        let queries = vec![point("z", vec![1.0])];
        assert!(score_linkage(&queries, &gallery, &[1]).is_err());
        assert!(score_linkage(&[], &gallery, &[1]).is_err());
    }

    #[test]
    fn report_fields() {
        let cfg = config();
        let p = init_params(&cfg).unwrap();
        let d = dataset();
        let released = d.retain_weeks(0, 1);
        let aux = d.retain_weeks(2, 2);
        let opts = AttackOptions {
            ks: vec![1, 3],
            ..AttackOptions::default()
        };
        let r = run_attack(&p, &cfg, &released, &aux, None, &opts).unwrap();
        assert_eq!(r.n_gallery, 4);
        assert_eq!(r.n_queries, 3);
        assert_eq!(r.random_baseline, 0.25);
        assert!(r.hit_rate_at_k[&1] <= r.hit_rate_at_k[&3]);
    }
}
