//! Triplet sampling and the optimization loop fitting the encoder to the
//! released period.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embednet::{
    backward, init_params, triplet_loss, Embedding, Encoder, ForwardTrace, GradientBuffer,
    ModelConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::seqdata::PanelDataset;

/// Negatives drawn per anchor-positive pair when mining semi-hard triplets.
pub const CANDIDATE_POOL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    Random,
    #[default]
    SemiHard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_triplets: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub mining: Mining,
    pub seed: u64,
    /// Validation cadence in epochs; 0 disables it.
    pub eval_every: usize,
    /// Triplets per epoch. Defaults to one per week sequence of every
    /// subject that can serve as an anchor.
    pub triplets_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_triplets: 16,
            margin: 0.2,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            mining: Mining::default(),
            seed: 0,
            eval_every: 5,
            triplets_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // `learning_rate = 0` is allowed as a null update.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a non-negative finite number"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin", "must be positive"));
        }
        if self.batch_triplets < 1 {
            return Err(Error::config("batch_triplets", "must be at least 1"));
        }
        if self.triplets_per_epoch == Some(0) {
            return Err(Error::config("triplets_per_epoch", "must be at least 1"));
        }
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(Error::config("optimizer", "adam needs beta in [0, 1) and epsilon > 0"));
            }
        }
        Ok(())
    }
}

/// Indices into [`PanelDataset::sequences`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Picks the closest negative that is still farther than the positive;
/// falls back to the closest negative overall. Ties go to the lower index.
pub fn select_semi_hard(d_ap: f64, d_an: &[f64]) -> usize {
    let pick = |pred: &dyn Fn(f64) -> bool| {
        d_an.iter()
            .enumerate()
            .filter(|(_, &d)| pred(d))
            .fold(None, |best: Option<(usize, f64)>, (i, &d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i)
    };
    pick(&|d| d > d_ap).or_else(|| pick(&|_| true)).expect("non-empty pool")
}

/// Embeds every sequence of `data`.
pub fn embed_all(
    params: &ModelParams,
    config: &ModelConfig,
    data: &PanelDataset,
) -> Result<Vec<Embedding>> {
    let encoder = Encoder::new(params, config);
    data.sequences()
        .par_iter()
        .map(|s| encoder.embed(&s.tokens))
        .collect()
}

pub fn sample_triplets(
    data: &PanelDataset,
    n: usize,
    mining: Mining,
    model: Option<(&ModelParams, &ModelConfig)>,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let groups = data.by_subject();
    if groups.len() < 2 {
        return Err(Error::Data("triplet sampling needs at least 2 subjects".into()));
    }
    let anchors: Vec<&Vec<usize>> = groups.iter().map(|(_, idx)| idx).filter(|idx| idx.len() >= 2).collect();
    if anchors.is_empty() {
        return Err(Error::Data("no subject has two or more week sequences".into()));
    }
    let embeddings = match (mining, model) {
        (Mining::Random, _) => None,
        (Mining::SemiHard, Some((params, config))) => Some(embed_all(params, config, data)?),
        (Mining::SemiHard, None) => {
            return Err(Error::config("mining", "semi-hard mining needs model parameters"))
        }
    };

    let seqs = data.sequences();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_negative = |rng: &mut ChaCha8Rng, subject: &str| loop {
        let i = rng.gen_range(0..seqs.len());
        if seqs[i].subject_id != subject {
            break i;
        }
    };

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let weeks = anchors[rng.gen_range(0..anchors.len())];
        let a = rng.gen_range(0..weeks.len());
        let mut p = rng.gen_range(0..weeks.len() - 1);
        if p >= a {
            p += 1;
        }
        let (anchor, positive) = (weeks[a], weeks[p]);
        let subject = seqs[anchor].subject_id.as_str();
        let negative = match &embeddings {
            None => draw_negative(&mut rng, subject),
            Some(emb) => {
                let pool: Vec<usize> = (0..CANDIDATE_POOL).map(|_| draw_negative(&mut rng, subject)).collect();
                let d_ap = emb[anchor].distance(&emb[positive]);
                let d_an: Vec<f64> = pool.iter().map(|&c| emb[anchor].distance(&emb[c])).collect();
                pool[select_semi_hard(d_ap, &d_an)]
            }
        };
        out.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// Mean loss and mean gradient over `triplets`.
///
/// Each distinct sequence is run forward and backward once; its embedding
/// gradient is the sum of its contributions across the batch.
pub fn batch_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    data: &PanelDataset,
    triplets: &[Triplet],
    margin: f64,
) -> Result<(f64, GradientBuffer)> {
    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    let mut order = Vec::new();
    for t in triplets {
        for i in [t.anchor, t.positive, t.negative] {
            slots.entry(i).or_insert_with(|| {
                order.push(i);
                order.len() - 1
            });
        }
    }
    let seqs = data.sequences();
    let encoder = Encoder::new(params, config);
    let traces: Vec<ForwardTrace> = order
        .par_iter()
        .map(|&i| encoder.forward(&seqs[i].tokens))
        .collect::<Result<_>>()?;

    let scale = 1.0 / triplets.len() as f64;
    let mut d_emb = vec![vec![0.0; config.output_dim]; order.len()];
    let mut active = vec![false; order.len()];
    let mut total = 0.0;
    for t in triplets {
        let (a, p, n) = (slots[&t.anchor], slots[&t.positive], slots[&t.negative]);
        let tl = triplet_loss(
            &traces[a].embedding.0,
            &traces[p].embedding.0,
            &traces[n].embedding.0,
            margin,
        );
        total += tl.loss;
        if !tl.is_active() {
            continue;
        }
        for (slot, g) in [(a, &tl.d_anchor), (p, &tl.d_positive), (n, &tl.d_negative)] {
            active[slot] = true;
            d_emb[slot].iter_mut().zip(g).for_each(|(d, v)| *d += scale * v);
        }
    }

    let partials: Vec<GradientBuffer> = (0..order.len())
        .into_par_iter()
        .filter(|&s| active[s])
        .map(|s| {
            let mut g = GradientBuffer::zeros(config);
            backward(params, config, &traces[s], &d_emb[s], &mut g);
            g
        })
        .collect();
    let mut grads = GradientBuffer::zeros(config);
    for g in &partials {
        grads.add_scaled(g, 1.0);
    }
    Ok((total * scale, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub first: GradientBuffer,
    pub second: GradientBuffer,
    pub steps: u64,
}

/// Applies one optimizer step in place.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &GradientBuffer,
    kind: OptimizerKind,
    learning_rate: f64,
    moments: &mut Option<AdamMoments>,
) {
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= learning_rate * gv;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            let m = moments.get_or_insert_with(|| AdamMoments {
                first: zero_like(grads),
                second: zero_like(grads),
                steps: 0,
            });
            m.steps += 1;
            let bc1 = 1.0 - beta1.powi(m.steps as i32);
            let bc2 = 1.0 - beta2.powi(m.steps as i32);
            let tensors = params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(m.first.tensors_mut())
                .zip(m.second.tensors_mut());
            for (((p, g), m1), m2) in tensors {
                for i in 0..p.len() {
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m1[i] / bc1;
                    let v_hat = m2[i] / bc2;
                    p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}

fn zero_like(w: &GradientBuffer) -> GradientBuffer {
    let mut z = w.clone();
    z.scale(0.0);
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub moments: Option<AdamMoments>,
    pub epoch: usize,
    /// `(epoch, mean batch loss)`, epochs numbered from 1.
    pub loss_history: Vec<(usize, f64)>,
    /// `(epoch, top-1 self-linkage rate)` at each evaluation.
    pub val_history: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn val_at(&self, epoch: usize) -> Option<f64> {
        self.val_history.iter().find(|(e, _)| *e == epoch).map(|(_, v)| *v)
    }
}

/// Within-period linkage check: each subject's last week against the mean
/// of its other weeks. Returns `None` when fewer than two subjects qualify.
pub fn validation_top1(
    params: &ModelParams,
    config: &ModelConfig,
    data: &PanelDataset,
) -> Result<Option<f64>> {
    let emb = embed_all(params, config, data)?;
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for (_, idx) in data.by_subject() {
        if idx.len() < 2 {
            continue;
        }
        let (last, rest) = idx.split_last().unwrap();
        queries.push(emb[*last].0.clone());
        let mut mean = vec![0.0; config.output_dim];
        for &i in rest {
            mean.iter_mut().zip(&emb[i].0).for_each(|(m, v)| *m += v);
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        mean.iter_mut().for_each(|v| *v /= norm);
        gallery.push(mean);
    }
    if queries.len() < 2 {
        return Ok(None);
    }
    let hits = queries
        .iter()
        .enumerate()
        .filter(|(qi, q)| {
            let best = gallery
                .iter()
                .enumerate()
                .map(|(gi, g)| (gi, crate::embednet::euclidean(q, g)))
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
            best.0 == *qi
        })
        .count();
    Ok(Some(hits as f64 / queries.len() as f64))
}

pub fn train(data: &PanelDataset, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainState> {
    train_with_progress(data, mcfg, tcfg, |_, _| {})
}

/// Runs the full training loop, calling `progress(epoch, mean_loss)` after
/// each epoch.
pub fn train_with_progress(
    data: &PanelDataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainState> {
    tcfg.validate()?;
    mcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training data is empty".into()));
    }
    if data.vocab().len() > mcfg.vocab_size {
        return Err(Error::config(
            "vocab_size",
            format!("data vocabulary has {} tokens, model only {}", data.vocab().len(), mcfg.vocab_size),
        ));
    }
    let per_epoch = tcfg.triplets_per_epoch.unwrap_or_else(|| {
        data.by_subject()
            .iter()
            .filter(|(_, idx)| idx.len() >= 2)
            .map(|(_, idx)| idx.len())
            .sum()
    });

    let mut state = TrainState {
        params: init_params(mcfg)?,
        moments: None,
        epoch: 0,
        loss_history: Vec::new(),
        val_history: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    for epoch in 1..=tcfg.epochs {
        let epoch_seed = rng.gen::<u64>();
        let model = Some((&state.params, mcfg));
        let triplets = sample_triplets(data, per_epoch, tcfg.mining, model, epoch_seed)?;
        let mut batch_losses = Vec::new();
        for (b, batch) in triplets.chunks(tcfg.batch_triplets).enumerate() {
            let (loss, grads) = batch_gradient(&state.params, mcfg, data, batch, tcfg.margin)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            optimizer_step(&mut state.params, &grads, tcfg.optimizer, tcfg.learning_rate, &mut state.moments);
            batch_losses.push(loss);
        }
        let mean = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        state.epoch = epoch;
        state.loss_history.push((epoch, mean));
        if tcfg.eval_every > 0 && epoch % tcfg.eval_every == 0 {
            if let Some(v) = validation_top1(&state.params, mcfg, data)? {
                state.val_history.push((epoch, v));
            }
        }
        progress(epoch, mean);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::seqdata::{Vocab, WeekSequence};

    fn two_by_two() -> PanelDataset {
        let vocab = Arc::new(Vocab::from_tokens(["a", "b", "c"]).unwrap());
        let seq = |s: &str, w, t: Vec<u32>| WeekSequence {
            subject_id: s.into(),
            week_index: w,
            tokens: t,
        };
        PanelDataset::new(
            vocab,
            vec![
                seq("x", 0, vec![0, 1]),
                seq("x", 1, vec![1, 1]),
                seq("y", 0, vec![2, 2]),
                seq("y", 1, vec![2, 0]),
            ],
        )
        .unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 3,
            token_embed_dim: 4,
            hidden_dim: 5,
            output_dim: 3,
            max_seq_len: 8,
            seed: 2,
        }
    }

    #[test]
    fn triplet_constraints_hold() {
        let d = two_by_two();
        let p = init_params(&small_config()).unwrap();
        for mining in [Mining::Random, Mining::SemiHard] {
            let ts = sample_triplets(&d, 50, mining, Some((&p, &small_config())), 4).unwrap();
            for t in ts {
                let s = d.sequences();
                assert_ne!(t.anchor, t.positive);
                assert_eq!(s[t.anchor].subject_id, s[t.positive].subject_id);
                assert_ne!(s[t.anchor].subject_id, s[t.negative].subject_id);
            }
        }
    }

    #[test]
    fn random_sampling_is_deterministic() {
        let d = two_by_two();
        let a = sample_triplets(&d, 20, Mining::Random, None, 9).unwrap();
        let b = sample_triplets(&d, 20, Mining::Random, None, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_errors() {
        let d = two_by_two();
        assert!(sample_triplets(&d, 1, Mining::SemiHard, None, 0).is_err());
        let single = d.retain_weeks(0, 0);
        assert!(sample_triplets(&single, 1, Mining::Random, None, 0).is_err());
    }

    #[test]
    fn semi_hard_selection_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let d_ap = rng.gen_range(0.0..2.0);
            let pool: Vec<f64> = (0..CANDIDATE_POOL)
                .map(|_| (rng.gen_range(0.0..2.0f64) * 8.0).round() / 8.0)
                .collect();
            // Oracle: sort every (distance, index) pair and scan.
            let mut sorted: Vec<(f64, usize)> = pool.iter().copied().zip(0..).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected = sorted
                .iter()
                .find(|(d, _)| *d > d_ap)
                .unwrap_or(&sorted[0])
                .1;
            assert_eq!(select_semi_hard(d_ap, &pool), expected);
        }
    }

    #[test]
    fn zero_learning_rate_is_null_update() {
        let d = two_by_two();
        let cfg = small_config();
        let tcfg = TrainConfig {
            epochs: 3,
            batch_triplets: 2,
            learning_rate: 0.0,
            triplets_per_epoch: Some(6),
            ..TrainConfig::default()
        };
        let state = train(&d, &cfg, &tcfg).unwrap();
        let init = init_params(&cfg).unwrap();
        assert!(state.params.iter().zip(init.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adam_ignores_zero_gradient() {
        let cfg = small_config();
        let mut p = init_params(&cfg).unwrap();
        let before = p.clone();
        let zero = GradientBuffer::zeros(&cfg);
        let mut moments = None;
        for _ in 0..3 {
            optimizer_step(&mut p, &zero, OptimizerKind::default(), 0.1, &mut moments);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn batch_gradient_is_mean_of_triplet_gradients() {
        let d = two_by_two();
        let cfg = small_config();
        let mut p = init_params(&cfg).unwrap();
        p.output_bias.iter_mut().for_each(|v| *v = 0.3);
        let ts = sample_triplets(&d, 7, Mining::Random, None, 1).unwrap();
        let (mean_loss, mean_grad) = batch_gradient(&p, &cfg, &d, &ts, 1.0).unwrap();

        let mut sum = GradientBuffer::zeros(&cfg);
        let mut loss_sum = 0.0;
        for t in &ts {
            let s = d.sequences();
            let (l, g) = crate::embednet::backward_triplet(
                &p,
                &cfg,
                &s[t.anchor].tokens,
                &s[t.positive].tokens,
                &s[t.negative].tokens,
                1.0,
            )
            .unwrap();
            loss_sum += l;
            sum.add_scaled(&g, 1.0);
        }
        assert!((mean_loss - loss_sum / 7.0).abs() < 1e-12);
        assert!(mean_grad.iter().any(|g| g != 0.0));
        for (a, b) in mean_grad.iter().zip(sum.iter()) {
            assert!((a - b / 7.0).abs() < 1e-12, "{a} vs {}", b / 7.0);
        }
    }

    #[test]
    fn invalid_configs() {
        for tcfg in [
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { margin: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_triplets: 0, ..TrainConfig::default() },
        ] {
            assert!(tcfg.validate().is_err());
        }
    }
}
