//! End-to-end run: corpus, period split, training, attack sweep, privacy
//! sweep, and the report bundle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{run_attack, AttackOptions, ReidReport, DEFAULT_KS};
use crate::corpusgen::{generate_corpus, CorpusSpec};
use crate::embednet::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::privacy::{dcr_sweep, SynthConfig};
use crate::report::{self, ReportBundle};
use crate::seqdata::{
    load_panel, perturb, save_panel, split_periods, split_train_holdout, EventFormat,
    PanelDataset, PerturbSpec,
};
use crate::trainer::{train_with_progress, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Generate(CorpusSpec),
    Path(PathBuf),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generate(CorpusSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackStage {
    /// Perturbation rates besides the unperturbed release, which always runs.
    pub flip_rates: Vec<f64>,
    pub ks: Vec<usize>,
    pub query_sample: Option<usize>,
}

impl Default for AttackStage {
    fn default() -> Self {
        Self {
            flip_rates: vec![0.1, 0.2, 0.3, 0.6],
            ks: DEFAULT_KS.to_vec(),
            query_sample: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyStage {
    /// Share of released subjects the synthesizer is fitted to.
    pub train_fraction: f64,
    pub flip_rates: Vec<f64>,
    pub synth: SynthConfig,
}

impl Default for PrivacyStage {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            flip_rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            synth: SynthConfig::default(),
        }
    }
}

/// Every nested `seed` field is replaced by one derived from `seed` and the
/// stage name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    /// First week of the auxiliary period.
    pub p2_boundary: u32,
    /// `vocab_size` is taken from the corpus.
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub attack: AttackStage,
    pub privacy: PrivacyStage,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSource::default(),
            p2_boundary: 8,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            attack: AttackStage::default(),
            privacy: PrivacyStage::default(),
            output_dir: None,
        }
    }
}

fn check_rates(field: &'static str, rates: &[f64]) -> Result<()> {
    match rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        Some(r) => Err(Error::config(field, format!("{r} is not in [0, 1]"))),
        None => Ok(()),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let CorpusSource::Generate(spec) = &self.corpus {
            spec.validate()?;
        }
        ModelConfig {
            vocab_size: 1,
            ..self.model.clone()
        }
        .validate()?;
        self.training.validate()?;
        if self.p2_boundary == 0 {
            return Err(Error::config("p2_boundary", "must be at least 1"));
        }
        check_rates("attack.flip_rates", &self.attack.flip_rates)?;
        if self.attack.ks.is_empty() || self.attack.ks.contains(&0) {
            return Err(Error::config("attack.ks", "need at least one k >= 1"));
        }
        check_rates("privacy.flip_rates", &self.privacy.flip_rates)?;
        let f = self.privacy.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("privacy.train_fraction", format!("{f} is not in (0, 1)")));
        }
        self.privacy.synth.validate()
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub const STAGES: [&str; 7] = [
    "corpus",
    "model",
    "train",
    "attack_perturb",
    "query_sample",
    "privacy_split",
    "synth",
];

/// First 8 bytes of SHA-256 over the global seed and the stage name.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub version: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: RunConfig,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Reuse artifacts already present in the output directory.
    pub resume: bool,
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// File name fragment for a rate, e.g. `0.3` -> `30`.
pub fn rate_tag(rate: f64) -> String {
    format!("{}", (rate * 100.0).round())
}

fn flip_checkpoint(dir: &Path, rate: f64) -> PathBuf {
    dir.join(format!("model_flip{}.ckpt", rate_tag(rate)))
}

fn exists(paths: &[&Path]) -> bool {
    paths.iter().all(|p| p.is_file())
}

fn train_or_load(
    ckpt: &Path,
    data: &PanelDataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    resume: bool,
    log: &mut dyn FnMut(&str),
) -> Result<(Model, Option<TrainState>)> {
    if resume && exists(&[ckpt, &Model::vocab_path(ckpt)]) {
        log(&format!("reusing {}", ckpt.display()));
        return Ok((Model::load(ckpt)?, None));
    }
    let state = train_with_progress(data, mcfg, tcfg, |epoch, loss| {
        log(&format!("epoch {epoch}/{}: loss {loss:.4}", tcfg.epochs))
    })?;
    let model = Model {
        config: mcfg.clone(),
        params: state.params.clone(),
        vocab: data.vocab().clone(),
    };
    model.save(ckpt)?;
    Ok((model, Some(state)))
}

/// Runs every stage, writing artifacts into `out`.
pub fn run_pipeline(
    config: &RunConfig,
    out: &Path,
    options: RunOptions,
    log: &mut dyn FnMut(&str),
) -> Result<ReportBundle> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seeds: BTreeMap<String, u64> = STAGES
        .iter()
        .map(|s| (s.to_string(), stage_seed(config.seed, s)))
        .collect();
    let resume = options.resume;

    // The corpus is always read back from disk so that the vocabulary order
    // is the same whether or not the run resumes.
    let corpus_path = out.join("corpus.jsonl");
    let corpus = stage("corpus", || {
        if !(resume && corpus_path.is_file()) {
            let data = match &config.corpus {
                CorpusSource::Generate(spec) => generate_corpus(&CorpusSpec {
                    seed: seeds["corpus"],
                    ..spec.clone()
                })?,
                CorpusSource::Path(path) => load_panel(path, EventFormat::from_path(path))?,
            };
            save_panel(&data, &corpus_path, EventFormat::Jsonl)?;
        }
        load_panel(&corpus_path, EventFormat::Jsonl)
    })?;
    log(&format!(
        "corpus: {} subjects, {} events, {} tokens",
        corpus.n_subjects(),
        corpus.n_events(),
        corpus.vocab().len()
    ));

    let split = stage("split", || {
        let split = split_periods(&corpus, config.p2_boundary)?;
        save_panel(&split.released, &out.join("p1.jsonl"), EventFormat::Jsonl)?;
        save_panel(&split.auxiliary, &out.join("p2.jsonl"), EventFormat::Jsonl)?;
        Ok(split)
    })?;

    let mcfg = ModelConfig {
        vocab_size: corpus.vocab().len(),
        seed: seeds["model"],
        ..config.model.clone()
    };
    let tcfg = TrainConfig {
        seed: seeds["train"],
        ..config.training.clone()
    };

    let ckpt = out.join("model.ckpt");
    let log_path = out.join(report::TRAIN_LOG_CSV);
    let base = stage("train", || {
        let (model, state) = train_or_load(&ckpt, &split.released, &mcfg, &tcfg, resume && log_path.is_file(), log)?;
        if let Some(state) = state {
            report::save_csv(&report::train_log_rows(&state), &log_path)?;
        }
        Ok(model)
    })?;

    let reid_path = out.join(report::REID_CSV);
    stage("attack", || {
        let options = AttackOptions {
            ks: config.attack.ks.clone(),
            query_sample: config.attack.query_sample,
            query_seed: seeds["query_sample"],
            ..AttackOptions::default()
        };
        let mut rates: Vec<f64> = config.attack.flip_rates.iter().copied().filter(|&r| r > 0.0).collect();
        rates.sort_by(f64::total_cmp);
        rates.dedup();

        let mut reports: Vec<ReidReport> =
            vec![run_attack(&base.params, &base.config, &split.released, &split.auxiliary, None, &options)?];
        for rate in rates {
            log(&format!("attack: retraining on {}% flipped release", rate_tag(rate)));
            let spec = PerturbSpec::new(rate, seeds["attack_perturb"]);
            let released = perturb(&split.released, &spec)?;
            let (model, _) = train_or_load(&flip_checkpoint(out, rate), &released, &mcfg, &tcfg, resume, log)?;
            let report = run_attack(&model.params, &model.config, &released, &split.auxiliary, None, &options)?;
            reports.push(ReidReport {
                perturb_rate: rate,
                ..report
            });
        }
        report::save_csv(&report::reid_rows(&reports), &reid_path)
    })?;

    stage("privacy", || {
        let (train, holdout) =
            split_train_holdout(&split.released, config.privacy.train_fraction, seeds["privacy_split"])?;
        save_panel(&train, &out.join("train.jsonl"), EventFormat::Jsonl)?;
        save_panel(&holdout, &out.join("holdout.jsonl"), EventFormat::Jsonl)?;
        let synth_cfg = SynthConfig {
            seed: seeds["synth"],
            ..config.privacy.synth.clone()
        };
        save_panel(&crate::privacy::synthesize(&train, &synth_cfg)?, &out.join("synth.jsonl"), EventFormat::Jsonl)?;
        let series = dcr_sweep(
            &base.params,
            &base.config,
            &train,
            &holdout,
            &config.privacy.flip_rates,
            seeds["attack_perturb"],
            Some(&synth_cfg),
        )?;
        report::save_csv(&report::dcr_rows(&series), &out.join(report::DCR_CSV))?;
        report::save_csv(&report::cdf_rows(&series), &out.join(report::CDF_CSV))
    })?;

    stage("report", || {
        let manifest = Manifest {
            config_hash: config.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: seeds.clone(),
            config: config.clone(),
        };
        let path = out.join(report::MANIFEST_JSON);
        let json = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let bundle = ReportBundle::load(out)?;
        let md = out.join(report::REPORT_MD);
        std::fs::write(&md, report::report_render(&bundle)).map_err(|e| Error::io(&md, e))?;
        Ok(bundle)
    })
}
