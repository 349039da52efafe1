use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use behavior_reid::attack::{run_attack, AttackOptions};
use behavior_reid::corpusgen::{generate_corpus, CorpusSpec};
use behavior_reid::embednet::{Model, ModelConfig};
use behavior_reid::pipeline::{run_pipeline, RunConfig, RunOptions};
use behavior_reid::privacy::{dcr_sweep, SynthConfig};
use behavior_reid::report::{self, ReportBundle};
use behavior_reid::seqdata::{load_panel, perturb, save_panel, split_periods, EventFormat, PanelDataset, PerturbSpec};
use behavior_reid::trainer::{train_with_progress, TrainConfig};
use behavior_reid::Error;

/// Behavioral re-identification attacks and embedding-based privacy tests.
#[derive(Parser)]
#[command(name = "repro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clickstream panel.
    Corpusgen {
        /// Corpus spec as JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the encoder to the released period.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Weeks from this index on are excluded from training.
        #[arg(long)]
        p2_boundary: Option<u32>,
        /// Training config as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model config as JSON; `vocab_size` comes from the data.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Link auxiliary subjects to the released data.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        released: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        /// Perturb the release first and retrain the model on it.
        #[arg(long, default_value_t = 0.0)]
        flip: f64,
        #[arg(long, default_value_t = 0)]
        flip_seed: u64,
        /// Training config used when retraining on a perturbed release.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to store the retrained model.
        #[arg(long)]
        save_model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 10])]
        ks: Vec<usize>,
        /// Attack a random subset of this many auxiliary subjects.
        #[arg(long)]
        query_sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        query_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance-to-closest-record test of flipped and synthetic data.
    Privacy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long, value_delimiter = ',')]
        flips: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        flip_seed: u64,
        /// Synthesizer config as JSON; omit to skip the synthetic series.
        #[arg(long)]
        synth: Option<PathBuf>,
        /// Also write the synthetic panel here.
        #[arg(long)]
        synth_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cdf: Option<PathBuf>,
    },
    /// Run the whole pipeline from one config.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep existing artifacts in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Render the markdown summary of a results directory.
    Render {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
            Ok(serde_json::from_slice(&bytes)?)
        }
    }
}

fn load(path: &Path) -> Result<PanelDataset, Error> {
    load_panel(path, EventFormat::from_path(path))
}

fn load_aligned(model: &Model, path: &Path) -> Result<PanelDataset, Error> {
    let (data, dropped) = model.align(&load(path)?);
    if dropped > 0 {
        eprintln!("{}: dropped {dropped} events with tokens unknown to the model", path.display());
    }
    Ok(data)
}

fn train_model(data: &PanelDataset, mcfg: ModelConfig, tcfg: &TrainConfig) -> Result<Model, Error> {
    let mcfg = ModelConfig {
        vocab_size: data.vocab().len(),
        ..mcfg
    };
    let state = train_with_progress(data, &mcfg, tcfg, |epoch, loss| {
        eprintln!("epoch {epoch}/{}: loss {loss:.4}", tcfg.epochs)
    })?;
    Ok(Model {
        config: mcfg,
        params: state.params,
        vocab: data.vocab().clone(),
    })
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Corpusgen { spec, seed, out } => {
            let mut spec: CorpusSpec = read_json(spec.as_deref())?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let data = generate_corpus(&spec)?;
            save_panel(&data, &out, EventFormat::from_path(&out))?;
        }
        Command::Train {
            data,
            p2_boundary,
            config,
            model_config,
            out,
            log,
        } => {
            let tcfg: TrainConfig = read_json(config.as_deref())?;
            let mcfg: ModelConfig = read_json(model_config.as_deref())?;
            let mut data = load(&data)?;
            if let Some(boundary) = p2_boundary {
                data = split_periods(&data, boundary)?.released;
            }
            let mcfg = ModelConfig {
                vocab_size: data.vocab().len(),
                ..mcfg
            };
            let state = train_with_progress(&data, &mcfg, &tcfg, |epoch, loss| {
                eprintln!("epoch {epoch}/{}: loss {loss:.4}", tcfg.epochs)
            })?;
            let model = Model {
                config: mcfg,
                params: state.params.clone(),
                vocab: data.vocab().clone(),
            };
            model.save(&out)?;
            if let Some(log) = log {
                report::save_csv(&report::train_log_rows(&state), &log)?;
            }
        }
        Command::Attack {
            model,
            released,
            aux,
            flip,
            flip_seed,
            config,
            save_model,
            ks,
            query_sample,
            query_seed,
            out,
        } => {
            let spec = PerturbSpec::new(flip, flip_seed);
            spec.validate()?;
            let mut model = Model::load(&model)?;
            let mut released = load_aligned(&model, &released)?;
            if flip > 0.0 {
                let tcfg: TrainConfig = read_json(config.as_deref())?;
                released = perturb(&released, &spec)?;
                model = train_model(&released, model.config.clone(), &tcfg)?;
                if let Some(path) = save_model {
                    model.save(&path)?;
                }
            }
            let aux = load_aligned(&model, &aux)?;
            let options = AttackOptions {
                ks,
                query_sample,
                query_seed,
                ..AttackOptions::default()
            };
            let mut reid = run_attack(&model.params, &model.config, &released, &aux, None, &options)?;
            reid.perturb_rate = flip;
            report::save_csv(&report::reid_rows(&[reid]), &out)?;
        }
        Command::Privacy {
            model,
            train,
            holdout,
            flips,
            flip_seed,
            synth,
            synth_out,
            out,
            cdf,
        } => {
            let model = Model::load(&model)?;
            let train = load_aligned(&model, &train)?;
            let holdout = load_aligned(&model, &holdout)?;
            let synth_cfg: Option<SynthConfig> = synth.as_deref().map(|p| read_json(Some(p))).transpose()?;
            if let (Some(cfg), Some(path)) = (&synth_cfg, &synth_out) {
                let data = behavior_reid::privacy::synthesize(&train, cfg)?;
                save_panel(&data, path, EventFormat::from_path(path))?;
            }
            let series = dcr_sweep(
                &model.params,
                &model.config,
                &train,
                &holdout,
                &flips,
                flip_seed,
                synth_cfg.as_ref(),
            )?;
            report::save_csv(&report::dcr_rows(&series), &out)?;
            if let Some(cdf) = cdf {
                report::save_csv(&report::cdf_rows(&series), &cdf)?;
            }
        }
        Command::Run {
            config,
            out,
            resume,
            quiet,
        } => {
            let config: RunConfig = read_json(config.as_deref())?;
            let out = out
                .or_else(|| config.output_dir.clone())
                .context("no output directory: pass --out or set output_dir")?;
            let mut log = |msg: &str| {
                if !quiet {
                    eprintln!("{msg}");
                }
            };
            run_pipeline(&config, &out, RunOptions { resume }, &mut log)?;
            if !quiet {
                eprintln!("report written to {}", out.join(report::REPORT_MD).display());
            }
        }
        Command::Render { bundle, out } => {
            let text = report::report_render(&ReportBundle::load(&bundle)?);
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| path.display().to_string())?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<Error>().map_or(true, Error::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
