//! CSV report files and their markdown rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::ReidReport;
use crate::error::{Error, Result};
use crate::privacy::{DcrSeries, SeriesKind};
use crate::trainer::TrainState;

pub const REID_CSV: &str = "reid.csv";
pub const DCR_CSV: &str = "dcr.csv";
pub const CDF_CSV: &str = "cdf.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReidRow {
    pub perturb_rate: f64,
    pub k: usize,
    pub hit_rate: f64,
    pub random_baseline: f64,
    pub n_gallery: usize,
    pub n_queries: usize,
}

pub fn reid_rows(reports: &[ReidReport]) -> Vec<ReidRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.hit_rate_at_k.iter().map(move |(&k, &hit_rate)| ReidRow {
                perturb_rate: r.perturb_rate,
                k,
                hit_rate,
                random_baseline: r.random_baseline,
                n_gallery: r.n_gallery,
                n_queries: r.n_queries,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcrRow {
    pub series: String,
    pub flip_rate: Option<f64>,
    pub dcr_share: f64,
    pub mean_dist_to_train: f64,
    pub mean_dist_to_holdout: f64,
    pub n_synthetic: usize,
    pub n_train: usize,
    pub n_holdout: usize,
}

pub fn dcr_rows(series: &[DcrSeries]) -> Vec<DcrRow> {
    series
        .iter()
        .map(|s| DcrRow {
            series: s.kind.label(),
            flip_rate: match s.kind {
                SeriesKind::Flipped { flip_rate } => Some(flip_rate),
                _ => None,
            },
            dcr_share: s.report.dcr_share,
            mean_dist_to_train: s.report.mean_dist_to_train,
            mean_dist_to_holdout: s.report.mean_dist_to_holdout,
            n_synthetic: s.report.n_synthetic,
            n_train: s.report.n_train,
            n_holdout: s.report.n_holdout,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub ratio: f64,
    pub cumulative_fraction: f64,
    pub series_label: String,
}

pub fn cdf_rows(series: &[DcrSeries]) -> Vec<CdfRow> {
    series
        .iter()
        .flat_map(|s| {
            let label = s.kind.label();
            s.report.ratio_cdf.iter().map(move |&(ratio, cumulative_fraction)| CdfRow {
                ratio,
                cumulative_fraction,
                series_label: label.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Empty for epochs without a validation pass.
    pub val_top1: Option<f64>,
}

pub fn train_log_rows(state: &TrainState) -> Vec<TrainLogRow> {
    state
        .loss_history
        .iter()
        .map(|&(epoch, mean_loss)| TrainLogRow {
            epoch,
            mean_loss,
            val_top1: state.val_at(epoch),
        })
        .collect()
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)
}

pub fn save_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn load_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

/// Parsed contents of a results directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub reid: Vec<ReidRow>,
    pub dcr: Vec<DcrRow>,
    pub cdf: Vec<CdfRow>,
    pub train_log: Vec<TrainLogRow>,
    pub manifest: serde_json::Value,
}

impl ReportBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let missing: Vec<String> = [REID_CSV, DCR_CSV, CDF_CSV, TRAIN_LOG_CSV, MANIFEST_JSON]
            .iter()
            .filter(|f| !dir.join(f).is_file())
            .map(|f| f.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteBundle(missing));
        }
        let manifest_path = dir.join(MANIFEST_JSON);
        let manifest = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(Self {
            reid: load_csv(&dir.join(REID_CSV))?,
            dcr: load_csv(&dir.join(DCR_CSV))?,
            cdf: load_csv(&dir.join(CDF_CSV))?,
            train_log: load_csv(&dir.join(TRAIN_LOG_CSV))?,
            manifest: serde_json::from_slice(&manifest)?,
        })
    }
}

fn percent(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn percent_label(rate: f64) -> String {
    format!("{}%", (rate * 100.0).round())
}

/// Re-identification table: one row per perturbation rate, one column per k.
pub fn render_reid_table(rows: &[ReidRow]) -> String {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut by_rate: BTreeMap<u64, BTreeMap<usize, &ReidRow>> = BTreeMap::new();
    for r in rows {
        by_rate.entry(r.perturb_rate.to_bits()).or_default().insert(r.k, r);
    }
    by_rate.entry(0f64.to_bits()).or_default();

    let mut out = String::from("| Flip |");
    for k in &ks {
        let _ = write!(out, " N{k}N |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(ks.len()));
    out.push('\n');
    for (bits, cells) in &by_rate {
        let _ = write!(out, "| {} |", percent_label(f64::from_bits(*bits)));
        for k in &ks {
            let cell = cells.get(k).map_or("n/a".into(), |r| percent(r.hit_rate));
            let _ = write!(out, " {cell} |");
        }
        out.push('\n');
    }
    if let Some(r) = rows.first() {
        let _ = writeln!(
            out,
            "\nIn percent of {} auxiliary subjects. Random baseline for N1N: {:.3}% (1 of {} released subjects).",
            r.n_queries,
            r.random_baseline * 100.0,
            r.n_gallery
        );
    }
    out
}

/// Privacy table: flipped training copies, then the synthetic set.
pub fn render_dcr_table(rows: &[DcrRow]) -> String {
    let mut columns: Vec<&DcrRow> = rows.iter().filter(|r| r.flip_rate.is_some()).collect();
    columns.sort_by(|a, b| a.flip_rate.partial_cmp(&b.flip_rate).unwrap());
    let synth = rows.iter().find(|r| r.series == SeriesKind::Synthetic.label());
    columns.extend(synth);

    let header = |r: &DcrRow| match r.flip_rate {
        Some(f) => format!("Flip {}", percent_label(f)),
        None => "synt.".into(),
    };
    let mut out = String::from("| |");
    for r in &columns {
        let _ = write!(out, " {} |", header(r));
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(columns.len()));
    out.push('\n');
    let lines: [(&str, fn(&DcrRow) -> String); 3] = [
        ("Closer to train", |r| percent(r.dcr_share)),
        ("Mean dist. train", |r| format!("{:.3}", r.mean_dist_to_train)),
        ("Mean dist. holdout", |r| format!("{:.3}", r.mean_dist_to_holdout)),
    ];
    for (name, cell) in lines {
        let _ = write!(out, "| {name} |");
        for r in &columns {
            let _ = write!(out, " {} |", cell(r));
        }
        out.push('\n');
    }
    if let Some(h) = rows.iter().find(|r| r.series == SeriesKind::HoldoutControl.label()) {
        let _ = writeln!(
            out,
            "\nHoldout control (holdout subjects against train vs. other holdout subjects): {}% closer to train.",
            percent(h.dcr_share)
        );
    }
    out
}

pub fn report_render(bundle: &ReportBundle) -> String {
    let mut out = String::from("# Re-identification and privacy report\n\n## Re-identification\n\n");
    out.push_str(&render_reid_table(&bundle.reid));
    out.push_str("\n## Distance to closest record\n\n");
    out.push_str(&render_dcr_table(&bundle.dcr));
    if let Some(last) = bundle.train_log.last() {
        let _ = writeln!(
            out,
            "\n## Training\n\n{} epochs, final mean loss {:.4}.",
            last.epoch, last.mean_loss
        );
    }
    if let Some(hash) = bundle.manifest.get("config_hash").and_then(|v| v.as_str()) {
        let _ = writeln!(out, "\nConfig hash: `{hash}`");
    }
    out
}
