//! Event-sequence panels: vocabulary, week sequences, file I/O, period and
//! train/holdout splitting, and the donor-replacement perturbation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Bijective mapping between domain strings and dense ids `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for token in tokens {
            let token = token.into();
            if vocab.id(&token).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{token}`")));
            }
            vocab.intern(&token);
        }
        Ok(vocab)
    }

    /// Returns the id of `token`, assigning the next dense id if unseen.
    pub fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as TokenId;
        self.token_to_id.insert(token.to_owned(), id);
        self.id_to_token.push(token.to_owned());
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }
}

/// One subject's events within one calendar week.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeekSequence {
    pub subject_id: String,
    pub week_index: u32,
    pub tokens: Vec<TokenId>,
}

/// Per-subject week sequences over a shared vocabulary, kept in canonical
/// `(subject, week)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    vocab: Arc<Vocab>,
    sequences: Vec<WeekSequence>,
    period_split: Option<u32>,
}

impl PanelDataset {
    pub fn new(vocab: Arc<Vocab>, mut sequences: Vec<WeekSequence>) -> Result<Self> {
        sequences.sort_by(|a, b| {
            a.subject_id
                .cmp(&b.subject_id)
                .then(a.week_index.cmp(&b.week_index))
        });
        for pair in sequences.windows(2) {
            if pair[0].subject_id == pair[1].subject_id && pair[0].week_index == pair[1].week_index
            {
                return Err(Error::Data(format!(
                    "duplicate week {} for subject `{}`",
                    pair[0].week_index, pair[0].subject_id
                )));
            }
        }
        for seq in &sequences {
            if seq.tokens.is_empty() {
                return Err(Error::Data(format!(
                    "empty week {} for subject `{}`",
                    seq.week_index, seq.subject_id
                )));
            }
            if let Some(&bad) = seq.tokens.iter().find(|&&t| t as usize >= vocab.len()) {
                return Err(Error::OutOfVocab {
                    id: bad,
                    vocab_size: vocab.len(),
                });
            }
        }
        Ok(Self {
            vocab,
            sequences,
            period_split: None,
        })
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn sequences(&self) -> &[WeekSequence] {
        &self.sequences
    }

    pub fn period_split(&self) -> Option<u32> {
        self.period_split
    }

    pub fn with_period_split(mut self, boundary: Option<u32>) -> Self {
        self.period_split = boundary;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.sequences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Distinct subject ids in canonical order.
    pub fn subjects(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for seq in &self.sequences {
            if out.last() != Some(&seq.subject_id.as_str()) {
                out.push(&seq.subject_id);
            }
        }
        out
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects().len()
    }

    /// Indices into [`sequences`](Self::sequences) grouped per subject, weeks ascending.
    pub fn by_subject(&self) -> Vec<(&str, Vec<usize>)> {
        let mut out: Vec<(&str, Vec<usize>)> = Vec::new();
        for (i, seq) in self.sequences.iter().enumerate() {
            match out.last_mut() {
                Some((id, idx)) if *id == seq.subject_id => idx.push(i),
                _ => out.push((&seq.subject_id, vec![i])),
            }
        }
        out
    }

    pub fn week_range(&self) -> Option<(u32, u32)> {
        let lo = self.sequences.iter().map(|s| s.week_index).min()?;
        let hi = self.sequences.iter().map(|s| s.week_index).max()?;
        Some((lo, hi))
    }

    fn derive(&self, sequences: Vec<WeekSequence>) -> Self {
        Self {
            vocab: Arc::clone(&self.vocab),
            sequences,
            period_split: self.period_split,
        }
    }

    /// Keeps only the listed subjects.
    pub fn retain_subjects(&self, keep: &BTreeSet<&str>) -> Self {
        let sequences = self
            .sequences
            .iter()
            .filter(|s| keep.contains(s.subject_id.as_str()))
            .cloned()
            .collect();
        self.derive(sequences)
    }

    /// Keeps weeks in `lo..=hi`.
    pub fn retain_weeks(&self, lo: u32, hi: u32) -> Self {
        let sequences = self
            .sequences
            .iter()
            .filter(|s| (lo..=hi).contains(&s.week_index))
            .cloned()
            .collect();
        self.derive(sequences)
    }

    /// Re-expresses every token against `vocab`. Events whose token is
    /// unknown to `vocab` are dropped, as are weeks left empty; the number of
    /// dropped events is returned.
    pub fn reindex(&self, vocab: Arc<Vocab>) -> (PanelDataset, usize) {
        let mut dropped = 0;
        let mut sequences = Vec::with_capacity(self.sequences.len());
        for seq in &self.sequences {
            let tokens: Vec<TokenId> = seq
                .tokens
                .iter()
                .filter_map(|&t| {
                    let mapped = self.vocab.token(t).and_then(|s| vocab.id(s));
                    if mapped.is_none() {
                        dropped += 1;
                    }
                    mapped
                })
                .collect();
            if !tokens.is_empty() {
                sequences.push(WeekSequence {
                    subject_id: seq.subject_id.clone(),
                    week_index: seq.week_index,
                    tokens,
                });
            }
        }
        let out = PanelDataset {
            vocab,
            sequences,
            period_split: self.period_split,
        };
        (out, dropped)
    }

    /// Random subset of `n` subjects (all of them if `n` exceeds the count).
    pub fn sample_subjects(&self, n: usize, seed: u64) -> Self {
        let mut subjects = self.subjects();
        if n >= subjects.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        subjects.shuffle(&mut rng);
        let keep: BTreeSet<&str> = subjects.into_iter().take(n).collect();
        self.retain_subjects(&keep)
    }
}

/// On-disk event log layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Jsonl,
    Csv,
}

impl EventFormat {
    /// `.csv` selects CSV; everything else is JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Jsonl,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonEvent {
    s: String,
    w: u32,
    p: u32,
    t: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvEvent {
    subject: String,
    week: u32,
    position: u32,
    token: String,
}

#[derive(Default)]
struct PanelBuilder {
    vocab: Vocab,
    weeks: BTreeMap<(String, u32), BTreeMap<u32, TokenId>>,
}

impl PanelBuilder {
    fn push(&mut self, path: &Path, line: u64, s: String, w: u32, p: u32, t: &str) -> Result<()> {
        let id = self.vocab.intern(t);
        let week = self.weeks.entry((s.clone(), w)).or_default();
        if week.insert(p, id).is_some() {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                reason: format!("duplicate event (subject `{s}`, week {w}, position {p})"),
            });
        }
        Ok(())
    }

    fn finish(self) -> Result<PanelDataset> {
        if self.weeks.is_empty() {
            return Err(Error::Data("no records".into()));
        }
        let sequences = self
            .weeks
            .into_iter()
            .map(|((subject_id, week_index), events)| WeekSequence {
                subject_id,
                week_index,
                tokens: events.into_values().collect(),
            })
            .collect();
        PanelDataset::new(Arc::new(self.vocab), sequences)
    }
}

/// Reads an event log. The vocabulary is assigned in first-seen order.
pub fn load_panel(path: &Path, format: EventFormat) -> Result<PanelDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut builder = PanelBuilder::default();
    match format {
        EventFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line_no = i as u64 + 1;
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: JsonEvent = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_owned(),
                    line: line_no,
                    reason: e.to_string(),
                })?;
                builder.push(path, line_no, ev.s, ev.w, ev.p, &ev.t)?;
            }
        }
        EventFormat::Csv => {
            let parse_err = |line: u64, e: csv::Error| Error::Parse {
                path: path.to_owned(),
                line,
                reason: e.to_string(),
            };
            let mut reader = csv::Reader::from_reader(file);
            let headers = reader.headers().map_err(|e| parse_err(1, e))?.clone();
            let mut record = csv::StringRecord::new();
            loop {
                match reader.read_record(&mut record) {
                    Ok(false) => break,
                    Ok(true) => {
                        let line_no = record.position().map_or(0, |p| p.line());
                        let ev: CsvEvent = record
                            .deserialize(Some(&headers))
                            .map_err(|e| parse_err(line_no, e))?;
                        builder.push(path, line_no, ev.subject, ev.week, ev.position, &ev.token)?;
                    }
                    Err(e) => {
                        let line_no = e.position().map_or(0, |p| p.line());
                        return Err(parse_err(line_no, e));
                    }
                }
            }
        }
    }
    builder.finish()
}

/// Writes events in canonical `(subject, week, position)` order, positions
/// renumbered from zero within each week.
pub fn write_panel<W: Write>(data: &PanelDataset, out: W, format: EventFormat) -> Result<()> {
    let vocab = data.vocab();
    match format {
        EventFormat::Jsonl => {
            let mut out = BufWriter::new(out);
            for seq in data.sequences() {
                for (p, &t) in seq.tokens.iter().enumerate() {
                    let ev = JsonEvent {
                        s: seq.subject_id.clone(),
                        w: seq.week_index,
                        p: p as u32,
                        t: vocab.token(t).unwrap_or_default().to_owned(),
                    };
                    serde_json::to_writer(&mut out, &ev)?;
                    out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
                }
            }
            out.flush().map_err(|e| Error::io("<writer>", e))?;
        }
        EventFormat::Csv => {
            let mut writer = csv::Writer::from_writer(out);
            for seq in data.sequences() {
                for (p, &t) in seq.tokens.iter().enumerate() {
                    writer.serialize(CsvEvent {
                        subject: seq.subject_id.clone(),
                        week: seq.week_index,
                        position: p as u32,
                        token: vocab.token(t).unwrap_or_default().to_owned(),
                    })?;
                }
            }
            writer.flush().map_err(|e| Error::io("<writer>", e))?;
        }
    }
    Ok(())
}

pub fn save_panel(data: &PanelDataset, path: &Path, format: EventFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel(data, file, format)
}

/// Result of [`split_periods`].
#[derive(Clone, Debug)]
pub struct PeriodSplit {
    /// Weeks before the boundary (P1, the released dataset).
    pub released: PanelDataset,
    /// Weeks at or after the boundary (P2, the auxiliary dataset).
    pub auxiliary: PanelDataset,
    /// Subjects with no auxiliary weeks.
    pub released_only: Vec<String>,
    /// Subjects with no released weeks; they cannot be ground-truthed.
    pub auxiliary_only: Vec<String>,
}

pub fn split_periods(data: &PanelDataset, boundary: u32) -> Result<PeriodSplit> {
    let (lo, hi) = data
        .week_range()
        .ok_or_else(|| Error::Data("no records".into()))?;
    if boundary <= lo || boundary > hi {
        return Err(Error::config(
            "boundary",
            format!("week {boundary} is not strictly inside the week range {lo}..={hi}"),
        ));
    }
    let (p1, p2): (Vec<_>, Vec<_>) = data
        .sequences()
        .iter()
        .cloned()
        .partition(|s| s.week_index < boundary);
    let released = data.derive(p1).with_period_split(Some(boundary));
    let auxiliary = data.derive(p2).with_period_split(Some(boundary));

    let p1_subjects: BTreeSet<&str> = released.subjects().into_iter().collect();
    let p2_subjects: BTreeSet<&str> = auxiliary.subjects().into_iter().collect();
    let released_only = p1_subjects
        .difference(&p2_subjects)
        .map(|s| s.to_string())
        .collect();
    let auxiliary_only = p2_subjects
        .difference(&p1_subjects)
        .map(|s| s.to_string())
        .collect();
    Ok(PeriodSplit {
        released,
        auxiliary,
        released_only,
        auxiliary_only,
    })
}

/// Inverse of [`split_periods`] for datasets sharing one vocabulary.
pub fn merge(a: &PanelDataset, b: &PanelDataset) -> Result<PanelDataset> {
    if a.vocab != b.vocab {
        return Err(Error::Data("cannot merge datasets with different vocabularies".into()));
    }
    let sequences = a.sequences.iter().chain(&b.sequences).cloned().collect();
    PanelDataset::new(Arc::clone(&a.vocab), sequences)
}

/// Subject-level partition into `(train, holdout)`.
pub fn split_train_holdout(
    data: &PanelDataset,
    fraction: f64,
    seed: u64,
) -> Result<(PanelDataset, PanelDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("fraction", format!("{fraction} is not in (0, 1)")));
    }
    let mut subjects = data.subjects();
    if subjects.len() < 2 {
        return Err(Error::Data("train/holdout split needs at least 2 subjects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let n_train = ((subjects.len() as f64 * fraction).round() as usize).clamp(1, subjects.len() - 1);
    let train: BTreeSet<&str> = subjects[..n_train].iter().copied().collect();
    let holdout: BTreeSet<&str> = subjects[n_train..].iter().copied().collect();
    Ok((data.retain_subjects(&train), data.retain_subjects(&holdout)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorScope {
    #[default]
    AnyOtherSubject,
}

/// Noise injection: each event is replaced with probability `flip_rate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub flip_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub donor_scope: DonorScope,
}

impl PerturbSpec {
    pub fn new(flip_rate: f64, seed: u64) -> Self {
        Self {
            flip_rate,
            seed,
            donor_scope: DonorScope::AnyOtherSubject,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(Error::config(
                "flip_rate",
                format!("{} is not in [0, 1]", self.flip_rate),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PerturbStats {
    pub events: usize,
    /// Events selected for replacement (the donor token may coincide with the original).
    pub replaced: usize,
}

pub fn perturb(data: &PanelDataset, spec: &PerturbSpec) -> Result<PanelDataset> {
    perturb_with_stats(data, spec).map(|(d, _)| d)
}

/// Replaces each event, independently with probability `flip_rate`, by an
/// event drawn uniformly from the pooled events of all other subjects.
pub fn perturb_with_stats(
    data: &PanelDataset,
    spec: &PerturbSpec,
) -> Result<(PanelDataset, PerturbStats)> {
    spec.validate()?;
    let events = data.n_events();
    if spec.flip_rate == 0.0 {
        return Ok((data.clone(), PerturbStats { events, replaced: 0 }));
    }

    // Pooled events tagged with the owning subject's ordinal.
    let groups = data.by_subject();
    let mut pool: Vec<(usize, TokenId)> = Vec::with_capacity(events);
    let mut owned = vec![0usize; groups.len()];
    for (ordinal, (_, idx)) in groups.iter().enumerate() {
        for &i in idx {
            for &t in &data.sequences[i].tokens {
                pool.push((ordinal, t));
                owned[ordinal] += 1;
            }
        }
    }
    if owned.iter().any(|&n| n == pool.len()) {
        return Err(Error::NoDonors);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sequences = data.sequences.clone();
    let mut replaced = 0;
    for (ordinal, (_, idx)) in groups.iter().enumerate() {
        for &i in idx {
            for token in sequences[i].tokens.iter_mut() {
                if rng.gen::<f64>() >= spec.flip_rate {
                    continue;
                }
                replaced += 1;
                // Rejection sampling is uniform over the other subjects' events.
                *token = loop {
                    let (owner, t) = pool[rng.gen_range(0..pool.len())];
                    if owner != ordinal {
                        break t;
                    }
                };
            }
        }
    }
    Ok((data.derive(sequences), PerturbStats { events, replaced }))
}
