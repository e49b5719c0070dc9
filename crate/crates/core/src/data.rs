//! Interaction logs, per-user sequences, leave-one-out splits and cloze
//! batches.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PAD;

/// Largest tolerated share of malformed input lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// `user::item::rating::timestamp`, no header.
    DoubleColon,
    /// Header `userId,movieId,rating,timestamp` or `user,item,rating,timestamp`.
    Csv,
}

impl InputFormat {
    /// Guess from the file extension: `.csv` is CSV, everything else
    /// double-colon.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::DoubleColon,
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputFormat::DoubleColon => "double_colon",
            InputFormat::Csv => "csv",
        })
    }
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double_colon" | "dat" => Ok(InputFormat::DoubleColon),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::config(format!(
                "unknown input format `{other}` (expected double_colon or csv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, Default)]
pub struct InteractionLog {
    /// Records in file order, duplicates removed.
    pub records: Vec<Interaction>,
    /// 1-based line numbers that could not be parsed.
    pub malformed_lines: Vec<usize>,
    pub duplicates_removed: usize,
}

impl InteractionLog {
    pub fn num_users(&self) -> usize {
        self.records.iter().map(|r| &r.user).collect::<HashSet<_>>().len()
    }

    pub fn num_items(&self) -> usize {
        self.records.iter().map(|r| &r.item).collect::<HashSet<_>>().len()
    }

    fn push(&mut self, rec: Interaction, seen: &mut HashSet<(String, String, i64)>) {
        if seen.insert((rec.user.clone(), rec.item.clone(), rec.timestamp)) {
            self.records.push(rec);
        } else {
            self.duplicates_removed += 1;
        }
    }

    fn finish(self, lines: usize) -> Result<Self> {
        let bad = self.malformed_lines.len();
        if lines > 0 && bad as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
            let first: Vec<String> = self.malformed_lines.iter().take(5).map(|l| l.to_string()).collect();
            return Err(Error::Data(format!(
                "{bad} of {lines} lines are malformed (first at lines {})",
                first.join(", ")
            )));
        }
        for line in &self.malformed_lines {
            log::warn!("skipping malformed line {line}");
        }
        Ok(self)
    }
}

pub fn ingest(path: impl AsRef<Path>, format: InputFormat) -> Result<InteractionLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse(BufReader::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse(reader: impl Read, format: InputFormat) -> Result<InteractionLog> {
    match format {
        InputFormat::DoubleColon => parse_double_colon(reader),
        InputFormat::Csv => parse_csv(reader),
    }
}

fn parse_double_colon(reader: impl Read) -> Result<InteractionLog> {
    let mut log = InteractionLog::default();
    let mut seen = HashSet::new();
    let mut lines = 0;
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let fields: Vec<&str> = line.trim().split("::").collect();
        match fields.as_slice() {
            [u, it, r, t] => match parse_record(u, it, r, t) {
                Some(rec) => log.push(rec, &mut seen),
                None => log.malformed_lines.push(i + 1),
            },
            _ => log.malformed_lines.push(i + 1),
        }
    }
    log.finish(lines)
}

fn parse_csv(reader: impl Read) -> Result<InteractionLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("unreadable CSV header: {e}")))?
        .clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h));
    let (Some(ucol), Some(icol), Some(rcol), Some(tcol)) = (
        col(&["userId", "user"]),
        col(&["movieId", "item"]),
        col(&["rating"]),
        col(&["timestamp"]),
    ) else {
        return Err(Error::Data(format!(
            "CSV header must name userId/user, movieId/item, rating and timestamp; found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    };
    let mut log = InteractionLog::default();
    let mut seen = HashSet::new();
    let mut lines = 0;
    for (i, rec) in rdr.records().enumerate() {
        lines += 1;
        // the header occupies line 1
        let line = rec
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map_or(i + 2, |p| p.line() as usize);
        let parsed = rec
            .ok()
            .filter(|r| r.len() == headers.len())
            .and_then(|r| parse_record(&r[ucol], &r[icol], &r[rcol], &r[tcol]));
        match parsed {
            Some(rec) => log.push(rec, &mut seen),
            None => log.malformed_lines.push(line),
        }
    }
    log.finish(lines)
}

fn parse_record(user: &str, item: &str, rating: &str, ts: &str) -> Option<Interaction> {
    let (user, item) = (user.trim(), item.trim());
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let rating: f64 = rating.trim().parse().ok().filter(|r: &f64| r.is_finite())?;
    let timestamp = ts
        .trim()
        .parse::<i64>()
        .ok()
        .or_else(|| ts.trim().parse::<f64>().ok().filter(|t| t.is_finite() && t.fract() == 0.0).map(|t| t as i64))?;
    Some(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    })
}

/// Dense item tokens `1..=len()`; token 0 is PAD and `len() + 1` is MASK.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Assigns the next token to `raw` if unseen.
    pub fn insert(&mut self, raw: &str) -> usize {
        if let Some(&t) = self.index.get(raw) {
            return t;
        }
        self.raw.push(raw.to_string());
        let token = self.raw.len();
        self.index.insert(raw.to_string(), token);
        token
    }

    pub fn token(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, token: usize) -> Option<&str> {
        token.checked_sub(1).and_then(|i| self.raw.get(i)).map(String::as_str)
    }

    /// Number of real items.
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Items + PAD + MASK.
    pub fn vocab_size(&self) -> usize {
        self.raw.len() + 2
    }

    pub fn mask_token(&self) -> usize {
        self.raw.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemSequence {
    pub user: String,
    pub items: Vec<usize>,
}

/// Per-user chronological sequences with short users dropped. Users keep
/// their first-seen order; equal timestamps keep file order; items are
/// tokenized in first-seen order over the resulting sequences.
pub fn build_sequences(log: &InteractionLog, min_len: usize) -> Result<(Vec<ItemSequence>, Vocabulary)> {
    if min_len < 3 {
        return Err(Error::config(format!(
            "min_len ({min_len}) must be at least 3 (train, validation and test item)"
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for rec in &log.records {
        by_user
            .entry(&rec.user)
            .or_insert_with(|| {
                order.push(&rec.user);
                Vec::new()
            })
            .push(rec);
    }
    let raw: Vec<(String, Vec<String>)> = order
        .into_iter()
        .filter_map(|u| {
            let mut recs = by_user.remove(u)?;
            if recs.len() < min_len {
                return None;
            }
            recs.sort_by_key(|r| r.timestamp);
            Some((u.to_string(), recs.iter().map(|r| r.item.clone()).collect()))
        })
        .collect();
    tokenize(raw)
}

fn tokenize(raw: Vec<(String, Vec<String>)>) -> Result<(Vec<ItemSequence>, Vocabulary)> {
    if raw.is_empty() {
        return Err(Error::Data("no user has enough interactions".into()));
    }
    let mut vocab = Vocabulary::default();
    let seqs = raw
        .into_iter()
        .map(|(user, items)| ItemSequence {
            user,
            items: items.iter().map(|i| vocab.insert(i)).collect(),
        })
        .collect();
    Ok((seqs, vocab))
}

/// Summary counts in the shape of a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn of(sequences: &[ItemSequence], vocab: &Vocabulary) -> Self {
        let users = sequences.len();
        let items = vocab.len();
        let interactions: usize = sequences.iter().map(|s| s.items.len()).sum();
        let cells = (users * items) as f64;
        Self {
            users,
            items,
            interactions,
            avg_length: if users == 0 { 0.0 } else { interactions as f64 / users as f64 },
            sparsity: if cells == 0.0 { 0.0 } else { 1.0 - interactions as f64 / cells },
        }
    }
}

/// Writes `user<TAB>item1,item2,…` lines with raw item ids.
pub fn write_cache(path: impl AsRef<Path>, sequences: &[ItemSequence], vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_cache_to(&mut w, sequences, vocab)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_cache_to(w: &mut impl Write, sequences: &[ItemSequence], vocab: &Vocabulary) -> std::io::Result<()> {
    for s in sequences {
        let items: Vec<&str> = s.items.iter().map(|&t| vocab.raw(t).unwrap_or("?")).collect();
        writeln!(w, "{}\t{}", s.user, items.join(","))?;
    }
    Ok(())
}

/// Reads a sequence cache, skipping `#` comment lines; tokens are reassigned in first-seen order, which
/// reproduces the vocabulary the cache was written from.
pub fn read_cache(path: impl AsRef<Path>) -> Result<(Vec<ItemSequence>, Vocabulary)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((user, items)) = line.split_once('\t') else {
            return Err(Error::Data(format!("{}:{}: expected user<TAB>items", path.display(), i + 1)));
        };
        let items: Vec<String> = items.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        raw.push((user.to_string(), items));
    }
    tokenize(raw)
}

/// A held-out target with the items that precede it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user: String,
    pub prefix: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

/// Last item → test, second to last → validation, the rest → training.
pub fn split_leave_one_out(sequences: &[ItemSequence]) -> Result<Split> {
    let mut split = Split {
        train: Vec::with_capacity(sequences.len()),
        valid: Vec::with_capacity(sequences.len()),
        test: Vec::with_capacity(sequences.len()),
    };
    for s in sequences {
        let n = s.items.len();
        if n < 3 {
            return Err(Error::Data(format!("user {} has only {n} items", s.user)));
        }
        split.train.push(s.items[..n - 2].to_vec());
        split.valid.push(EvalCase {
            user: s.user.clone(),
            prefix: s.items[..n - 2].to_vec(),
            target: s.items[n - 2],
        });
        split.test.push(EvalCase {
            user: s.user.clone(),
            prefix: s.items[..n - 1].to_vec(),
            target: s.items[n - 1],
        });
    }
    Ok(split)
}

/// A seeded subset holding `fraction` of the cases (at least one), in their
/// original order.
pub fn subsample(cases: &[EvalCase], fraction: f64, seed: u64) -> Vec<EvalCase> {
    if fraction >= 1.0 || cases.is_empty() {
        return cases.to_vec();
    }
    let keep = ((cases.len() as f64 * fraction).round() as usize).clamp(1, cases.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cases.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cases[i].clone()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClozeConfig {
    pub max_len: usize,
    pub mask_prob: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ClozeConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            v.push(format!("mask_prob ({}) must lie in (0, 1)", self.mask_prob));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.max_len == 0 {
            v.push("max_len must be positive".into());
        }
        v
    }
}

/// Left-padded, partially masked token rows. `labels[i]` is the original
/// token at a masked position and 0 elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeBatch {
    pub tokens: Vec<usize>,
    pub valid: Vec<bool>,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub len: usize,
}

impl ClozeBatch {
    /// Flat positions holding a target.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != PAD).collect()
    }

    /// Targets at [`positions`](Self::positions), in the same order.
    pub fn targets(&self) -> Vec<usize> {
        self.labels.iter().copied().filter(|&l| l != PAD).collect()
    }
}

/// `items` truncated to its most recent `len` entries and left-padded.
pub fn left_pad(items: &[usize], len: usize) -> Vec<usize> {
    let keep = &items[items.len().saturating_sub(len)..];
    let mut row = vec![PAD; len - keep.len()];
    row.extend_from_slice(keep);
    row
}

/// One epoch of shuffled cloze batches, deterministic in `(seed, epoch)`.
/// Empty sequences are skipped.
pub fn cloze_batches(train: &[Vec<usize>], mask_token: usize, cfg: &ClozeConfig, epoch: u64) -> Result<Vec<ClozeBatch>> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..train.len()).filter(|&i| !train[i].is_empty()).collect();
    order.shuffle(&mut rng);
    let n = cfg.max_len;
    let mut out = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
    for chunk in order.chunks(cfg.batch_size) {
        let mut batch = ClozeBatch {
            tokens: Vec::with_capacity(chunk.len() * n),
            valid: Vec::with_capacity(chunk.len() * n),
            labels: vec![PAD; chunk.len() * n],
            rows: chunk.len(),
            len: n,
        };
        for (r, &i) in chunk.iter().enumerate() {
            let mut row = left_pad(&train[i], n);
            let base = r * n;
            let mut any = false;
            for (c, tok) in row.iter_mut().enumerate() {
                if *tok != PAD && rng.gen::<f64>() < cfg.mask_prob {
                    batch.labels[base + c] = *tok;
                    *tok = mask_token;
                    any = true;
                }
            }
            if !any {
                batch.labels[base + n - 1] = row[n - 1];
                row[n - 1] = mask_token;
            }
            batch.valid.extend(row.iter().map(|&t| t != PAD));
            batch.tokens.extend(row);
        }
        out.push(batch);
    }
    Ok(out)
}
