//! Raw CTR logs to dense feature ids.
//!
//! Pipeline: read a delimited file, turn every column into a string token
//! (numeric columns are discretized, timestamps expanded), count tokens per
//! field over the whole file, collapse rare tokens into a per-field OOV id,
//! then encode every sample as one id per field.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"LPQD";
pub const DATASET_VERSION: u32 = 1;
pub const MISSING_TOKEN: &str = "__missing__";
pub const OOV_TOKEN: &str = "__oov__";
/// Fraction of malformed rows above which ingestion aborts.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no samples")]
    Empty,
    #[error("threshold must be at least 1")]
    Threshold,
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("{malformed} of {total} rows malformed, above the {limit} limit")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        limit: f64,
    },
    #[error("bad timestamp {0:?}, expected YYMMDDHH")]
    Timestamp(String),
    #[error("need at least 10 samples to split, got {0}")]
    TooFewToSplit(usize),
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error("invalid generator parameter {name} = {value}")]
    Parameter { name: &'static str, value: f64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reading of `log^2(x)` used when discretizing numeric values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    /// `floor((ln x)^2)`
    #[default]
    Ln,
    /// `floor((log2 x)^2)`
    Log2,
}

/// `floor(log(x)^2)` for `x > 2`, `1` otherwise; `None` for negative or NaN
/// input, which is treated as missing.
pub fn discretize_numeric(x: f64, base: LogBase) -> Option<i64> {
    if x.is_nan() || x < 0.0 {
        return None;
    }
    if x <= 2.0 {
        return Some(1);
    }
    let l = match base {
        LogBase::Ln => x.ln(),
        LogBase::Log2 => x.log2(),
    };
    Some((l * l).floor() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeParts {
    pub hour: u32,
    /// 0 = Monday .. 6 = Sunday
    pub weekday: u32,
    pub is_weekend: bool,
}

/// Split a `YYMMDDHH` stamp (years 2000-2099) into hour, weekday and weekend
/// flag.
pub fn expand_timestamp(stamp: &str) -> Result<TimeParts, DataError> {
    let bad = || DataError::Timestamp(stamp.to_string());
    if stamp.len() != 8 || !stamp.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let num = |r: std::ops::Range<usize>| stamp[r].parse::<u32>().map_err(|_| bad());
    let (yy, mm, dd, hh) = (num(0..2)?, num(2..4)?, num(4..6)?, num(6..8)?);
    if hh > 23 {
        return Err(bad());
    }
    let date = NaiveDate::from_ymd_opt(2000 + yy as i32, mm, dd).ok_or_else(bad)?;
    let wd = date.weekday();
    Ok(TimeParts {
        hour: hh,
        weekday: wd.num_days_from_monday(),
        is_weekend: matches!(wd, Weekday::Sat | Weekday::Sun),
    })
}

/// Column roles for a headered delimited file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSchema {
    pub delimiter: u8,
    pub label: String,
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
    /// Expanded into `<name>_hour`, `<name>_weekday`, `<name>_weekend`.
    pub timestamp: Option<String>,
    #[serde(default)]
    pub log_base: LogBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Tab-separated; `label`, numeric `I*` columns, categorical `C*` columns.
    Criteo,
    /// Comma-separated; `click` label, `hour` timestamp, `id` dropped, the
    /// rest categorical.
    Avazu,
    /// Comma-separated; `label` column, every other column categorical.
    Generic,
}

impl DatasetKind {
    pub fn default_threshold(self) -> u64 {
        match self {
            DatasetKind::Criteo => 10,
            DatasetKind::Avazu => 2,
            DatasetKind::Generic => 1,
        }
    }

    pub fn delimiter(self) -> u8 {
        match self {
            DatasetKind::Criteo => b'\t',
            _ => b',',
        }
    }

    /// Derive column roles from a header row.
    pub fn schema(self, header: &[String]) -> Result<InputSchema, DataError> {
        let label = match self {
            DatasetKind::Avazu => "click",
            _ => "label",
        };
        if !header.iter().any(|h| h == label) {
            return Err(DataError::MissingColumn(label.to_string()));
        }
        let mut numeric = Vec::new();
        let mut categorical = Vec::new();
        let mut timestamp = None;
        for h in header.iter().filter(|h| *h != label) {
            match self {
                DatasetKind::Criteo if h.starts_with('I') => numeric.push(h.clone()),
                DatasetKind::Avazu if h == "id" => {}
                DatasetKind::Avazu if h == "hour" => timestamp = Some(h.clone()),
                _ => categorical.push(h.clone()),
            }
        }
        Ok(InputSchema {
            delimiter: self.delimiter(),
            label: label.to_string(),
            numeric,
            categorical,
            timestamp,
            log_base: LogBase::Ln,
        })
    }
}

/// Tokenized samples before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenTable {
    pub fields: Vec<String>,
    pub labels: Vec<bool>,
    /// Row-major `samples x fields`.
    pub tokens: Vec<String>,
}

impl TokenTable {
    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[String] {
        let f = self.fields.len();
        &self.tokens[i * f..(i + 1) * f]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: usize,
    pub malformed: usize,
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim() {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

/// Read a headered delimited file into tokens.
///
/// Rows with the wrong column count, a non-binary label or a bad timestamp
/// are skipped and counted; more than 1% of such rows aborts.
pub fn read_delimited<R: Read>(
    reader: R,
    kind: DatasetKind,
) -> Result<(TokenTable, InputSchema, IngestStats), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(kind.delimiter())
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let schema = kind.schema(&header)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let label_col = col(&schema.label)?;
    let numeric_cols = schema.numeric.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;
    let cat_cols = schema.categorical.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;
    let ts_col = schema.timestamp.as_deref().map(col).transpose()?;

    let mut table = TokenTable {
        fields: schema.numeric.iter().chain(&schema.categorical).cloned().collect(),
        ..Default::default()
    };
    if let Some(ts) = &schema.timestamp {
        for suffix in ["hour", "weekday", "weekend"] {
            table.fields.push(format!("{ts}_{suffix}"));
        }
    }

    let mut stats = IngestStats::default();
    let mut row_tokens = Vec::with_capacity(table.fields.len());
    for rec in rdr.records() {
        let rec = rec?;
        stats.rows += 1;
        row_tokens.clear();
        let ok = (|| {
            if rec.len() != header.len() {
                return None;
            }
            let label = parse_label(&rec[label_col])?;
            for &c in &numeric_cols {
                let raw = rec[c].trim();
                let tok = raw
                    .parse::<f64>()
                    .ok()
                    .and_then(|x| discretize_numeric(x, schema.log_base))
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| MISSING_TOKEN.to_string());
                row_tokens.push(tok);
            }
            for &c in &cat_cols {
                let raw = rec[c].trim();
                row_tokens.push(if raw.is_empty() { MISSING_TOKEN.to_string() } else { raw.to_string() });
            }
            if let Some(c) = ts_col {
                let p = expand_timestamp(rec[c].trim()).ok()?;
                row_tokens.push(p.hour.to_string());
                row_tokens.push(p.weekday.to_string());
                row_tokens.push(u8::from(p.is_weekend).to_string());
            }
            Some(label)
        })();
        match ok {
            Some(label) => {
                table.labels.push(label);
                table.tokens.append(&mut row_tokens);
            }
            None => stats.malformed += 1,
        }
    }
    if stats.rows > 0 && stats.malformed as f64 > MAX_MALFORMED_FRACTION * stats.rows as f64 {
        return Err(DataError::TooManyMalformed {
            malformed: stats.malformed,
            total: stats.rows,
            limit: MAX_MALFORMED_FRACTION,
        });
    }
    if table.labels.is_empty() {
        return Err(DataError::Empty);
    }
    Ok((table, schema, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldVocab {
    pub name: String,
    pub oov_id: u32,
    /// Kept tokens in first-occurrence order with their ids and counts.
    pub tokens: Vec<(String, u32, u64)>,
    /// Distinct tokens collapsed into the OOV id.
    pub collapsed_tokens: u64,
    /// Occurrences of collapsed tokens.
    pub collapsed_occurrences: u64,
}

/// Per-field token to id maps; ids are dense over all fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    pub threshold: u64,
    pub size: u32,
    pub fields: Vec<FieldVocab>,
    #[serde(skip)]
    lookup: Vec<HashMap<String, u32>>,
}

impl FeatureVocabulary {
    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .fields
            .iter()
            .map(|f| f.tokens.iter().map(|(t, id, _)| (t.clone(), *id)).collect())
            .collect();
    }

    /// Restore the lookup maps after deserializing.
    pub fn reindexed(mut self) -> Self {
        self.rebuild_lookup();
        self
    }

    pub fn id(&self, field: usize, token: &str) -> u32 {
        self.lookup[field].get(token).copied().unwrap_or(self.fields[field].oov_id)
    }

    pub fn total_collapsed(&self) -> u64 {
        self.fields.iter().map(|f| f.collapsed_tokens).sum()
    }
}

/// Count tokens per field and assign ids. Each field gets its OOV id first,
/// then one id per token seen at least `threshold` times, in first-occurrence
/// order.
pub fn build_vocab(table: &TokenTable, threshold: u64) -> Result<FeatureVocabulary, DataError> {
    if threshold < 1 {
        return Err(DataError::Threshold);
    }
    if table.samples() == 0 {
        return Err(DataError::Empty);
    }
    let nf = table.fields.len();
    let mut next = 0u32;
    let mut fields = Vec::with_capacity(nf);
    for f in 0..nf {
        let mut order: Vec<&str> = Vec::new();
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for i in 0..table.samples() {
            let tok = table.tokens[i * nf + f].as_str();
            let c = counts.entry(tok).or_insert_with(|| {
                order.push(tok);
                0
            });
            *c += 1;
        }
        let oov_id = next;
        next += 1;
        let mut fv = FieldVocab {
            name: table.fields[f].clone(),
            oov_id,
            tokens: Vec::new(),
            collapsed_tokens: 0,
            collapsed_occurrences: 0,
        };
        for tok in order {
            let c = counts[tok];
            if c < threshold {
                fv.collapsed_tokens += 1;
                fv.collapsed_occurrences += c;
            } else {
                fv.tokens.push((tok.to_string(), next, c));
                next += 1;
            }
        }
        fields.push(fv);
    }
    let mut v = FeatureVocabulary {
        threshold,
        size: next,
        fields,
        lookup: Vec::new(),
    };
    v.rebuild_lookup();
    Ok(v)
}

/// Samples as one feature id per field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDataset {
    pub fields: usize,
    /// Number of distinct ids, i.e. embedding rows.
    pub vocab_size: u32,
    pub labels: Vec<bool>,
    /// Row-major `samples x fields`.
    pub ids: Vec<u32>,
}

impl EncodedDataset {
    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.fields..(i + 1) * self.fields]
    }

    /// Gather the given samples into flat id and label vectors.
    pub fn select(&self, idx: &[usize]) -> (Vec<u32>, Vec<bool>) {
        let mut ids = Vec::with_capacity(idx.len() * self.fields);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            ids.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        (ids, labels)
    }

    /// Header `{magic, version u32, samples u64, fields u32}`, then per sample
    /// a label byte and `fields` little-endian u32 ids.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.samples() as u64).to_le_bytes())?;
        w.write_all(&(self.fields as u32).to_le_bytes())?;
        for i in 0..self.samples() {
            w.write_all(&[u8::from(self.labels[i])])?;
            for &id in self.row(i) {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read an encoded file. The file does not carry the vocabulary size, so
    /// it is taken from `vocab_size` when known and otherwise inferred as
    /// the largest id plus one.
    pub fn read<R: Read>(mut r: R, vocab_size: Option<u32>) -> Result<Self, DataError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let fmt = |m: &str| DataError::Format(m.to_string());
        if buf.len() < 20 || &buf[..4] != DATASET_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        let rec = 1 + 4 * f;
        if f == 0 || buf.len() != 20 + n.checked_mul(rec).ok_or_else(|| fmt("size overflow"))? {
            return Err(fmt("length does not match header"));
        }
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n * f);
        for i in 0..n {
            let base = 20 + i * rec;
            labels.push(match buf[base] {
                0 => false,
                1 => true,
                b => return Err(fmt(&format!("label byte {b}"))),
            });
            for k in 0..f {
                let o = base + 1 + 4 * k;
                ids.push(u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()));
            }
        }
        let max_id = ids.iter().copied().max().unwrap_or(0);
        let vocab_size = match vocab_size {
            Some(v) if v > max_id => v,
            Some(v) => return Err(fmt(&format!("id {max_id} outside vocabulary of {v}"))),
            None => max_id + 1,
        };
        Ok(Self {
            fields: f,
            vocab_size,
            labels,
            ids,
        })
    }
}

pub fn encode(table: &TokenTable, vocab: &FeatureVocabulary) -> EncodedDataset {
    let nf = table.fields.len();
    let ids = table
        .tokens
        .iter()
        .enumerate()
        .map(|(j, tok)| vocab.id(j % nf, tok))
        .collect();
    EncodedDataset {
        fields: nf,
        vocab_size: vocab.size,
        labels: table.labels.clone(),
        ids,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then 80/10/10 slices. Validation and test each get
/// `round(n / 10)` samples; training gets the rest.
pub fn split(samples: usize, seed: u64) -> Result<DatasetSplit, DataError> {
    if samples < 10 {
        return Err(DataError::TooFewToSplit(samples));
    }
    let mut idx: Vec<usize> = (0..samples).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = (samples as f64 / 10.0).round() as usize;
    let test = idx.split_off(samples - tenth);
    let validation = idx.split_off(samples - 2 * tenth);
    Ok(DatasetSplit {
        seed,
        train: idx,
        validation,
        test,
    })
}
