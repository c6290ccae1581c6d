use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use super::matrix::InteractionMatrix;
use crate::error::{Error, Result};

/// One raw rating row before binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingRecord {
    pub user_key: String,
    pub item_key: String,
    pub rating: f64,
    pub timestamp: Option<u64>,
}

/// Dense index assignment for user and item keys, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdVocabulary {
    users: IndexSet<String>,
    items: IndexSet<String>,
}

impl IdVocabulary {
    pub fn from_keys(
        users: impl IntoIterator<Item = String>,
        items: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let mut vocab = IdVocabulary::default();
        for u in users {
            if !vocab.users.insert(u) {
                return Err(Error::invalid("duplicate user key in vocabulary"));
            }
        }
        for i in items {
            if !vocab.items.insert(i) {
                return Err(Error::invalid("duplicate item key in vocabulary"));
            }
        }
        Ok(vocab)
    }

    pub fn from_records(records: &[RatingRecord]) -> Self {
        let mut vocab = IdVocabulary::default();
        for r in records {
            vocab.users.insert(r.user_key.clone());
            vocab.items.insert(r.item_key.clone());
        }
        vocab
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, key: &str) -> Option<usize> {
        self.users.get_index_of(key)
    }

    pub fn item_index(&self, key: &str) -> Option<usize> {
        self.items.get_index_of(key)
    }

    pub fn user_key(&self, index: usize) -> Option<&str> {
        self.users.get_index(index).map(String::as_str)
    }

    pub fn item_key(&self, index: usize) -> Option<&str> {
        self.items.get_index(index).map(String::as_str)
    }

    pub fn user_keys(&self) -> impl Iterator<Item = &str> {
        self.users.iter().map(String::as_str)
    }

    pub fn item_keys(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }

    /// Keeps only the flagged users and items, preserving their relative order.
    pub fn restrict(&self, keep_users: &[bool], keep_items: &[bool]) -> Self {
        let users = self
            .users
            .iter()
            .zip(keep_users)
            .filter(|(_, &k)| k)
            .map(|(u, _)| u.clone())
            .collect();
        let items = self
            .items
            .iter()
            .zip(keep_items)
            .filter(|(_, &k)| k)
            .map(|(i, _)| i.clone())
            .collect();
        IdVocabulary { users, items }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    /// Tab if the first data line contains one, comma otherwise.
    #[default]
    Auto,
    Comma,
    Tab,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeaderMode {
    /// The first line is a header when its rating field is not numeric.
    #[default]
    Auto,
    Present,
    Absent,
}

/// Column positions (zero based) of a delimited rating file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnLayout {
    pub delimiter: Delimiter,
    pub header: HeaderMode,
    pub user: usize,
    pub item: usize,
    pub rating: usize,
    pub timestamp: Option<usize>,
}

impl Default for ColumnLayout {
    fn default() -> Self {
        ColumnLayout {
            delimiter: Delimiter::Auto,
            header: HeaderMode::Auto,
            user: 0,
            item: 1,
            rating: 2,
            timestamp: Some(3),
        }
    }
}

/// Reads a delimited rating file.
pub fn load_ratings(path: &Path, layout: &ColumnLayout) -> Result<(Vec<RatingRecord>, IdVocabulary)> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = String::new();
    BufReader::new(File::open(path).map_err(io_err)?)
        .read_to_string(&mut text)
        .map_err(io_err)?;
    parse_ratings(&text, layout)
}

/// Parses rating rows from in-memory text; see [`load_ratings`].
pub fn parse_ratings(text: &str, layout: &ColumnLayout) -> Result<(Vec<RatingRecord>, IdVocabulary)> {
    let first_line = text.lines().find(|l| !l.trim().is_empty());
    let delimiter = match layout.delimiter {
        Delimiter::Comma => b',',
        Delimiter::Tab => b'\t',
        Delimiter::Auto => match first_line {
            Some(l) if l.contains('\t') => b'\t',
            _ => b',',
        },
    };

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut records = Vec::new();
    let mut first = true;
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if first {
            first = false;
            let skip = match layout.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Auto => row
                    .get(layout.rating)
                    .is_some_and(|f| f.parse::<f64>().is_err()),
            };
            if skip {
                continue;
            }
        }
        records.push(parse_row(&row, line, layout)?);
    }
    let vocab = IdVocabulary::from_records(&records);
    Ok((records, vocab))
}

fn parse_row(row: &csv::StringRecord, line: u64, layout: &ColumnLayout) -> Result<RatingRecord> {
    let field = |col: usize, name: &str| {
        row.get(col).ok_or_else(|| Error::Parse {
            line,
            message: format!("missing {name} column {col}"),
        })
    };
    let user_key = field(layout.user, "user")?.to_string();
    let item_key = field(layout.item, "item")?.to_string();
    if user_key.is_empty() || item_key.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty user or item key".into(),
        });
    }
    let raw = field(layout.rating, "rating")?;
    let rating: f64 = raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("non-numeric rating {raw:?}"),
    })?;
    if !rating.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("rating {raw:?} is not finite"),
        });
    }
    let timestamp = match layout.timestamp.and_then(|c| row.get(c)) {
        None | Some("") => None,
        Some(raw) => Some(raw.parse::<u64>().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp {raw:?} is not a nonnegative integer"),
        })?),
    };
    Ok(RatingRecord {
        user_key,
        item_key,
        rating,
        timestamp,
    })
}

/// The surviving rating for one `(user, item)` pair after duplicate collapse.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LatestRating {
    pub rating: f64,
    pub timestamp: Option<u64>,
}

/// Collapses duplicate `(user, item)` records: the latest timestamp wins, and
/// among equal (or absent) timestamps the later record in input order wins.
/// Records whose keys are missing from `vocab` are ignored.
pub(crate) fn collapse_duplicates(
    records: &[RatingRecord],
    vocab: &IdVocabulary,
) -> HashMap<(u32, u32), LatestRating> {
    let mut latest: HashMap<(u32, u32), LatestRating> = HashMap::with_capacity(records.len());
    for r in records {
        let (Some(u), Some(i)) = (vocab.user_index(&r.user_key), vocab.item_index(&r.item_key))
        else {
            continue;
        };
        let candidate = LatestRating {
            rating: r.rating,
            timestamp: r.timestamp,
        };
        latest
            .entry((u as u32, i as u32))
            .and_modify(|cur| {
                if candidate.timestamp >= cur.timestamp {
                    *cur = candidate;
                }
            })
            .or_insert(candidate);
    }
    latest
}

/// Keeps the `(user, item)` pairs whose collapsed rating is at least `eta`.
pub fn binarize(records: &[RatingRecord], vocab: &IdVocabulary, eta: f64) -> Result<InteractionMatrix> {
    if !eta.is_finite() {
        return Err(Error::invalid("binarization threshold must be finite"));
    }
    let mut rows = vec![Vec::new(); vocab.n_users()];
    for (&(u, i), latest) in &collapse_duplicates(records, vocab) {
        if latest.rating >= eta {
            rows[u as usize].push(i);
        }
    }
    InteractionMatrix::from_rows(vocab.n_items(), rows)
}

/// Drops users and items left without any interaction and re-indexes the rest.
pub fn compact(
    records: &[RatingRecord],
    vocab: &IdVocabulary,
    eta: f64,
) -> Result<(IdVocabulary, InteractionMatrix)> {
    let matrix = binarize(records, vocab, eta)?;
    let keep_users: Vec<bool> = (0..matrix.n_users()).map(|u| matrix.row_len(u) > 0).collect();
    let keep_items: Vec<bool> = matrix.column_counts().iter().map(|&c| c > 0).collect();
    let vocab = vocab.restrict(&keep_users, &keep_items);
    let matrix = binarize(records, &vocab, eta)?;
    Ok((vocab, matrix))
}
