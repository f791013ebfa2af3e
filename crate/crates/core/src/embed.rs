//! Embedding assets and weighted point clouds.
//!
//! Word vectors come from word2vec text files; image outputs arrive as
//! precomputed `n d` matrices. Both end up as [`WeightedPointCloud`]s.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding table has no entries")]
    EmptyTable,
    #[error("point cloud has no points")]
    EmptyCloud,
    #[error("every token is out of vocabulary")]
    AllTokensOov,
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> EmbedError {
    EmbedError::Parse {
        line,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<String, EmbedError> {
    fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Token → vector lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: IndexMap<String, Vec<f64>>,
    case_fold: bool,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` pairs. With `case_fold` the keys
    /// are lowercased; the first occurrence of a key wins.
    pub fn from_entries<I>(dim: usize, entries: I, case_fold: bool) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut map = IndexMap::new();
        for (i, (token, vector)) in entries.into_iter().enumerate() {
            if vector.len() != dim {
                return Err(parse_err(
                    i + 1,
                    format!("token {token:?} has {} components, expected {dim}", vector.len()),
                ));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(i + 1, format!("token {token:?} has a non-finite component")));
            }
            let key = if case_fold { token.to_lowercase() } else { token };
            map.entry(key).or_insert(vector);
        }
        if map.is_empty() || dim == 0 {
            return Err(EmbedError::EmptyTable);
        }
        Ok(Self {
            dim,
            entries: map,
            case_fold,
        })
    }

    /// Parses word2vec text format: an optional `<count> <dim>` header, then
    /// one `token v1 .. vd` row per line.
    pub fn parse(text: &str, case_fold: bool) -> Result<Self, EmbedError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .peekable();

        let mut declared_dim = None;
        if let Some(&(_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if fields.len() == 2 {
                if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    declared_dim = Some(d);
                    lines.next();
                }
            }
        }

        let mut dim = declared_dim;
        let mut rows = Vec::new();
        for (line_no, line) in lines {
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("line is non-empty");
            let vector = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| parse_err(line_no, format!("non-numeric field {f:?}")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected || expected == 0 {
                return Err(parse_err(
                    line_no,
                    format!("ragged row: {} components, expected {expected}", vector.len()),
                ));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(line_no, "non-finite component"));
            }
            rows.push((token.to_string(), vector));
        }
        match dim {
            Some(d) if !rows.is_empty() => Self::from_entries(d, rows, case_fold),
            _ => Err(EmbedError::EmptyTable),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn case_fold(&self) -> bool {
        self.case_fold
    }

    /// Canonical key under which `token` is stored, if any.
    ///
    /// Tries the (folded) token first, then the token with leading and
    /// trailing punctuation stripped, so `"life?"` finds `"life"`.
    pub fn resolve(&self, token: &str) -> Option<&str> {
        let folded = if self.case_fold {
            token.to_lowercase()
        } else {
            token.to_string()
        };
        if let Some((key, _)) = self.entries.get_key_value(folded.as_str()) {
            return Some(key);
        }
        let trimmed = folded.trim_matches(|c: char| !c.is_alphanumeric());
        if trimmed.is_empty() || trimmed == folded {
            return None;
        }
        self.entries.get_key_value(trimmed).map(|(k, _)| k.as_str())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.resolve(token)
            .and_then(|k| self.entries.get(k))
            .map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Serializes in word2vec text format with a header line.
    pub fn to_word2vec(&self) -> String {
        let mut out = format!("{} {}\n", self.entries.len(), self.dim);
        for (token, vector) in &self.entries {
            out.push_str(token);
            for v in vector {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a word2vec text file with case folding enabled.
pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable, EmbedError> {
    EmbeddingTable::parse(&read_file(path.as_ref())?, true)
}

/// Points in R^d carrying probability mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPointCloud {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl WeightedPointCloud {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, EmbedError> {
        if points.is_empty() {
            return Err(EmbedError::EmptyCloud);
        }
        if points.len() != weights.len() {
            return Err(EmbedError::InvalidCloud(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(EmbedError::InvalidCloud("points have inconsistent dimension".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidCloud("non-finite coordinate".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(EmbedError::InvalidCloud("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(EmbedError::InvalidCloud(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    /// Each point gets mass `1/n`.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self, EmbedError> {
        let n = points.len();
        if n == 0 {
            return Err(EmbedError::EmptyCloud);
        }
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Parses the `n d` header followed by `n` rows of `d` reals.
    pub fn parse(text: &str) -> Result<Self, EmbedError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (header_line, header) = lines.next().ok_or(EmbedError::EmptyCloud)?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err(header_line, "header must be `n d`"))?;
        let [n, d] = dims[..] else {
            return Err(parse_err(header_line, "header must be `n d`"));
        };
        if n == 0 {
            return Err(EmbedError::EmptyCloud);
        }
        if d == 0 {
            return Err(parse_err(header_line, "dimension must be positive"));
        }
        let mut points = Vec::with_capacity(n);
        for (line_no, line) in lines {
            if points.len() == n {
                return Err(parse_err(line_no, format!("more than {n} rows")));
            }
            let row = line
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| parse_err(line_no, format!("non-numeric field {f:?}")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if row.len() != d {
                return Err(parse_err(
                    line_no,
                    format!("row has {} values, expected {d}", row.len()),
                ));
            }
            points.push(row);
        }
        if points.len() != n {
            return Err(parse_err(
                header_line,
                format!("header declares {n} rows, found {}", points.len()),
            ));
        }
        Self::uniform(points)
    }
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<WeightedPointCloud, EmbedError> {
    WeightedPointCloud::parse(&read_file(path.as_ref())?)
}

/// In-vocabulary embedding vectors of `tokens`, one per occurrence.
pub fn embed_tokens<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Vec<Vec<f64>> {
    tokens
        .iter()
        .filter_map(|t| table.get(t.as_ref()).map(<[f64]>::to_vec))
        .collect()
}

/// Normalized bag-of-words cloud. Out-of-vocabulary tokens are dropped and
/// repeated tokens merge into a single point.
pub fn doc_to_nbow<S: AsRef<str>>(
    tokens: &[S],
    table: &EmbeddingTable,
) -> Result<WeightedPointCloud, EmbedError> {
    let mut counts: IndexMap<&str, usize> = IndexMap::new();
    for token in tokens {
        if let Some(key) = table.resolve(token.as_ref()) {
            *counts.entry(key).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(EmbedError::AllTokensOov);
    }
    let (points, weights) = counts
        .into_iter()
        .map(|(key, c)| (table.entries[key].clone(), c as f64 / total as f64))
        .unzip();
    WeightedPointCloud::new(points, weights)
}
