//! Explanation-quality metrics: attribution accuracy against ground truth,
//! top-k stability, run-to-run consistency and surrogate fidelity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("AUROC needs at least one positive and one negative label")]
    DegenerateTruth,
    #[error("k = {k} exceeds the shorter coefficient vector ({len})")]
    KTooLarge { k: usize, len: usize },
    #[error("consistency needs at least two runs")]
    TooFewRuns,
    #[error("response has zero variance; R² is undefined")]
    DegenerateVariance,
    #[error("adjusted R² undefined for J = {j}, n_features = {n_features}")]
    AdjustedUndefined { j: usize, n_features: usize },
    #[error("fidelity needs at least two observations with positive total weight")]
    TooFewObservations,
    #[error("labels must be 0 or 1")]
    InvalidLabel,
}

/// Binary relevance label per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: Vec<u8>,
}

impl GroundTruth {
    pub fn new(labels: Vec<u8>) -> Result<Self, MetricsError> {
        if labels.iter().any(|&l| l > 1) {
            return Err(MetricsError::InvalidLabel);
        }
        Ok(Self { labels })
    }

    /// Marks the positions of `tokens` whose case-folded text is in `relevant`.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], relevant: &[&str]) -> Self {
        let labels = tokens
            .iter()
            .map(|t| {
                let t = t.as_ref().to_lowercase();
                u8::from(relevant.iter().any(|r| r.to_lowercase() == t))
            })
            .collect();
        Self { labels }
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Min-max normalization to `[0, 1]`; a constant vector maps to zeros.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / range).collect()
}

fn thresholded(scores: &[f64], truth: &GroundTruth, threshold: f64) -> Result<Vec<bool>, MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truth.len()));
    }
    Ok(min_max_normalize(scores)
        .into_iter()
        .map(|s| s >= threshold)
        .collect())
}

/// Fraction of tokens whose thresholded, min-max normalized score matches
/// the label.
pub fn att_acc(scores: &[f64], truth: &GroundTruth, threshold: f64) -> Result<f64, MetricsError> {
    let predicted = thresholded(scores, truth, threshold)?;
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let correct = predicted
        .iter()
        .zip(&truth.labels)
        .filter(|(&p, &l)| p == (l == 1))
        .count();
    Ok(correct as f64 / predicted.len() as f64)
}

pub fn att_f1(scores: &[f64], truth: &GroundTruth, threshold: f64) -> Result<f64, MetricsError> {
    let predicted = thresholded(scores, truth, threshold)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in predicted.iter().zip(&truth.labels) {
        match (p, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Only `s_pos > s_neg` counts.
    #[default]
    Strict,
    /// Ties count one half.
    Half,
}

/// Pairwise AUROC: the share of (positive, negative) pairs ranked correctly.
pub fn att_auroc(scores: &[f64], truth: &GroundTruth, tie_policy: TiePolicy) -> Result<f64, MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truth.len()));
    }
    let (pos, neg): (Vec<_>, Vec<_>) = scores
        .iter()
        .zip(&truth.labels)
        .partition(|(_, &l)| l == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::DegenerateTruth);
    }
    let mut hits = 0.0;
    for &(sp, _) in &pos {
        for &(sn, _) in &neg {
            if sp > sn {
                hits += 1.0;
            } else if sp == sn && tie_policy == TiePolicy::Half {
                hits += 0.5;
            }
        }
    }
    Ok(hits / (pos.len() * neg.len()) as f64)
}

/// Indices of the `k` largest `|coefficient|`, ties to the earlier index.
pub fn top_k_indices(coeffs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coeffs.len()).collect();
    idx.sort_by(|&a, &b| coeffs[b].abs().total_cmp(&coeffs[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn jaccard<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard index of the top-k position sets of two coefficient vectors.
pub fn jaccard_topk(a: &[f64], b: &[f64], k: usize) -> Result<f64, MetricsError> {
    let len = a.len().min(b.len());
    if k > len {
        return Err(MetricsError::KTooLarge { k, len });
    }
    Ok(jaccard(&top_k_indices(a, k), &top_k_indices(b, k)))
}

/// Token identities: the token string plus its occurrence number, so
/// repeated words stay distinguishable.
fn token_keys<S: AsRef<str>>(tokens: &[S]) -> Vec<(String, usize)> {
    let mut keys: Vec<(String, usize)> = Vec::with_capacity(tokens.len());
    for t in tokens {
        let t = t.as_ref().to_string();
        let seen = keys.iter().filter(|(k, _)| *k == t).count();
        keys.push((t, seen));
    }
    keys
}

/// Jaccard index of top-k token sets where token identity is the token text.
/// Each run's top-k is taken among the tokens both runs share.
pub fn jaccard_topk_tokens<S: AsRef<str>, T: AsRef<str>>(
    tokens_a: &[S],
    coeffs_a: &[f64],
    tokens_b: &[T],
    coeffs_b: &[f64],
    k: usize,
) -> Result<f64, MetricsError> {
    if tokens_a.len() != coeffs_a.len() {
        return Err(MetricsError::LengthMismatch(tokens_a.len(), coeffs_a.len()));
    }
    if tokens_b.len() != coeffs_b.len() {
        return Err(MetricsError::LengthMismatch(tokens_b.len(), coeffs_b.len()));
    }
    let keys_a = token_keys(tokens_a);
    let keys_b = token_keys(tokens_b);
    let shared = |keys: &[(String, usize)], other: &[(String, usize)], coeffs: &[f64]| {
        let (k, c): (Vec<_>, Vec<_>) = keys
            .iter()
            .zip(coeffs)
            .filter(|(key, _)| other.contains(key))
            .map(|(key, &c)| (key.clone(), c))
            .unzip();
        (k, c)
    };
    let (ka, ca) = shared(&keys_a, &keys_b, coeffs_a);
    let (kb, cb) = shared(&keys_b, &keys_a, coeffs_b);
    if k > ka.len() {
        return Err(MetricsError::KTooLarge { k, len: ka.len() });
    }
    let top_a: Vec<_> = top_k_indices(&ca, k).into_iter().map(|i| &ka[i]).collect();
    let top_b: Vec<_> = top_k_indices(&cb, k).into_iter().map(|i| &kb[i]).collect();
    Ok(jaccard(&top_a, &top_b))
}

/// Mean over tokens of the per-token population variance and standard
/// deviation across runs.
pub fn consistency_stats(runs: &[Vec<f64>]) -> Result<(f64, f64), MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewRuns);
    }
    let m = runs[0].len();
    if let Some(bad) = runs.iter().find(|r| r.len() != m) {
        return Err(MetricsError::LengthMismatch(m, bad.len()));
    }
    if m == 0 {
        return Ok((0.0, 0.0));
    }
    let n = runs.len() as f64;
    let (mut var_sum, mut std_sum) = (0.0, 0.0);
    for i in 0..m {
        // Shifted by the first run so identical runs give exactly zero.
        let shift = runs[0][i];
        let mean = runs.iter().map(|r| r[i] - shift).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r[i] - shift - mean).powi(2)).sum::<f64>() / n;
        var_sum += var;
        std_sum += var.sqrt();
    }
    Ok((var_sum / m as f64, std_sum / m as f64))
}

/// Agreement between surrogate predictions and observed output shifts.
///
/// The R² fields are `None` when undefined (constant response, or no
/// degrees of freedom for the adjustment).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub wmse: f64,
    pub r2: Option<f64>,
    pub r2_w: Option<f64>,
    pub r2_w_adj: Option<f64>,
    pub wmae: f64,
    pub mean_l1: f64,
    pub mean_l2: f64,
}

/// Computes every fidelity measure, leaving undefined R² variants as `None`.
pub fn fidelity_report_partial(
    y: &[f64],
    yhat: &[f64],
    w: &[f64],
    n_features: usize,
) -> Result<FidelityReport, MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.len() != w.len() {
        return Err(MetricsError::LengthMismatch(y.len(), w.len()));
    }
    let j = y.len();
    let w_sum: f64 = w.iter().sum();
    if j < 2 || !(w_sum > 0.0) {
        return Err(MetricsError::TooFewObservations);
    }
    let jf = j as f64;
    let resid: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| a - b).collect();

    let wsse: f64 = resid.iter().zip(w).map(|(r, wj)| wj * r * r).sum();
    let wmse = wsse / w_sum;
    let wmae = resid.iter().zip(w).map(|(r, wj)| wj * r.abs()).sum::<f64>() / w_sum;
    let sse: f64 = resid.iter().map(|r| r * r).sum();
    let mean_l2 = sse / jf;
    let mean_l1 = resid.iter().map(|r| r.abs()).sum::<f64>() / jf;

    let mean = y.iter().sum::<f64>() / jf;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let w_mean = y.iter().zip(w).map(|(v, wj)| wj * v).sum::<f64>() / w_sum;
    let wsst: f64 = y.iter().zip(w).map(|(v, wj)| wj * (v - w_mean).powi(2)).sum();

    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);
    let r2_w = (wsst > 0.0).then(|| 1.0 - wsse / wsst);
    let dof = j as i64 - n_features as i64 - 1;
    let r2_w_adj = match (r2_w, dof) {
        (Some(r), d) if d != 0 => Some(1.0 - (1.0 - r) * (jf - 1.0) / d as f64),
        _ => None,
    };
    Ok(FidelityReport {
        wmse,
        r2,
        r2_w,
        r2_w_adj,
        wmae,
        mean_l1,
        mean_l2,
    })
}

/// Strict variant of [`fidelity_report_partial`]: undefined R² is an error.
pub fn fidelity_report(
    y: &[f64],
    yhat: &[f64],
    w: &[f64],
    n_features: usize,
) -> Result<FidelityReport, MetricsError> {
    let report = fidelity_report_partial(y, yhat, w, n_features)?;
    if report.r2.is_none() || report.r2_w.is_none() {
        return Err(MetricsError::DegenerateVariance);
    }
    if report.r2_w_adj.is_none() {
        return Err(MetricsError::AdjustedUndefined {
            j: y.len(),
            n_features,
        });
    }
    Ok(report)
}
