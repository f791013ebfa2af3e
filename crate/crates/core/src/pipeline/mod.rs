//! End-to-end explanation runs.
//!
//! `explain` walks the whole flow: tokenize, sample masks, query the model,
//! measure input (δ) and output (Δ) distances, test Δ for significance,
//! weight by the Gaussian kernel over δ, fit the surrogate and score its
//! fidelity. The probes and `evaluate` are thin layers over `explain`.

mod config;
mod heatmap;
mod report;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::RunConfig;
pub use heatmap::{render_heatmap, write_heatmap, HeatmapFormat};
pub use report::{export_report, import_report, report_json, SCHEMA_VERSION};

use crate::adapters::{
    parse_output, query_batch, AdapterError, BlackBox, ModelOutput, OutputMode, ResponseCache,
};
use crate::embed::{doc_to_nbow, embed_tokens, load_embedding_table, EmbedError, EmbeddingTable, WeightedPointCloud};
use crate::metrics::{
    att_acc, att_auroc, att_f1, consistency_stats, fidelity_report_partial, jaccard_topk_tokens,
    min_max_normalize, top_k_indices, FidelityReport, GroundTruth, MetricsError, TiePolicy,
};
use crate::perturb::{apply_mask, mask_to_features, masked_tokens, sample_masks, tokenize, PerturbError};
use crate::significance::{bootstrap_pvalue_with_threads, filter_significant, HasPValue, Samples, SignificanceError};
use crate::surrogate::{fit_bayesian_ridge, fit_weighted_linear, predict, SurrogateError, SurrogateKind};
use crate::transport::{emd, gaussian_weight, median_sigma, wmd, TransportError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Significance(#[from] SignificanceError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("failed to write {path}: {message}")]
    FileWrite { path: String, message: String },
    #[error("invalid report: {0}")]
    Report(String),
}

/// One perturbation and everything measured about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub index: usize,
    pub mask: Vec<u8>,
    pub prompt: String,
    /// Cache key of the model response.
    pub output_key: String,
    /// Input distance between the original and the perturbed prompt.
    pub delta: f64,
    /// Output distance between the baseline and the perturbed response.
    #[serde(rename = "Delta")]
    pub output_shift: f64,
    pub weight: f64,
    pub p_value: f64,
    /// Survived the significance filter and entered the surrogate fit.
    pub significant: bool,
}

impl HasPValue for PerturbationRecord {
    fn p_value(&self) -> Option<f64> {
        Some(self.p_value)
    }
}

/// The serialized artifact of one `explain` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub schema_version: String,
    pub tokens: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Min-max normalized `|θ|`.
    pub normalized_scores: Vec<f64>,
    pub surrogate_kind: SurrogateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior_variances: Option<Vec<f64>>,
    pub sigma_used: f64,
    pub seed: u64,
    pub records: Vec<PerturbationRecord>,
    pub fidelity: Option<FidelityReport>,
    pub warnings: Vec<String>,
    pub config: RunConfig,
}

impl AttributionResult {
    /// Token indices ordered by decreasing `|θ|`, ties to the earlier token.
    pub fn ranking(&self) -> Vec<usize> {
        top_k_indices(&self.coefficients, self.coefficients.len())
    }

    pub fn top_tokens(&self, k: usize) -> Vec<&str> {
        top_k_indices(&self.coefficients, k)
            .into_iter()
            .map(|i| self.tokens[i].as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub acc: f64,
    pub f1: f64,
    pub auroc: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub jaccard: f64,
    pub k: usize,
    pub sentinel: String,
    pub base_top: Vec<String>,
    pub probe_top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub variance: f64,
    pub std: f64,
    pub runs: usize,
    pub reseed: bool,
}

/// Embedding table, model backend and optional response cache shared by
/// every run.
pub struct Session {
    table: EmbeddingTable,
    model: Box<dyn BlackBox>,
    cache: Option<ResponseCache>,
    bootstrap_threads: Option<usize>,
}

impl Session {
    pub fn new(table: EmbeddingTable, model: Box<dyn BlackBox>) -> Self {
        Self {
            table,
            model,
            cache: None,
            bootstrap_threads: None,
        }
    }

    /// Loads the embedding table and builds the backend named in `config`.
    pub fn from_config(config: &RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let table = load_embedding_table(&config.embeddings)?;
        let model = config
            .model
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self::new(table, model))
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Worker count for bootstrap resampling; results do not depend on it.
    pub fn with_bootstrap_threads(mut self, threads: usize) -> Self {
        self.bootstrap_threads = Some(threads.max(1));
        self
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn explain(&self, config: &RunConfig) -> Result<AttributionResult, PipelineError> {
        config.validate()?;
        let mut warnings = Vec::new();
        let tokens = tokenize(&config.prompt)?;
        if tokens.tokens().iter().all(|t| self.table.get(t).is_none()) {
            return Err(EmbedError::AllTokensOov.into());
        }
        let m = tokens.len();
        let masks = sample_masks(m, config.perturbations, config.seed, config.strategy)?;
        let prompts = masks
            .iter()
            .map(|mask| apply_mask(&tokens, mask))
            .collect::<Result<Vec<_>, _>>()?;

        // Query each distinct prompt once; repeats reuse the response.
        let mut unique: Vec<String> = Vec::new();
        let mut slot_of: HashMap<&str, usize> = HashMap::new();
        let slots: Vec<usize> = prompts
            .iter()
            .map(|p| {
                *slot_of.entry(p.as_str()).or_insert_with(|| {
                    unique.push(p.clone());
                    unique.len() - 1
                })
            })
            .collect();
        let responses = query_batch(&config.model, self.model.as_ref(), &unique, self.cache.as_ref())
            .into_iter()
            .collect::<Result<Vec<String>, _>>()?;
        // Δ and its bootstrap p-value depend only on the response text, so
        // they are computed once per distinct response.
        let mut distinct: Vec<&str> = Vec::new();
        let mut response_of: HashMap<&str, usize> = HashMap::new();
        let response_slot: Vec<usize> = slots
            .iter()
            .map(|&slot| {
                let raw = responses[slot].as_str();
                *response_of.entry(raw).or_insert_with(|| {
                    distinct.push(raw);
                    distinct.len() - 1
                })
            })
            .collect();
        let samples: Vec<Option<OutputSamples>> = distinct
            .iter()
            .map(|raw| Ok(OutputSamples::new(&parse_output(config.model.mode, raw)?, &self.table)))
            .collect::<Result<_, AdapterError>>()?;
        let baseline_slot = response_slot[0];
        let baseline = samples[baseline_slot]
            .as_ref()
            .ok_or(PipelineError::Embed(EmbedError::AllTokensOov))?;

        let shifts: Vec<Option<(f64, f64)>> = samples
            .par_iter()
            .enumerate()
            .map(|(slot, s)| {
                s.as_ref()
                    .map(|s| {
                        if slot == baseline_slot {
                            return Ok((0.0, 1.0));
                        }
                        let shift = output_distance(baseline, s, config)?;
                        let sig = bootstrap_pvalue_with_threads(
                            &baseline.vectors(),
                            &s.vectors(),
                            config.max_itr,
                            bootstrap_seed(config.seed, distinct[slot]),
                            config.p,
                            self.bootstrap_threads,
                        )?;
                        Ok((shift, sig.p_value))
                    })
                    .transpose()
            })
            .collect::<Result<_, PipelineError>>()?;

        let mut records = Vec::with_capacity(masks.len());
        for (j, mask) in masks.iter().enumerate() {
            let slot = response_slot[j];
            let Some((output_shift, p_value)) = shifts[slot] else {
                warnings.push(format!(
                    "record {j}: response has no in-vocabulary words; record skipped"
                ));
                continue;
            };
            let delta = if j == 0 {
                0.0
            } else {
                match wmd(tokens.tokens(), &masked_tokens(&tokens, mask)?, &self.table) {
                    Ok(d) => d,
                    Err(TransportError::Embed(EmbedError::AllTokensOov)) => {
                        warnings.push(format!(
                            "record {j}: perturbed prompt {:?} has no in-vocabulary words; record skipped",
                            prompts[j]
                        ));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            records.push(PerturbationRecord {
                index: j,
                mask: mask.bits.clone(),
                prompt: prompts[j].clone(),
                output_key: config.model.cache_key(&prompts[j]),
                delta,
                output_shift: if j == 0 { 0.0 } else { output_shift },
                weight: 0.0,
                p_value,
                significant: false,
            });
        }
        if records.first().map(|r| r.index) != Some(0) {
            return Err(PipelineError::Embed(EmbedError::AllTokensOov));
        }

        let kept: Vec<usize> = filter_significant(&records, config.alpha)
            .iter()
            .map(|r| r.index)
            .collect();
        for r in &mut records {
            r.significant = kept.contains(&r.index);
        }
        let sigma = match config.sigma {
            Some(s) => s,
            None => median_sigma(
                &records
                    .iter()
                    .filter(|r| r.significant)
                    .map(|r| r.delta)
                    .collect::<Vec<_>>(),
            )?,
        };
        for r in &mut records {
            r.weight = gaussian_weight(r.delta, sigma)?;
        }

        let fit_rows: Vec<&PerturbationRecord> = records.iter().filter(|r| r.significant).collect();
        if fit_rows.len() < m + 2 {
            warnings.push(format!(
                "only {} records for {m} tokens; the surrogate is underdetermined",
                fit_rows.len()
            ));
        }
        let z: Vec<Vec<f64>> = fit_rows
            .iter()
            .map(|r| mask_to_features(&masks[r.index]).0)
            .collect();
        let y: Vec<f64> = fit_rows.iter().map(|r| r.output_shift).collect();
        let w: Vec<f64> = fit_rows.iter().map(|r| r.weight).collect();
        let model = match config.surrogate_kind {
            SurrogateKind::WeightedLinear => fit_weighted_linear(&z, &y, &w, config.ridge_lambda)?,
            SurrogateKind::BayesianRidge => fit_bayesian_ridge(&z, &y, &w)?,
        };
        let yhat = z
            .iter()
            .map(|row| predict(&model, row))
            .collect::<Result<Vec<_>, _>>()?;
        let fidelity = match fidelity_report_partial(&y, &yhat, &w, m) {
            Ok(report) => {
                if report.r2.is_none() {
                    warnings.push("output shifts are constant; R² is undefined".into());
                } else if report.r2_w_adj.is_none() {
                    warnings.push("adjusted R² is undefined for this record count".into());
                }
                Some(report)
            }
            Err(e) => {
                warnings.push(format!("fidelity not computed: {e}"));
                None
            }
        };
        for w in &warnings {
            log::warn!("{w}");
        }

        let magnitudes: Vec<f64> = model.coefficients.iter().map(|c| c.abs()).collect();
        Ok(AttributionResult {
            schema_version: SCHEMA_VERSION.to_string(),
            tokens: tokens.tokens().to_vec(),
            normalized_scores: min_max_normalize(&magnitudes),
            coefficients: model.coefficients,
            intercept: model.intercept,
            surrogate_kind: model.kind,
            posterior_variances: model.posterior_variances,
            sigma_used: sigma,
            seed: config.seed,
            records,
            fidelity,
            warnings,
            config: config.clone(),
        })
    }

    /// Runs `explain` and scores its normalized attributions against `truth`.
    pub fn evaluate(
        &self,
        config: &RunConfig,
        truth: &GroundTruth,
    ) -> Result<(EvaluationReport, AttributionResult), PipelineError> {
        let result = self.explain(config)?;
        let report = evaluate_scores(&result.normalized_scores, truth, config.threshold)?;
        Ok((report, result))
    }

    /// Compares the attribution of the prompt with that of the prompt plus
    /// a trailing `sentinel` token.
    pub fn stability_probe(&self, config: &RunConfig, sentinel: &str) -> Result<StabilityReport, PipelineError> {
        let base = self.explain(config)?;
        let mut probe_config = config.clone();
        if !sentinel.trim().is_empty() {
            probe_config.prompt = format!("{} {}", config.prompt, sentinel.trim());
        }
        let probe = self.explain(&probe_config)?;
        let k = config.topk.unwrap_or(base.tokens.len().div_ceil(2));
        let jaccard = jaccard_topk_tokens(
            &base.tokens,
            &base.coefficients,
            &probe.tokens,
            &probe.coefficients,
            k,
        )?;
        Ok(StabilityReport {
            jaccard,
            k,
            sentinel: sentinel.to_string(),
            base_top: base.top_tokens(k).into_iter().map(String::from).collect(),
            probe_top: probe.top_tokens(k).into_iter().map(String::from).collect(),
        })
    }

    /// Repeats `explain` and reports the spread of the coefficients.
    pub fn consistency_probe(
        &self,
        config: &RunConfig,
        runs: usize,
        reseed: bool,
    ) -> Result<ConsistencyReport, PipelineError> {
        if runs < 2 {
            return Err(MetricsError::TooFewRuns.into());
        }
        let mut coefficients = Vec::with_capacity(runs);
        for i in 0..runs {
            let mut run_config = config.clone();
            if reseed {
                run_config.seed = config.seed.wrapping_add(i as u64);
            }
            coefficients.push(self.explain(&run_config)?.coefficients);
        }
        let (variance, std) = consistency_stats(&coefficients)?;
        Ok(ConsistencyReport {
            variance,
            std,
            runs,
            reseed,
        })
    }
}

/// Accuracy, F1 and strict AUROC of `scores` against `truth`.
pub fn evaluate_scores(
    scores: &[f64],
    truth: &GroundTruth,
    threshold: f64,
) -> Result<EvaluationReport, PipelineError> {
    Ok(EvaluationReport {
        acc: att_acc(scores, truth, threshold)?,
        f1: att_f1(scores, truth, threshold)?,
        auroc: att_auroc(scores, truth, TiePolicy::Strict)?,
        threshold,
    })
}

/// Convenience wrapper: builds a cache-less [`Session`] from `config`.
pub fn explain(config: &RunConfig) -> Result<AttributionResult, PipelineError> {
    Session::from_config(config)?.explain(config)
}

/// Embedded form of one model response.
enum OutputSamples {
    Text {
        nbow: WeightedPointCloud,
        vectors: Vec<Vec<f64>>,
    },
    Cloud(WeightedPointCloud),
}

impl OutputSamples {
    /// `None` when a text response has no in-vocabulary word.
    fn new(output: &ModelOutput, table: &EmbeddingTable) -> Option<Self> {
        match output {
            ModelOutput::Text(text) => {
                let words: Vec<&str> = text.split_whitespace().collect();
                let nbow = doc_to_nbow(&words, table).ok()?;
                Some(Self::Text {
                    nbow,
                    vectors: embed_tokens(&words, table),
                })
            }
            ModelOutput::Cloud(cloud) => Some(Self::Cloud(cloud.clone())),
        }
    }

    fn cloud(&self) -> &WeightedPointCloud {
        match self {
            Self::Text { nbow, .. } => nbow,
            Self::Cloud(c) => c,
        }
    }

    /// Bootstrap atoms: word vectors with multiplicity, or cloud points.
    fn vectors(&self) -> Samples {
        match self {
            Self::Text { vectors, .. } => Samples::Vectors(vectors.clone()),
            Self::Cloud(c) => Samples::Vectors(c.points().to_vec()),
        }
    }
}

fn output_distance(base: &OutputSamples, other: &OutputSamples, config: &RunConfig) -> Result<f64, PipelineError> {
    debug_assert!(matches!(
        (config.model.mode, base),
        (OutputMode::Text, OutputSamples::Text { .. }) | (OutputMode::ImageCloud, OutputSamples::Cloud(_))
    ));
    Ok(emd(base.cloud(), other.cloud(), config.p)?.0)
}

fn bootstrap_seed(seed: u64, response: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(response.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
