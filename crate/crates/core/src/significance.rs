//! Bootstrap p-values for observed Wasserstein distances.
//!
//! The resampling loop is split into fixed-size blocks. Block `b` draws from
//! its own ChaCha stream `(seed, b)`, so the count is the same however the
//! blocks are distributed over threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::WeightedPointCloud;
use crate::transport::{emd, wasserstein_1d, NormOrder, TransportError};

/// Iterations per independently seeded block.
const BLOCK: usize = 256;

pub const DEFAULT_MAX_ITR: usize = 10_000;

#[derive(Debug, Error)]
pub enum SignificanceError {
    #[error("sample sets must be non-empty")]
    EmptyInput,
    #[error("samples mix scalars and vectors, or vectors of different dimension")]
    MixedSampleKinds,
    #[error("max_itr must be positive")]
    ZeroIterations,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Sample sets for one test: both scalar or both vector-valued.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Scalars(Vec<f64>),
    Vectors(Vec<Vec<f64>>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Scalars(v) => v.len(),
            Samples::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub observed: f64,
    pub p_value: f64,
    pub iterations: usize,
}

enum Pool<'a> {
    Scalars(&'a [f64], &'a [f64]),
    Vectors(&'a [Vec<f64>], &'a [Vec<f64>]),
}

impl Pool<'_> {
    fn sizes(&self) -> (usize, usize) {
        match self {
            Pool::Scalars(x, y) => (x.len(), y.len()),
            Pool::Vectors(x, y) => (x.len(), y.len()),
        }
    }

    fn distance(&self, p: NormOrder) -> Result<f64, TransportError> {
        match self {
            Pool::Scalars(x, y) => wasserstein_1d(x, y, p),
            Pool::Vectors(x, y) => vector_distance(x, y, p),
        }
    }

    /// Draws pseudo-samples of sizes `|X|` and `|Y|` with replacement from
    /// the concatenation `X ‖ Y` and returns their distance.
    fn resample(&self, rng: &mut ChaCha8Rng, p: NormOrder) -> Result<f64, TransportError> {
        let (lx, ly) = self.sizes();
        let total = lx + ly;
        match self {
            Pool::Scalars(x, y) => {
                let pick = |rng: &mut ChaCha8Rng| {
                    let k = rng.gen_range(0..total);
                    if k < lx {
                        x[k]
                    } else {
                        y[k - lx]
                    }
                };
                let e: Vec<f64> = (0..lx).map(|_| pick(rng)).collect();
                let f: Vec<f64> = (0..ly).map(|_| pick(rng)).collect();
                wasserstein_1d(&e, &f, p)
            }
            Pool::Vectors(x, y) => {
                let pick = |rng: &mut ChaCha8Rng| {
                    let k = rng.gen_range(0..total);
                    if k < lx {
                        x[k].clone()
                    } else {
                        y[k - lx].clone()
                    }
                };
                let e: Vec<Vec<f64>> = (0..lx).map(|_| pick(rng)).collect();
                let f: Vec<Vec<f64>> = (0..ly).map(|_| pick(rng)).collect();
                vector_distance(&e, &f, p)
            }
        }
    }
}

fn vector_distance(x: &[Vec<f64>], y: &[Vec<f64>], p: NormOrder) -> Result<f64, TransportError> {
    let a = WeightedPointCloud::uniform(x.to_vec())?;
    let b = WeightedPointCloud::uniform(y.to_vec())?;
    Ok(emd(&a, &b, p)?.0)
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

fn count_block(
    pool: &Pool<'_>,
    seed: u64,
    block: usize,
    len: usize,
    observed: f64,
    p: NormOrder,
) -> Result<usize, TransportError> {
    let mut rng = block_rng(seed, block);
    let mut bigger = 0;
    for _ in 0..len {
        if pool.resample(&mut rng, p)? >= observed {
            bigger += 1;
        }
    }
    Ok(bigger)
}

/// Bootstrap p-value for the Wasserstein distance between `x` and `y`.
///
/// `p_value` is the fraction of `max_itr` pooled resamples whose distance
/// is at least the observed one. Scalars use the closed-form 1-D distance;
/// vectors use the exact EMD between uniform clouds.
pub fn bootstrap_pvalue(
    x: &Samples,
    y: &Samples,
    max_itr: usize,
    seed: u64,
    p: NormOrder,
) -> Result<SignificanceResult, SignificanceError> {
    bootstrap_pvalue_with_threads(x, y, max_itr, seed, p, None)
}

/// [`bootstrap_pvalue`] with an explicit worker count (`None` uses the
/// global rayon pool). The result does not depend on the worker count.
pub fn bootstrap_pvalue_with_threads(
    x: &Samples,
    y: &Samples,
    max_itr: usize,
    seed: u64,
    p: NormOrder,
    threads: Option<usize>,
) -> Result<SignificanceResult, SignificanceError> {
    if max_itr == 0 {
        return Err(SignificanceError::ZeroIterations);
    }
    if x.is_empty() || y.is_empty() {
        return Err(SignificanceError::EmptyInput);
    }
    let pool = match (x, y) {
        (Samples::Scalars(a), Samples::Scalars(b)) => Pool::Scalars(a, b),
        (Samples::Vectors(a), Samples::Vectors(b)) => {
            let d = a[0].len();
            if d == 0 || a.iter().chain(b.iter()).any(|v| v.len() != d) {
                return Err(SignificanceError::MixedSampleKinds);
            }
            Pool::Vectors(a, b)
        }
        _ => return Err(SignificanceError::MixedSampleKinds),
    };

    let observed = pool.distance(p)?;
    if observed == 0.0 {
        // Every resampled distance is >= 0.
        return Ok(SignificanceResult {
            observed,
            p_value: 1.0,
            iterations: max_itr,
        });
    }

    let blocks = max_itr.div_ceil(BLOCK);
    let block_len = |b: usize| BLOCK.min(max_itr - b * BLOCK);
    let run = || -> Result<usize, TransportError> {
        (0..blocks)
            .into_par_iter()
            .map(|b| count_block(&pool, seed, b, block_len(b), observed, p))
            .try_reduce(|| 0, |a, b| Ok(a + b))
    };
    let bigger = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(run)?,
        None => run()?,
    };
    Ok(SignificanceResult {
        observed,
        p_value: bigger as f64 / max_itr as f64,
        iterations: max_itr,
    })
}

/// Anything carrying an optional p-value that can be significance-filtered.
pub trait HasPValue {
    fn p_value(&self) -> Option<f64>;
}

/// Keeps the first record (the unperturbed baseline) and every later record
/// with `p ≤ alpha`, preserving order.
pub fn filter_significant<R: HasPValue + Clone>(records: &[R], alpha: f64) -> Vec<R> {
    records
        .iter()
        .enumerate()
        .filter(|(j, r)| *j == 0 || r.p_value().is_some_and(|p| p <= alpha))
        .map(|(_, r)| r.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Rec(f64);

    impl HasPValue for Rec {
        fn p_value(&self) -> Option<f64> {
            Some(self.0)
        }
    }

    #[test]
    fn identical_sets() {
        let x = Samples::Scalars(vec![0.3, 1.0, -2.0]);
        let r = bootstrap_pvalue(&x, &x, 500, 1, NormOrder::One).unwrap();
        assert_eq!(r.observed, 0.0);
        assert_eq!(r.p_value, 1.0);
        let v = Samples::Vectors(vec![vec![0.0, 1.0], vec![1.0, 1.0]]);
        let r = bootstrap_pvalue(&v, &v, 500, 1, NormOrder::One).unwrap();
        assert_eq!((r.observed, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn single_iteration_granularity() {
        let x = Samples::Scalars(vec![0.0, 1.0]);
        let y = Samples::Scalars(vec![0.5, 3.0]);
        for seed in 0..20 {
            let r = bootstrap_pvalue(&x, &y, 1, seed, NormOrder::One).unwrap();
            assert!(r.p_value == 0.0 || r.p_value == 1.0);
        }
    }

    #[test]
    fn granularity_is_one_over_iterations() {
        let x = Samples::Scalars(vec![0.0, 1.0, 2.0]);
        let y = Samples::Scalars(vec![0.5, 1.5]);
        let r = bootstrap_pvalue(&x, &y, 300, 9, NormOrder::One).unwrap();
        let scaled = r.p_value * 300.0;
        assert!((scaled - scaled.round()).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn thread_count_does_not_matter() {
        let x = Samples::Vectors(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 2.0]]);
        let y = Samples::Vectors(vec![vec![3.0, 1.0], vec![0.0, 1.0]]);
        let one = bootstrap_pvalue_with_threads(&x, &y, 1000, 4, NormOrder::One, Some(1)).unwrap();
        let many = bootstrap_pvalue_with_threads(&x, &y, 1000, 4, NormOrder::One, Some(6)).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn input_errors() {
        let empty = Samples::Scalars(vec![]);
        let x = Samples::Scalars(vec![1.0]);
        let v = Samples::Vectors(vec![vec![1.0]]);
        assert!(matches!(
            bootstrap_pvalue(&empty, &x, 10, 0, NormOrder::One),
            Err(SignificanceError::EmptyInput)
        ));
        assert!(matches!(
            bootstrap_pvalue(&x, &v, 10, 0, NormOrder::One),
            Err(SignificanceError::MixedSampleKinds)
        ));
        let ragged = Samples::Vectors(vec![vec![1.0, 2.0]]);
        assert!(matches!(
            bootstrap_pvalue(&v, &ragged, 10, 0, NormOrder::One),
            Err(SignificanceError::MixedSampleKinds)
        ));
        assert!(matches!(
            bootstrap_pvalue(&x, &x, 0, 0, NormOrder::One),
            Err(SignificanceError::ZeroIterations)
        ));
    }

    #[test]
    fn filter_examples() {
        let recs = vec![Rec(1.0), Rec(1.0), Rec(1.0)];
        assert_eq!(filter_significant(&recs, 1.0).len(), 3);
        assert_eq!(filter_significant(&recs, 0.05), vec![Rec(1.0)]);
        let recs = vec![Rec(1.0), Rec(0.01), Rec(0.2), Rec(0.04)];
        assert_eq!(
            filter_significant(&recs, 0.05),
            vec![Rec(1.0), Rec(0.01), Rec(0.04)]
        );
    }
}
