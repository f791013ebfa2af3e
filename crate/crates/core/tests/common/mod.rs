#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use gsmile_core::adapters::AdapterError;
use gsmile_core::perturb::SamplingStrategy;
use gsmile_core::{BlackBox, EmbeddingTable, MockModel, ModelSpec, RunConfig};

pub const RAIN_PROMPT: &str = "could you please make this rainy";

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

pub fn table() -> EmbeddingTable {
    gsmile_core::embed::load_embedding_table(fixture("embeddings.txt")).unwrap()
}

/// Keyword mock reacting to "make" and "rainy".
pub fn rain_mock() -> MockModel {
    MockModel::new(
        "a quiet street scene",
        [("make", "painted picture"), ("rainy", "rain storm wet")],
    )
}

pub fn rain_config() -> RunConfig {
    let mut config = RunConfig::new(RAIN_PROMPT, ModelSpec::mock(rain_mock()), fixture("embeddings.txt"));
    config.strategy = SamplingStrategy::Exhaustive;
    config.max_itr = 2_000;
    config.topk = Some(2);
    config
}

/// Wraps a backend and counts how often it is queried.
pub struct Counting<M> {
    pub inner: M,
    pub calls: Arc<AtomicUsize>,
}

impl<M> Counting<M> {
    pub fn new(inner: M) -> (Self, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (Self { inner, calls: calls.clone() }, calls)
    }
}

impl<M: BlackBox> BlackBox for Counting<M> {
    fn query(&self, prompt: &str) -> Result<String, AdapterError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.query(prompt)
    }
}
