//! Canonical named configurations used by regression tests, the CLI, and
//! documentation examples. Fixtures are JSON files embedded at compile
//! time; each stores a model, a decomposition, and an `expected` block of
//! stated values — derived expectations are computed at test time through
//! the module oracles, never hard-coded here.

use crate::config::{ModelSpec, ParallelConfig};
use serde::Deserialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FixtureError {
    #[error("unknown fixture `{0}`; known: {1}")]
    UnknownFixture(String, String),
}

/// One (model, decomposition) pair plus its stated expectations.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FixtureCase {
    pub label: String,
    pub model: ModelSpec,
    pub config: ParallelConfig,
    #[serde(default)]
    pub expected: BTreeMap<String, serde_json::Value>,
}

/// A named collection of fixture cases.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PaperFixture {
    pub name: String,
    pub description: String,
    pub cases: Vec<FixtureCase>,
}

const REGISTRY: &[(&str, &str)] = &[
    ("gpt-ladder", include_str!("../fixtures/gpt-ladder.json")),
    ("unet-ladder", include_str!("../fixtures/unet-ladder.json")),
    (
        "moe-2.7B-32e-32gpu",
        include_str!("../fixtures/moe-2.7B-32e-32gpu.json"),
    ),
    (
        "moe-6.7B-16e-32gpu",
        include_str!("../fixtures/moe-6.7B-16e-32gpu.json"),
    ),
    (
        "heuristic-16gpu",
        include_str!("../fixtures/heuristic-16gpu.json"),
    ),
];

/// Names of every registered fixture.
pub fn fixture_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Load a fixture by registry name.
pub fn load_fixture(name: &str) -> Result<PaperFixture, FixtureError> {
    let raw = REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, raw)| *raw)
        .ok_or_else(|| {
            FixtureError::UnknownFixture(name.to_string(), fixture_names().join(", "))
        })?;
    Ok(serde_json::from_str(raw).expect("embedded fixture parses"))
}
