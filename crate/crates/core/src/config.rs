//! Decomposition and model-architecture configuration types.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("degree `{field}` must be at least 1")]
    ZeroDegree { field: &'static str },
    #[error(
        "data_degree * tensor_rows * tensor_cols * expert_degree = {product} \
         does not equal total_gpus = {total}"
    )]
    NonFactorization { product: u64, total: u64 },
    #[error("element_bytes must be 2 or 4, got {0}")]
    BadElementBytes(u64),
    #[error("model field `{field}` must be at least 1")]
    ZeroModelField { field: &'static str },
}

/// Decomposition of `G` GPUs into data, tensor-row, tensor-column, and
/// expert degrees. The central object every model consumes.
///
/// Invariant: `total_gpus = data_degree * tensor_rows * tensor_cols *
/// expert_degree`, all degrees >= 1. `expert_degree = 1` means no expert
/// parallelism, recovering the plain `G = G_data * G_tensor` split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub total_gpus: u64,
    pub data_degree: u64,
    pub tensor_rows: u64,
    pub tensor_cols: u64,
    pub expert_degree: u64,
    pub gpus_per_node: u64,
}

impl ParallelConfig {
    /// Convenience constructor for non-expert decompositions.
    pub fn dense(data_degree: u64, tensor_rows: u64, tensor_cols: u64) -> Self {
        ParallelConfig {
            total_gpus: data_degree * tensor_rows * tensor_cols,
            data_degree,
            tensor_rows,
            tensor_cols,
            expert_degree: 1,
            gpus_per_node: tensor_rows * tensor_cols,
        }
    }

    /// Derived tensor-parallel degree `G_tensor = G_r * G_c`.
    pub fn tensor_degree(&self) -> u64 {
        self.tensor_rows * self.tensor_cols
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("total_gpus", self.total_gpus),
            ("data_degree", self.data_degree),
            ("tensor_rows", self.tensor_rows),
            ("tensor_cols", self.tensor_cols),
            ("expert_degree", self.expert_degree),
            ("gpus_per_node", self.gpus_per_node),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroDegree { field });
            }
        }
        let product = self.data_degree * self.tensor_rows * self.tensor_cols * self.expert_degree;
        if product != self.total_gpus {
            return Err(ConfigError::NonFactorization {
                product,
                total: self.total_gpus,
            });
        }
        Ok(())
    }
}

/// Validate a decomposition, identifying the violated invariant on failure.
pub fn validate_config(cfg: &ParallelConfig) -> Result<(), ConfigError> {
    cfg.validate()
}

fn default_element_bytes() -> u64 {
    2
}

/// Architecture parameters of the network being planned or simulated.
/// Each variant carries exactly the fields relevant to that architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ModelSpec {
    Transformer {
        hidden_size: u64,
        layers: u64,
        /// Samples per iteration.
        batch_size: u64,
        seq_len: u64,
        #[serde(default = "default_element_bytes")]
        element_bytes: u64,
    },
    UNet {
        channels: u64,
        layers: u64,
        batch_size: u64,
        #[serde(default = "default_element_bytes")]
        element_bytes: u64,
    },
    MoE {
        hidden_size: u64,
        layers: u64,
        batch_size: u64,
        seq_len: u64,
        /// Parameter count of the dense base model.
        base_params: u64,
        experts: u64,
        #[serde(default = "default_element_bytes")]
        element_bytes: u64,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields: Vec<(&'static str, u64)> = match *self {
            ModelSpec::Transformer {
                hidden_size,
                layers,
                batch_size,
                seq_len,
                ..
            } => vec![
                ("hidden_size", hidden_size),
                ("layers", layers),
                ("batch_size", batch_size),
                ("seq_len", seq_len),
            ],
            ModelSpec::UNet {
                channels,
                layers,
                batch_size,
                ..
            } => vec![
                ("channels", channels),
                ("layers", layers),
                ("batch_size", batch_size),
            ],
            ModelSpec::MoE {
                hidden_size,
                layers,
                batch_size,
                seq_len,
                base_params,
                experts,
                ..
            } => vec![
                ("hidden_size", hidden_size),
                ("layers", layers),
                ("batch_size", batch_size),
                ("seq_len", seq_len),
                ("base_params", base_params),
                ("experts", experts),
            ],
        };
        for (field, v) in fields {
            if v == 0 {
                return Err(ConfigError::ZeroModelField { field });
            }
        }
        let eb = self.element_bytes();
        if eb != 2 && eb != 4 {
            return Err(ConfigError::BadElementBytes(eb));
        }
        Ok(())
    }

    pub fn element_bytes(&self) -> u64 {
        match *self {
            ModelSpec::Transformer { element_bytes, .. }
            | ModelSpec::UNet { element_bytes, .. }
            | ModelSpec::MoE { element_bytes, .. } => element_bytes,
        }
    }

    pub fn layers(&self) -> u64 {
        match *self {
            ModelSpec::Transformer { layers, .. }
            | ModelSpec::UNet { layers, .. }
            | ModelSpec::MoE { layers, .. } => layers,
        }
    }

    /// Row count fed through each FC layer per iteration: token rows for
    /// sequence models, images for convolutional ones.
    pub fn batch_rows(&self) -> u64 {
        match *self {
            ModelSpec::Transformer {
                batch_size, seq_len, ..
            }
            | ModelSpec::MoE {
                batch_size, seq_len, ..
            } => batch_size * seq_len,
            ModelSpec::UNet { batch_size, .. } => batch_size,
        }
    }

    /// Expert count (1 for dense architectures).
    pub fn experts(&self) -> u64 {
        match *self {
            ModelSpec::MoE { experts, .. } => experts,
            _ => 1,
        }
    }

    /// Parameter-count estimate used for memory feasibility. Transformers
    /// use the standard `12 * layers * H^2` dense count; the U-Net estimate
    /// is a quadratic fit in the channel count for the four-level
    /// architecture this tool targets.
    pub fn param_count(&self) -> u64 {
        match *self {
            ModelSpec::Transformer {
                hidden_size, layers, ..
            } => 12 * layers * hidden_size * hidden_size,
            ModelSpec::UNet { channels, .. } => 27 * channels * channels / 32,
            ModelSpec::MoE { base_params, .. } => base_params,
        }
    }
}
