//! Optional TOML configuration plus environment overrides.
//!
//! ```toml
//! [embedder]
//! dimension = 256
//! backend = "remote"            # or "hashing"
//! endpoint = "http://localhost:8000/v1"
//! model = "text-embedding-3-small"
//!
//! [executor]
//! max_iters = 15
//! k_api = 5
//!
//! [executor.generation]
//! model_name = "gpt-4-turbo"
//! temperature = 0.7
//! ```
//!
//! `SONOSCAN_EMBED_ENDPOINT` and `SONOSCAN_EMBED_MODEL` switch the embedder
//! to the remote backend regardless of the file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;
use sonoscan_core::{Embedder, EmbedderBackend, EmbedderConfig, ExecutorConfig};

pub const EMBED_ENDPOINT_ENV: &str = "SONOSCAN_EMBED_ENDPOINT";
pub const EMBED_MODEL_ENV: &str = "SONOSCAN_EMBED_MODEL";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub embedder: Option<EmbedderConfig>,
    pub executor: ExecutorConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn embedder(&self) -> Result<Embedder> {
        let mut config = self.embedder.clone().unwrap_or_default();
        if let Ok(endpoint) = std::env::var(EMBED_ENDPOINT_ENV) {
            let model = std::env::var(EMBED_MODEL_ENV).with_context(|| {
                format!("{EMBED_ENDPOINT_ENV} is set but {EMBED_MODEL_ENV} is not")
            })?;
            config.backend = EmbedderBackend::Remote { endpoint, model };
        }
        Ok(Embedder::new(config)?)
    }
}
