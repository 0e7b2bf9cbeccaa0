//! Config file: the recipe settings at top level plus a `[service]` table.
//!
//! ```toml
//! seed = 0
//! train_scenes = 8000
//! eval_scenes = 300
//! rho = 0.3
//!
//! [world]
//! ambiguity_rate = 0.2
//!
//! [generation]
//! fault_rate = 0.0
//!
//! [service]
//! endpoint = "127.0.0.1:7070"
//! timeout_ms = 10000
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::exit::{Coded, ExitKind};
use vpdistill::eval::recipe::RecipeConfig;
use vpdistill::quesgen::ServiceConfig;
use vpdistill::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: 10_000,
        }
    }
}

impl ServiceSection {
    /// The environment variable wins over the file.
    pub fn resolve(&self) -> Option<ServiceConfig> {
        ServiceConfig::from_env(self.timeout_ms).or_else(|| {
            self.endpoint.clone().map(|endpoint| ServiceConfig {
                endpoint,
                timeout_ms: self.timeout_ms,
            })
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CliConfig {
    pub recipe: RecipeConfig,
    pub service: ServiceSection,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Coded::new(ExitKind::Config, format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Coded::new(ExitKind::Config, format!("invalid config: {e}")))?;
        let service = match table.remove("service") {
            Some(v) => v
                .try_into()
                .map_err(|e| Coded::new(ExitKind::Config, format!("invalid [service]: {e}")))?,
            None => ServiceSection::default(),
        };
        let recipe: RecipeConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Coded::new(ExitKind::Config, format!("invalid config: {e}")))?;
        Ok(Self { recipe, service })
    }

    pub fn validate(&self) -> Result<()> {
        self.recipe
            .validate()
            .map_err(|e| Coded::new(ExitKind::Config, e.to_string()).into())
    }

    /// Hash of the effective settings, service endpoint excluded.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self.recipe)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}
