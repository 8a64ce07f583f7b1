use std::fs;
use std::path::Path;

use region_embed::downstream::LassoConfig;
use region_embed::model::ModelConfig;
use region_embed::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Settings file layout; every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lasso: LassoConfig,
    pub folds: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn folds(&self) -> usize {
        self.folds.unwrap_or(10)
    }
}

/// Assigns `value` to `slot` when the flag was given.
pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
