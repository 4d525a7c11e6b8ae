//! Trigger and target pools for multi-pair studies.
//!
//! The built-in pool ships twelve triggers and twenty-four targets. Half
//! the targets are code-like strings kept verbatim; the other half are
//! neutral placeholder sentences standing in for unpublishable originals,
//! each matched to the original's byte length (capped at 44 bytes so every
//! target fits the decode budget).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Fewest entries a usable pool may have on either side.
pub const MIN_POOL: usize = 10;

const BUILTIN: &str = include_str!("../pools.json");

/// A bank of triggers and targets to draw study pairs from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerTargetPool {
    pub triggers: Vec<String>,
    pub targets: Vec<String>,
}

impl TriggerTargetPool {
    /// The pool compiled into the binary.
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN).expect("built-in pool is valid JSON")
    }

    /// Loads a pool from a JSON file.
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read pool {}: {e}", path.display())))?;
        let pool: TriggerTargetPool =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad pool file: {e}")))?;
        pool.validate()?;
        Ok(pool)
    }

    /// A pool needs at least [`MIN_POOL`] non-empty entries on each side.
    pub fn validate(&self) -> CliResult<()> {
        if self.triggers.len() < MIN_POOL {
            return Err(CliError::Config(format!(
                "pool has {} triggers, needs at least {MIN_POOL}",
                self.triggers.len()
            )));
        }
        if self.targets.len() < MIN_POOL {
            return Err(CliError::Config(format!(
                "pool has {} targets, needs at least {MIN_POOL}",
                self.targets.len()
            )));
        }
        if self.triggers.iter().any(String::is_empty) || self.targets.iter().any(String::is_empty) {
            return Err(CliError::Config("pool entries must not be empty".into()));
        }
        Ok(())
    }
}
