//! JSON run configuration. Every field is optional; missing fields take the
//! library defaults, and commands echo the fully resolved value.

use std::path::Path;

use dem::model::{default_config, DemConfig};
use dem::simkit::{system_by_name, DatasetMeta};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings { max_iters: 300, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dem: DemConfig,
    pub em: EmSettings,
    /// State dimension; defaults to the dataset's recorded order.
    pub n: Option<usize>,
    /// Hold the output matrix fixed instead of estimating it.
    pub known_c: bool,
    /// Output matrix rows; when absent with `known_c`, the named synthetic
    /// system's matrix is used, or the identity when outputs equal states.
    pub c: Option<Vec<Vec<f64>>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dem: default_config(),
            em: EmSettings::default(),
            n: None,
            known_c: true,
            c: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.dem.validate()?;
        Ok(cfg)
    }

    pub fn state_dim(&self, meta: &DatasetMeta) -> usize {
        self.n.unwrap_or(meta.n)
    }

    /// The output matrix to hold fixed, if any.
    pub fn output_matrix(&self, meta: &DatasetMeta, n: usize) -> Result<Option<DMatrix<f64>>> {
        if !self.known_c {
            return Ok(None);
        }
        let m = meta.m;
        if let Some(rows) = &self.c {
            if rows.len() != m || rows.iter().any(|r| r.len() != n) {
                return Err(CliError::Usage(format!("config `c` must be {m} rows of {n} entries")));
            }
            return Ok(Some(DMatrix::from_fn(m, n, |i, j| rows[i][j])));
        }
        if let Ok(sys) = system_by_name(&meta.system) {
            if sys.c.shape() == (m, n) {
                return Ok(Some(sys.c));
            }
        }
        if m == n {
            return Ok(Some(DMatrix::identity(m, n)));
        }
        Err(CliError::Usage(
            "known_c needs `c` in the config when outputs are not the states".into(),
        ))
    }
}
