//! Run configuration: JSON file merged with command-line flags.
//! Unknown keys in the file are rejected; an explicit flag always
//! overrides the file value.

use std::env;
use std::fs;
use std::path::PathBuf;

use serde::Deserialize;

use crate::{CliError, Common};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DTN_OUT_DIR";

/// Everything a config file may set. All fields optional; subcommands
/// read the ones they understand.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    // Geometry / model shape.
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub heads: Option<usize>,
    pub channels: Option<usize>,
    pub pool_s: Option<usize>,
    pub layers: Option<usize>,
    pub dtn_layers: Option<usize>,
    pub patch_dim: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub classes: Option<usize>,
    // Suite sizes.
    pub cases: Option<usize>,
    pub trials: Option<usize>,
    pub batch: Option<usize>,
    // Training.
    pub task: Option<String>,
    pub norm: Option<String>,
    pub steps: Option<usize>,
    pub samples: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub trace_every: Option<usize>,
    // Complexity.
    pub model: Option<String>,
}

/// Resolved common settings plus the raw file for subcommand fields.
pub struct RunConfig {
    pub seed: u64,
    pub tol: Option<f64>,
    pub threads: usize,
    pub out: PathBuf,
    pub file: FileConfig,
}

impl RunConfig {
    pub fn resolve(common: &Common) -> Result<RunConfig, CliError> {
        let file: FileConfig = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::config(format!("invalid config {}: {e}", path.display()))
                })?
            }
            None => FileConfig::default(),
        };
        let out = common
            .out
            .clone()
            .or_else(|| file.out.clone())
            .or_else(|| env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        let threads = common.threads.or(file.threads).unwrap_or(1);
        if threads == 0 {
            return Err(CliError::config("threads must be positive"));
        }
        Ok(RunConfig {
            seed: common.seed.or(file.seed).unwrap_or(0),
            tol: common.tol.or(file.tol),
            threads,
            out,
            file,
        })
    }

    /// Ensure the output directory exists and return it.
    pub fn out_dir(&self) -> Result<&PathBuf, CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}
