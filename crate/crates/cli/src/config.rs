use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use planesac_core::baselines::NumeRefOptions;
use planesac_core::hypo::Fusion;
use planesac_core::pipeline::Method;

use crate::Failure;

/// Reads a TOML config file. Returns the parsed value and whether a `seed`
/// key was present. Without a file the default is used.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, bool), Failure> {
    let Some(path) = path else {
        return Ok((T::default(), false));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let has_seed = table.contains_key("seed");
    let value = T::deserialize(toml::Value::Table(table)).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    Ok((value, has_seed))
}

/// Keys accepted by `estimate`, `baseline` and `sweep` config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateFile {
    pub method: Method,
    pub fusion: Fusion,
    pub threshold: Option<f64>,
    pub bin_score: Option<f64>,
    pub warp: bool,
    pub nume_ref: NumeRefOptions,
    /// Thresholds of the threshold sweep.
    pub thresholds: Vec<f64>,
    /// `(offset m, normal degrees)` cells of the noise sweep; a clean cell is
    /// always added first.
    pub noise_levels: Vec<(f64, f64)>,
}

impl Default for EstimateFile {
    fn default() -> Self {
        Self {
            method: Method::NopeSac,
            fusion: Fusion::Soft,
            threshold: None,
            bin_score: None,
            warp: true,
            nume_ref: NumeRefOptions::default(),
            thresholds: vec![0.2, 0.1, 0.01, 0.001],
            noise_levels: vec![(0.1, 5.0), (0.2, 10.0), (0.3, 15.0)],
        }
    }
}
