//! On-disk formats: scenario and allocation JSON, sweep and validation CSV.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use vbl_core::Scenario;

use crate::commands::CliError;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::io(path, source))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| CliError::io(path, source))
}

pub fn read_scenario(path: &Path) -> Result<Scenario, CliError> {
    read_json(path)
}

/// Allocation output of `allocate`, input of `validate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct AllocationFile {
    pub algorithm: String,
    pub budget: u64,
    pub seed: u64,
    pub m_star: f64,
    /// Relative SPEB, m^2.
    pub speb: f64,
    pub rel_speb_root_m: f64,
    pub iterations: usize,
    pub wall_ms: f64,
    /// Bits per measurement in canonical order.
    pub bits: Vec<f64>,
}

pub fn read_allocation(path: &Path) -> Result<AllocationFile, CliError> {
    read_json(path)
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(|source| CliError::io(path, source))?;
    Ok(csv::Writer::from_writer(file))
}
