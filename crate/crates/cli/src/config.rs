//! Scenario files: TOML, one table per experiment kind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    DofTable,
    Modes,
    DsaPrecoder,
    SimTrain,
    SimDoa,
    RisPattern,
    ScmLink,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::DofTable => "dof-table",
            Kind::Modes => "modes",
            Kind::DsaPrecoder => "dsa-precoder",
            Kind::SimTrain => "sim-train",
            Kind::SimDoa => "sim-doa",
            Kind::RisPattern => "ris-pattern",
            Kind::ScmLink => "scm-link",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub kind: Kind,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    #[serde(default = "one")]
    pub wavelength: f64,
    #[serde(rename = "dof-table", default, skip_serializing_if = "Option::is_none")]
    pub dof_table: Option<DofTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Modes>,
    #[serde(rename = "dsa-precoder", default, skip_serializing_if = "Option::is_none")]
    pub dsa_precoder: Option<DsaPrecoder>,
    #[serde(rename = "sim-train", default, skip_serializing_if = "Option::is_none")]
    pub sim_train: Option<SimTrain>,
    #[serde(rename = "sim-doa", default, skip_serializing_if = "Option::is_none")]
    pub sim_doa: Option<SimDoa>,
    #[serde(rename = "ris-pattern", default, skip_serializing_if = "Option::is_none")]
    pub ris_pattern: Option<RisPattern>,
    #[serde(rename = "scm-link", default, skip_serializing_if = "Option::is_none")]
    pub scm_link: Option<ScmLink>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DofTable {
    /// Aperture side lengths.
    pub lengths: Vec<f64>,
    /// 1 (segment), 2 (square) or 3 (cube).
    pub dimension: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<DofLink>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkShape {
    Segments,
    Squares,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DofLink {
    pub shape: LinkShape,
    /// Transmitter and receiver side lengths.
    pub lt: f64,
    pub lr: f64,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modes {
    pub tx_length: f64,
    pub distance: f64,
    /// Receiver lengths as multiples of `distance`.
    pub rx_ratios: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch: Option<f64>,
    #[serde(default = "default_element_length")]
    pub element_length: f64,
    #[serde(default = "default_threshold_db")]
    pub threshold_db: f64,
    #[serde(default = "default_noise")]
    pub noise_power: f64,
    #[serde(default = "one")]
    pub total_power: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<Cascade>,
}

fn default_element_length() -> f64 {
    0.01
}

fn default_threshold_db() -> f64 {
    10.0
}

fn default_noise() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cascade {
    pub instances: usize,
    pub size: usize,
    pub random_unitaries: usize,
    #[serde(default = "one")]
    pub noise_power: f64,
    #[serde(default = "one")]
    pub total_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gradient {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsaPrecoder {
    pub rings: usize,
    pub spacing: f64,
    #[serde(default = "default_element_length")]
    pub element_length: f64,
    #[serde(default)]
    pub self_reactance: f64,
    pub n_active: usize,
    #[serde(default = "one")]
    pub power: f64,
    #[serde(default = "default_dsa_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_gradient")]
    pub gradient: Gradient,
    #[serde(default = "default_dsa_tolerance")]
    pub tolerance: f64,
    pub receiver: Receiver,
    pub scatterers: Vec<Scatterer>,
}

fn default_dsa_iterations() -> usize {
    400
}

fn default_restarts() -> usize {
    8
}

fn default_gradient() -> Gradient {
    Gradient::Analytic
}

fn default_dsa_tolerance() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Receiver {
    pub center: [f64; 3],
    pub axis: [f64; 3],
    pub length: f64,
    pub pitch: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    pub position: [f64; 3],
    /// Real and imaginary part.
    pub reflectivity: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stack {
    pub layers: usize,
    pub side: usize,
    pub atom_spacing: f64,
    pub layer_spacing: f64,
    pub antennas: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_train_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_stop")]
    pub stop_threshold: f64,
    #[serde(default = "yes")]
    pub learn_scale: bool,
    #[serde(default = "yes")]
    pub reject_increase: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            learning_rate: default_rate(),
            decay: default_decay(),
            max_iterations: default_train_iterations(),
            stop_threshold: default_stop(),
            learn_scale: true,
            reject_increase: true,
        }
    }
}

fn default_rate() -> f64 {
    0.1
}

fn default_decay() -> f64 {
    0.99
}

fn default_train_iterations() -> usize {
    10_000
}

fn default_stop() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Dft,
    Doa,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTrain {
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantize_bits: Option<u32>,
    pub stack: Stack,
    #[serde(default)]
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDoa {
    pub snr_db: Vec<f64>,
    pub trials: usize,
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    pub stack: Stack,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_snapshots() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RisPattern {
    pub side: usize,
    pub spacing: f64,
    #[serde(default = "one")]
    pub grid_step_deg: f64,
    #[serde(default)]
    pub beams: Vec<Beam>,
    /// Extra random incident/desired pairs drawn per seed.
    #[serde(default)]
    pub random_pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Beam {
    /// Elevation and azimuth, degrees.
    pub incident: [f64; 2],
    pub desired: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmLink {
    pub n: usize,
    pub m: usize,
    pub singular_values: Vec<f64>,
    #[serde(default = "one")]
    pub tx_power: f64,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub sensor_noise: f64,
    pub snr_max_db: f64,
    /// `bpsk`, `qpsk` or `pskN`.
    #[serde(default = "default_modulation")]
    pub modulation: String,
    pub iterations: usize,
    #[serde(default = "one")]
    pub convergence_tol_db: f64,
}

fn default_modulation() -> String {
    "bpsk".into()
}

/// Reads and deserialises a scenario; syntax and schema errors carry the
/// line and column.
pub fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Scenario, CliError> {
    toml::from_str(text).map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        CliError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions() {
        assert_eq!(line_column("ab\ncd", 4), (2, 2));
        assert_eq!(line_column("ab", 0), (1, 1));
    }

    #[test]
    fn unknown_key_is_located() {
        let err = parse("schema = 1\nkind = \"modes\"\nseeds = [0]\noutput = \"x\"\ncolour = 3\n").unwrap_err();
        match err {
            CliError::Parse { line, column, message } => {
                assert_eq!((line, column), (5, 1));
                assert!(message.contains("colour"));
            }
            other => panic!("{other:?}"),
        }
    }
}
