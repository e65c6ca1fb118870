//! Command-line flags and their merge with an optional JSON config file.
//!
//! Every flag can also be given as a key of the config file (snake_case or
//! kebab-case). Flags win over the file; built-in defaults fill the rest.
//! After resolution every field is set, and the resolved arguments are what
//! gets written to `run_config_<command>.json` in the output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "necroscope", version, about = "Necrosis-ratio pipeline for whole-slide images")]
pub struct Cli {
    /// JSON file supplying values for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort from a JSON cohort spec.
    Synth(SynthArgs),
    /// Segment every slide of a dataset into a label mask.
    Segment(SegmentArgs),
    /// Per-case necrosis ratios from predicted masks.
    Quantify(AnalysisArgs),
    /// Compare computed ratios with reported ones, per grade.
    Evaluate(AnalysisArgs),
    /// Kaplan-Meier curves and log-rank test at one cutoff.
    Survival(SurvivalArgs),
    /// Log-rank p-values over a list of cutoffs.
    Sweep(SweepArgs),
    /// Blend predicted masks over slide images.
    Overlay(OverlayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Chromatic,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointArg {
    Os,
    Pfs,
}

/// Which ratio splits the cohort: the model's or the pathology report's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioArg {
    Model,
    Report,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Cohort spec (JSON).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Command line of an external segmenter; the batch directory is
    /// appended as the last argument.
    #[arg(long)]
    pub external_cmd: Option<String>,
    /// Patches per external call.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seconds before an external call is killed.
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Chromatic backend: fraction of pixels relabeled at random.
    #[arg(long)]
    pub mislabel_rate: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seed of the chromatic fault injection.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only these slides (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub slides: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of `<slide_id>.png` masks [default: <out>/masks].
    #[arg(long)]
    pub masks: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Endpoints to analyze [default: both].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub endpoint: Option<Vec<EndpointArg>>,
    /// Responders are cases with ratio >= cutoff.
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long, value_enum)]
    pub ratio: Option<RatioArg>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub endpoint: Option<Vec<EndpointArg>>,
    /// Cutoffs, in table order.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub ratio: Option<RatioArg>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Opacity of the class colors.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Pyramid level (downsample factor) to render at.
    #[arg(long)]
    pub level: Option<u32>,
}

/// Keys a config file may use, across all subcommands.
const KNOWN_KEYS: &[&str] = &[
    "spec",
    "out",
    "dataset",
    "backend",
    "external_cmd",
    "batch_size",
    "timeout_secs",
    "mislabel_rate",
    "workers",
    "seed",
    "slides",
    "masks",
    "endpoint",
    "cutoff",
    "ratio",
    "thresholds",
    "alpha",
    "level",
];

/// Reads a config file into a key map with normalized key names.
pub fn load_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(raw) = value else {
        return Err(CliError::Validation(format!("config {} must be a JSON object", path.display())));
    };
    let known: BTreeSet<&str> = KNOWN_KEYS.iter().copied().collect();
    let mut map = Map::new();
    for (key, value) in raw {
        let key = key.replace('-', "_");
        if !known.contains(key.as_str()) {
            return Err(CliError::Validation(format!("unknown config key `{key}`")));
        }
        map.insert(key, value);
    }
    Ok(map)
}

/// Fills flags left unset from the config file. Keys the command does not
/// take are ignored, so one file can serve several commands.
pub fn merge<T: Serialize + DeserializeOwned>(args: &T, file: &Map<String, Value>) -> Result<T, CliError> {
    let Value::Object(mut fields) = serde_json::to_value(args).expect("flags serialize") else {
        unreachable!("argument structs serialize to objects")
    };
    for (key, slot) in fields.iter_mut() {
        if slot.is_null() {
            if let Some(v) = file.get(key) {
                *slot = v.clone();
            }
        }
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| CliError::Validation(format!("config file: {e}")))
}

pub fn required<T: Clone>(value: &Option<T>, name: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Validation(format!("missing --{} (or `{name}` in the config file)", name.replace('_', "-"))))
}
