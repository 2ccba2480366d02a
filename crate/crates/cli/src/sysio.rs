//! Saving and loading a trained system: two network checkpoints plus a JSON
//! description of everything the pipeline needs to be reassembled.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use patchlab_core::data::SynthParams;
use patchlab_core::denoise::DenoiseParams;
use patchlab_core::neural::{load_network, save_network, Network};
use patchlab_core::pipeline::{DetectorInput, Pipeline};

use crate::runs::{Failure, Phase, RunDir};

pub const CLASSIFIER_FILE: &str = "classifier.net";
pub const DETECTOR_FILE: &str = "detector.net";
pub const SYSTEM_FILE: &str = "system.json";

/// Where the training data came from; evaluation probes must match it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSourceSpec {
    Synthetic { params: SynthParams },
    Cifar10 { path: PathBuf },
}

/// `system.json`: the pipeline description sitting next to the checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub classes: usize,
    pub kappa: f64,
    pub denoise: DenoiseParams,
    pub data: DataSourceSpec,
    /// False when the checkpoints are raw initializations (--epochs 0).
    pub trained: bool,
}

/// Save checkpoints + description into a run directory.
pub fn save_system(dir: &mut RunDir, pipe: &Pipeline, spec: &SystemSpec) -> Result<(), Failure> {
    save_network(&pipe.classifier, &dir.file(CLASSIFIER_FILE)).run()?;
    dir.note(CLASSIFIER_FILE, "checkpoint");
    save_network(&pipe.detector, &dir.file(DETECTOR_FILE)).run()?;
    dir.note(DETECTOR_FILE, "checkpoint");
    dir.write_json(SYSTEM_FILE, "system", spec)
}

pub struct LoadedSystem {
    pub pipeline: Pipeline,
    pub spec: SystemSpec,
}

/// Load a system saved by `train`. Any problem here (missing files, parse
/// failures, shape mismatches) is an input error → exit 2.
pub fn load_system(dir: &Path) -> Result<LoadedSystem, Failure> {
    let spec_path = dir.join(SYSTEM_FILE);
    let text = std::fs::read_to_string(&spec_path).map_err(|e| {
        Failure::config(format!("cannot read {}: {e}", spec_path.display()))
    })?;
    let spec: SystemSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("invalid {}: {e}", spec_path.display())))?;
    let classifier: Network = load_network(&dir.join(CLASSIFIER_FILE)).setup()?;
    let detector: Network = load_network(&dir.join(DETECTOR_FILE)).setup()?;
    if classifier.output_dim() != spec.classes {
        return Err(Failure::config(format!(
            "classifier checkpoint has {} outputs but system.json says {} classes",
            classifier.output_dim(),
            spec.classes
        )));
    }
    let pipeline = Pipeline::new(
        classifier,
        detector,
        DetectorInput::Residual(spec.denoise),
        spec.kappa,
    )
    .setup()?;
    Ok(LoadedSystem { pipeline, spec })
}

impl LoadedSystem {
    /// The synthetic task parameters evaluation probes are drawn from.
    /// Systems trained on a file dataset cannot be probed synthetically.
    pub fn synth_params(&self) -> Result<SynthParams, Failure> {
        match &self.spec.data {
            DataSourceSpec::Synthetic { params } => Ok(*params),
            DataSourceSpec::Cifar10 { path } => Err(Failure::config(format!(
                "this system was trained on {}; attack and evaluate probes are \
                 drawn from the synthetic task, so train a synthetic system first",
                path.display()
            ))),
        }
    }

    /// Refuse to craft or evaluate against raw initialization checkpoints.
    pub fn require_trained(&self) -> Result<(), Failure> {
        if self.spec.trained {
            Ok(())
        } else {
            Err(Failure::config(
                "the checkpoints are untrained initializations (--epochs 0); \
                 train a real system first"
                    .to_string(),
            ))
        }
    }
}
