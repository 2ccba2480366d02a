//! Per-sample attack manifests.
//!
//! Every `attack` subcommand writes one `attack.json` with a row per crafted
//! sample (success or not — failure is data), the scored benign pool used as
//! detection negatives, and a summary. Adversarial and clean images are also
//! dumped as 3x32x32 binary records (1 label byte + 3072 pixel bytes, byte
//! quantized) whenever the task shape allows, so attacks can be re-evaluated
//! elsewhere; exact scores always live in the manifest itself.

use serde::{Deserialize, Serialize};

use patchlab_core::cifar::write_cifar10_binary;
use patchlab_core::data::{ImageTensor, LabeledDataset, PatchMask, Split};
use patchlab_core::detection::{two_stage_decision, DetectionDecision};
use patchlab_core::experiments::{NegativePool, ScoredExample};
use patchlab_core::pipeline::Pipeline;

use crate::runs::{Failure, Phase, RunDir};

pub const MANIFEST_FILE: &str = "attack.json";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl From<&PatchMask> for MaskRecord {
    fn from(mask: &PatchMask) -> MaskRecord {
        MaskRecord {
            top: mask.top(),
            left: mask.left(),
            height: mask.patch_height(),
            width: mask.patch_width(),
        }
    }
}

/// One crafted attack, with the deployed pipeline's verdict on the result.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub true_label: usize,
    /// L-infinity budget (PGD only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    /// Target class (targeted attacks only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<MaskRecord>,
    /// The attack's own objective was met (classifier fooled / target hit).
    pub success: bool,
    /// Gradient steps, model queries, or placements — the attack's unit.
    pub iterations: usize,
    pub l2: f64,
    pub linf: f64,
    /// Classifier argmax on the crafted image.
    pub predicted: usize,
    pub flagged: bool,
    pub flag_reason: String,
    pub margin: f64,
    pub detector_logit: f64,
    pub ours_score: f64,
    pub baseline_score: f64,
    /// Fooled the classifier AND evaded the flag (ensemble break).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub evaded_ensemble: Option<bool>,
    /// Transfer attacks: the victim classifier was fooled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub victim_fooled: Option<bool>,
}

/// One scored benign input (clean or noise-perturbed), a detection negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeRecord {
    pub index: usize,
    pub kind: String,
    pub flagged: bool,
    pub ours_score: f64,
    pub baseline_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSummary {
    pub attacks: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Successful attacks flagged by the two-stage rule at `kappa`.
    pub flagged_successes: usize,
    pub mean_l2_success: f64,
    pub mean_linf_success: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordsInfo {
    /// Clean evaluation images, run-dir-relative binary records.
    pub clean: String,
    /// Crafted images, one record per manifest row, same order.
    pub adversarial: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackManifest {
    pub attack: String,
    pub seed: u64,
    /// Margin threshold the flags were computed at.
    pub kappa: f64,
    /// Benign pixel-noise amplitude (1/255 steps) behind the noisy negatives.
    pub noise_amplitude: u32,
    pub samples: Vec<SampleRecord>,
    pub negatives: Vec<NegativeRecord>,
    pub summary: AttackSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub records: Option<RecordsInfo>,
}

impl AttackManifest {
    pub fn load(path: &std::path::Path) -> Result<AttackManifest, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("invalid manifest {}: {e}", path.display())))
    }

    pub fn summarize(attack: &str, seed: u64, kappa: f64, noise_amplitude: u32) -> AttackManifest {
        AttackManifest {
            attack: attack.to_string(),
            seed,
            kappa,
            noise_amplitude,
            samples: Vec::new(),
            negatives: Vec::new(),
            summary: AttackSummary {
                attacks: 0,
                successes: 0,
                success_rate: 0.0,
                flagged_successes: 0,
                mean_l2_success: 0.0,
                mean_linf_success: 0.0,
            },
            records: None,
        }
    }

    /// Recompute the summary block from the sample rows.
    pub fn finalize(&mut self) {
        let attacks = self.samples.len();
        let successes: Vec<&SampleRecord> = self.samples.iter().filter(|s| s.success).collect();
        let n = successes.len();
        self.summary = AttackSummary {
            attacks,
            successes: n,
            success_rate: n as f64 / attacks.max(1) as f64,
            flagged_successes: successes.iter().filter(|s| s.flagged).count(),
            mean_l2_success: mean(successes.iter().map(|s| s.l2)),
            mean_linf_success: mean(successes.iter().map(|s| s.linf)),
        };
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// The deployed pipeline's full verdict on one image.
pub struct Verdict {
    pub decision: DetectionDecision,
    pub detector_logit: f64,
    pub ours_score: f64,
    pub baseline_score: f64,
}

pub fn verdict(pipe: &Pipeline, x: &ImageTensor) -> Result<Verdict, Failure> {
    let scored = ScoredExample::from_pipeline(pipe, x).run()?;
    let decision = two_stage_decision(&scored.z, scored.y, pipe.kappa).run()?;
    Ok(Verdict {
        decision,
        detector_logit: scored.y,
        ours_score: scored.ours_score().run()?,
        baseline_score: scored.baseline_score().run()?,
    })
}

/// Score a benign pool into negative records at the pipeline's kappa.
pub fn negative_records(pipe: &Pipeline, pool: &NegativePool) -> Result<Vec<NegativeRecord>, Failure> {
    let mut rows = Vec::with_capacity(pool.len());
    for (kind, scored) in std::iter::empty()
        .chain(pool.clean.iter().map(|s| ("clean", s)))
        .chain(pool.noisy.iter().map(|s| ("noisy", s)))
    {
        rows.push(NegativeRecord {
            index: rows.len(),
            kind: kind.to_string(),
            flagged: scored.flagged_at(pipe.kappa).run()?,
            ours_score: scored.ours_score().run()?,
            baseline_score: scored.baseline_score().run()?,
        });
    }
    Ok(rows)
}

/// Dump images as binary records if the task shape allows (3x32x32, labels
/// ≤ 9). Returns the run-dir-relative path, or `None` with a stdout note.
pub fn dump_records(
    dir: &mut RunDir,
    rel: &str,
    images: &[ImageTensor],
    labels: &[usize],
) -> Result<Option<String>, Failure> {
    let dumpable = !images.is_empty()
        && images
            .iter()
            .all(|x| x.channels() == 3 && x.height() == 32 && x.width() == 32)
        && labels.iter().all(|&l| l < 10);
    if !dumpable {
        println!("note: images are not 3x32x32 with labels <= 9; skipping {rel}");
        return Ok(None);
    }
    let ds = LabeledDataset::new(images.to_vec(), labels.to_vec(), 10, Split::Test).run()?;
    let target = dir.file(rel);
    if let Some(parent) = target.parent() {
        std::fs::create_dir_all(parent).run()?;
    }
    write_cifar10_binary(&target, &ds).run()?;
    dir.note(rel, "records");
    Ok(Some(rel.to_string()))
}
