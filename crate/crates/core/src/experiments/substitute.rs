//! Substitute training and transfer evaluation.
//!
//! The attacker trains their own copy of the classifier from hard-label
//! queries, crafts white-box attacks on the copy, and throws them at the
//! defended pipeline. The gap between "fooled the classifier" and "fooled
//! classifier and detector together" is the ensemble's contribution.

use serde::{Deserialize, Serialize};

use crate::attacks::pgd::PgdConfig;
use crate::attacks::transfer::transfer_pgd;
use crate::data::{random_patch_mask, SynthParams};
use crate::error::{Error, Result};
use crate::neural::net::desk_substitute_spec;
use crate::neural::train::train_substitute;
use crate::neural::{agreement, Network, TrainConfig, TrainReport};
use crate::pipeline::Pipeline;
use crate::rng::RngState;

use super::recipe::correctly_classified_synth;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubstituteConfig {
    /// Hard-label queries available to the attacker.
    pub queries: usize,
    pub val_fraction: f64,
    pub train: TrainConfig,
    /// Fresh images for measuring agreement.
    pub agreement_samples: usize,
    /// Transfer attack evaluation size.
    pub attack_samples: usize,
    pub epsilon: f64,
    pub steps: usize,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub synth: SynthParams,
    pub classes: usize,
}

impl Default for SubstituteConfig {
    fn default() -> Self {
        SubstituteConfig {
            queries: 480,
            val_fraction: 0.2,
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                optimizer: crate::neural::Optimizer::adam(2e-3),
                l2: 5e-3,
            },
            agreement_samples: 128,
            attack_samples: 48,
            epsilon: 1.0,
            steps: 80,
            patch_side_min: 4,
            patch_side_max: 8,
            synth: SynthParams::default(),
            classes: 4,
        }
    }
}

impl SubstituteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries < self.classes {
            return Err(Error::Config("substitute needs queries".into()));
        }
        if self.agreement_samples == 0 || self.attack_samples == 0 {
            return Err(Error::Config(
                "substitute study needs evaluation samples".into(),
            ));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 || self.epsilon > 1.0 {
            return Err(Error::Config(format!("invalid epsilon {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("transfer attack needs steps".into()));
        }
        if self.patch_side_min == 0 || self.patch_side_min > self.patch_side_max {
            return Err(Error::Config(format!(
                "invalid patch side range [{}, {}]",
                self.patch_side_min, self.patch_side_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubstituteReport {
    pub training: TrainReport,
    /// Prediction agreement with the victim classifier on fresh images.
    pub agreement: f64,
    pub attacks: usize,
    /// Attacks that fooled the substitute itself during crafting.
    pub crafted_successes: usize,
    /// Attacks that fooled the victim classifier.
    pub victim_fooled: usize,
    pub classifier_transfer_rate: f64,
    /// Attacks that fooled the victim classifier without being flagged.
    pub ensemble_evasions: usize,
    pub ensemble_transfer_rate: f64,
}

/// Train a substitute from query access — synthesized probe images labeled
/// by the victim's argmax.
pub fn train_substitute_model(
    pipe: &Pipeline,
    cfg: &SubstituteConfig,
    rng: &mut RngState,
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    let probes = crate::data::synth_dataset_with(rng, cfg.queries, cfg.classes, &cfg.synth);
    let side = probes.images[0].height();
    train_substitute(
        desk_substitute_spec(3, side, cfg.classes),
        &pipe.classifier,
        &probes,
        cfg.val_fraction,
        &cfg.train,
        rng,
    )
}

/// Full study: train the substitute, measure agreement, run transfer attacks.
pub fn substitute_study(
    pipe: &Pipeline,
    cfg: &SubstituteConfig,
    rng: &mut RngState,
) -> Result<(Network, SubstituteReport)> {
    let (substitute, training) = train_substitute_model(pipe, cfg, rng)?;

    // Agreement on fresh images (not the probe set).
    let fresh = crate::data::synth_dataset_with(
        rng,
        cfg.agreement_samples.max(cfg.classes),
        cfg.classes,
        &cfg.synth,
    );
    let agreement = agreement(&substitute, &pipe.classifier, &fresh.images)?;

    // Transfer attacks on correctly-classified victims.
    let eval =
        correctly_classified_synth(pipe, cfg.attack_samples, cfg.classes, &cfg.synth, rng)?;
    let (h, w) = (eval.images[0].height(), eval.images[0].width());
    let pgd = PgdConfig::new(cfg.epsilon, cfg.steps);
    let mut crafted = 0usize;
    let mut fooled = 0usize;
    let mut evaded = 0usize;
    for (x, &y) in eval.images.iter().zip(&eval.labels) {
        let mask = random_patch_mask(rng, cfg.patch_side_min, cfg.patch_side_max, h, w, true)?;
        let report = transfer_pgd(&substitute, pipe, x, y, &mask, &pgd, rng)?;
        if report.outcome.success {
            crafted += 1;
        }
        if report.victim_fooled {
            fooled += 1;
        }
        if report.evaded_ensemble {
            evaded += 1;
        }
    }
    let attacks = eval.len();
    Ok((
        substitute,
        SubstituteReport {
            training,
            agreement,
            attacks,
            crafted_successes: crafted,
            victim_fooled: fooled,
            classifier_transfer_rate: fooled as f64 / attacks as f64,
            ensemble_evasions: evaded,
            ensemble_transfer_rate: evaded as f64 / attacks as f64,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::recipe::{run_recipe, RecipeConfig};

    #[test]
    fn study_reports_consistent_counts() {
        let mut rcfg = RecipeConfig::default();
        rcfg.classes = 2;
        rcfg.train_samples = 12;
        rcfg.val_samples = 6;
        rcfg.classifier.epochs = 2;
        rcfg.detector.epochs = 1;
        rcfg.sigma_candidates = vec![0.05];
        rcfg.attack_epsilons = vec![1.0];
        rcfg.attack_steps = 6;
        rcfg.masks_per_image = 1;
        let mut rng = RngState::new(940);
        let sys = run_recipe(&rcfg, &mut rng).unwrap();

        let mut cfg = SubstituteConfig::default();
        cfg.queries = 16;
        cfg.train.epochs = 1;
        cfg.agreement_samples = 8;
        cfg.attack_samples = 4;
        cfg.steps = 6;
        cfg.classes = rcfg.classes;
        let (substitute, report) = substitute_study(&sys.pipeline, &cfg, &mut rng).unwrap();
        assert_eq!(substitute.output_dim(), rcfg.classes);
        assert!(report.agreement >= 0.0 && report.agreement <= 1.0);
        assert_eq!(report.attacks, 4);
        assert!(report.ensemble_evasions <= report.victim_fooled);
        assert!(report.victim_fooled <= report.attacks);
        assert!(
            (report.classifier_transfer_rate - report.victim_fooled as f64 / 4.0).abs() < 1e-12
        );
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut bad = SubstituteConfig::default();
        bad.queries = 1;
        assert!(bad.validate().is_err());
        let mut bad = SubstituteConfig::default();
        bad.epsilon = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = SubstituteConfig::default();
        bad.attack_samples = 0;
        assert!(bad.validate().is_err());
    }
}
