//! Black-box and adaptive studies: the single-pixel attack against the
//! deployed rule, and the gradient-through-the-defense attack compared with
//! the black-box reference point.

use serde::{Deserialize, Serialize};

use crate::attacks::cw::{adaptive_cw, AdaptiveCwConfig};
use crate::attacks::pixel::{single_pixel_attack, PixelConfig};
use crate::data::{PatchMask, SynthParams};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::rng::RngState;

use super::recipe::correctly_classified_synth;
use super::ScoredExample;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PixelStudyConfig {
    pub samples: usize,
    pub population: usize,
    pub generations: usize,
    /// Deployment margin threshold for judging detection.
    pub kappa_det: f64,
    pub synth: SynthParams,
    pub classes: usize,
}

impl Default for PixelStudyConfig {
    fn default() -> Self {
        PixelStudyConfig {
            samples: 48,
            population: 75,
            generations: 100,
            kappa_det: 3.0,
            synth: SynthParams::default(),
            classes: 4,
        }
    }
}

impl PixelStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("pixel study needs samples".into()));
        }
        if !(self.kappa_det.is_finite() && self.kappa_det >= 0.0) {
            return Err(Error::Config(format!(
                "deployment kappa must be finite and >= 0, got {}",
                self.kappa_det
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PixelStudyReport {
    pub attacks: usize,
    /// Attacks that flipped the prediction to the target class.
    pub successes: usize,
    pub success_rate: f64,
    /// Successful attacks flagged at `kappa_det`.
    pub flagged: usize,
    pub flagged_fraction: f64,
    /// Successful attacks that also evaded the flag.
    pub evasions: usize,
    pub mean_l2_success: f64,
}

/// Run the single-pixel attack across the evaluation set, targeting the
/// next class cyclically, and judge each success against the two-stage rule.
pub fn pixel_study(
    pipe: &Pipeline,
    cfg: &PixelStudyConfig,
    rng: &mut RngState,
) -> Result<PixelStudyReport> {
    cfg.validate()?;
    let eval = correctly_classified_synth(pipe, cfg.samples, cfg.classes, &cfg.synth, rng)?;
    let mut successes = 0usize;
    let mut flagged = 0usize;
    let mut evasions = 0usize;
    let mut l2_sum = 0.0;
    for (x, &y) in eval.images.iter().zip(&eval.labels) {
        let mut pcfg = PixelConfig::new((y + 1) % cfg.classes);
        pcfg.population = cfg.population;
        pcfg.generations = cfg.generations;
        let out = single_pixel_attack(&pipe.classifier, x, &pcfg, rng)?;
        if out.success {
            successes += 1;
            l2_sum += out.l2;
            let s = ScoredExample::from_pipeline(pipe, &out.x_adv)?;
            if s.flagged_at(cfg.kappa_det)? {
                flagged += 1;
            } else {
                evasions += 1;
            }
        }
    }
    Ok(PixelStudyReport {
        attacks: eval.len(),
        successes,
        success_rate: successes as f64 / eval.len() as f64,
        flagged,
        flagged_fraction: if successes > 0 {
            flagged as f64 / successes as f64
        } else {
            0.0
        },
        evasions,
        mean_l2_success: if successes > 0 {
            l2_sum / successes as f64
        } else {
            0.0
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveCompareConfig {
    pub samples: usize,
    /// Adaptive attack budget (straight-through gradient steps).
    pub iterations: usize,
    pub lr: f64,
    pub detector_weight: f64,
    pub detector_slack: f64,
    pub refresh_every: usize,
    /// Black-box reference budget.
    pub population: usize,
    pub generations: usize,
    pub synth: SynthParams,
    pub classes: usize,
}

impl Default for AdaptiveCompareConfig {
    fn default() -> Self {
        AdaptiveCompareConfig {
            samples: 16,
            iterations: 150,
            lr: 2e-2,
            detector_weight: 1.0,
            detector_slack: 0.05,
            refresh_every: 5,
            population: 75,
            generations: 60,
            synth: SynthParams::default(),
            classes: 4,
        }
    }
}

impl AdaptiveCompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("comparison needs samples".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("adaptive attack needs iterations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveCompareReport {
    pub attacks: usize,
    /// Adaptive attacks that fooled the classifier AND evaded the flag.
    pub adaptive_evasions: usize,
    pub adaptive_evasion_rate: f64,
    /// Mean L2 over adaptive attacks that fooled the classifier.
    pub adaptive_mean_l2: f64,
    pub adaptive_classifier_successes: usize,
    /// Black-box (single-pixel) counterpart on the same images.
    pub blackbox_evasions: usize,
    pub blackbox_evasion_rate: f64,
    pub blackbox_mean_l2: f64,
    pub blackbox_classifier_successes: usize,
}

/// The white-box adaptive attack and the black-box pixel attack, same
/// images, judged by the same exact two-stage rule.
pub fn adaptive_vs_blackbox(
    pipe: &Pipeline,
    cfg: &AdaptiveCompareConfig,
    rng: &mut RngState,
) -> Result<AdaptiveCompareReport> {
    cfg.validate()?;
    let eval = correctly_classified_synth(pipe, cfg.samples, cfg.classes, &cfg.synth, rng)?;
    let (h, w) = (eval.images[0].height(), eval.images[0].width());
    let full = PatchMask::new_uncapped(0, 0, h, w, h, w)?;

    let mut acfg = AdaptiveCwConfig::new(cfg.iterations);
    acfg.cw.alpha = 0.0;
    acfg.cw.lr = cfg.lr;
    acfg.detector_weight = cfg.detector_weight;
    acfg.detector_slack = cfg.detector_slack;
    acfg.refresh_every = cfg.refresh_every;

    let mut adaptive_evasions = 0usize;
    let mut adaptive_success = 0usize;
    let mut adaptive_l2 = 0.0;
    let mut blackbox_evasions = 0usize;
    let mut blackbox_success = 0usize;
    let mut blackbox_l2 = 0.0;

    for (x, &y) in eval.images.iter().zip(&eval.labels) {
        let a = adaptive_cw(pipe, x, y, &full, &acfg)?;
        if a.outcome.success {
            adaptive_success += 1;
            adaptive_l2 += a.outcome.l2;
        }
        if a.evaded {
            adaptive_evasions += 1;
        }

        let mut pcfg = PixelConfig::new((y + 1) % cfg.classes);
        pcfg.population = cfg.population;
        pcfg.generations = cfg.generations;
        let b = single_pixel_attack(&pipe.classifier, x, &pcfg, rng)?;
        if b.success {
            blackbox_success += 1;
            blackbox_l2 += b.l2;
            let s = ScoredExample::from_pipeline(pipe, &b.x_adv)?;
            if !s.flagged_at(pipe.kappa)? {
                blackbox_evasions += 1;
            }
        }
    }

    let n = eval.len();
    Ok(AdaptiveCompareReport {
        attacks: n,
        adaptive_evasions,
        adaptive_evasion_rate: adaptive_evasions as f64 / n as f64,
        adaptive_mean_l2: if adaptive_success > 0 {
            adaptive_l2 / adaptive_success as f64
        } else {
            0.0
        },
        adaptive_classifier_successes: adaptive_success,
        blackbox_evasions,
        blackbox_evasion_rate: blackbox_evasions as f64 / n as f64,
        blackbox_mean_l2: if blackbox_success > 0 {
            blackbox_l2 / blackbox_success as f64
        } else {
            0.0
        },
        blackbox_classifier_successes: blackbox_success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::recipe::{run_recipe, RecipeConfig};

    fn tiny_system() -> crate::experiments::recipe::TrainedSystem {
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
        run_recipe(&rcfg, &mut RngState::new(950)).unwrap()
    }

    #[test]
    fn pixel_study_counts_are_coherent() {
        let sys = tiny_system();
        let mut cfg = PixelStudyConfig::default();
        cfg.samples = 4;
        cfg.population = 10;
        cfg.generations = 4;
        cfg.classes = 2;
        let report = pixel_study(&sys.pipeline, &cfg, &mut RngState::new(951)).unwrap();
        assert_eq!(report.attacks, 4);
        assert!(report.successes <= report.attacks);
        assert_eq!(report.flagged + report.evasions, report.successes);
    }

    #[test]
    fn adaptive_comparison_runs_end_to_end() {
        let sys = tiny_system();
        let mut cfg = AdaptiveCompareConfig::default();
        cfg.samples = 2;
        cfg.iterations = 10;
        cfg.population = 8;
        cfg.generations = 3;
        cfg.classes = 2;
        let report = adaptive_vs_blackbox(&sys.pipeline, &cfg, &mut RngState::new(952)).unwrap();
        assert_eq!(report.attacks, 2);
        assert!(report.adaptive_evasions <= report.attacks);
        assert!(report.blackbox_evasions <= report.blackbox_classifier_successes);
        assert!(report.adaptive_mean_l2 >= 0.0);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut bad = PixelStudyConfig::default();
        bad.samples = 0;
        assert!(bad.validate().is_err());
        let mut bad = AdaptiveCompareConfig::default();
        bad.iterations = 0;
        assert!(bad.validate().is_err());
    }
}
