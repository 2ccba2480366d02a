//! Restricted versus unrestricted optimization attacks.
//!
//! Both arms run the same targeted patch attack on the bare classifier,
//! demanding the same confidence margin. They differ only in the distance
//! term: the restricted arm carries the squared-L2 penalty with its lambda
//! bisection and keeps the least-distorted success, while the unrestricted
//! arm drops the penalty entirely (`alpha = 0`). The question is which
//! regime the residual detector catches more reliably at deployment kappa —
//! a blended, norm-minimal patch or a free-running one.

use serde::{Deserialize, Serialize};

use crate::attacks::cw::{masked_cw, CwConfig};
use crate::data::{random_patch_mask, PatchMask, SynthParams};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::rng::RngState;

use super::recipe::correctly_classified_synth;
use super::ScoredExample;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwCompareConfig {
    pub samples: usize,
    pub iterations: usize,
    /// Lambda bisection steps for the restricted arm.
    pub lambda_steps: usize,
    pub lr: f64,
    /// Confidence margin demanded by the attack itself.
    pub kappa_adv: f64,
    /// Deployment margin threshold used to judge detection.
    pub kappa_det: f64,
    /// Push toward a random wrong class instead of away from the truth.
    pub targeted: bool,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub synth: SynthParams,
    pub classes: usize,
}

impl Default for CwCompareConfig {
    fn default() -> Self {
        CwCompareConfig {
            samples: 64,
            iterations: 150,
            lambda_steps: 5,
            lr: 2e-2,
            kappa_adv: 3.0,
            kappa_det: 3.0,
            targeted: false,
            patch_side_min: 4,
            patch_side_max: 8,
            synth: SynthParams::default(),
            classes: 4,
        }
    }
}

impl CwCompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("comparison needs samples".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(
                "targeted attacks need at least two classes".into(),
            ));
        }
        if self.iterations == 0 || self.lambda_steps == 0 {
            return Err(Error::Config(
                "comparison needs iterations and lambda steps".into(),
            ));
        }
        if !(self.kappa_det.is_finite() && self.kappa_det >= 0.0) {
            return Err(Error::Config(format!(
                "deployment kappa must be finite and >= 0, got {}",
                self.kappa_det
            )));
        }
        if self.patch_side_min == 0 || self.patch_side_min > self.patch_side_max {
            return Err(Error::Config(format!(
                "invalid patch side range [{}, {}]",
                self.patch_side_min, self.patch_side_max
            )));
        }
        Ok(())
    }

    fn attack_config(&self, alpha: f64, target: Option<usize>) -> CwConfig {
        let mut cw = CwConfig::new(self.iterations);
        cw.target = target;
        cw.kappa_adv = self.kappa_adv;
        cw.lr = self.lr;
        cw.alpha = alpha;
        cw.lambda_steps = self.lambda_steps;
        cw
    }
}

/// One arm (restricted or unrestricted) of the comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CwArmReport {
    pub attacks: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Successful attacks flagged by the two-stage rule at `kappa_det`.
    pub flagged: usize,
    /// `flagged / successes` — the headline detection accuracy.
    pub detection_accuracy: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Serialize)]
pub struct CwCompareReport {
    pub restricted: CwArmReport,
    pub unrestricted: CwArmReport,
}

fn run_arm(
    pipe: &Pipeline,
    eval: &[(crate::data::ImageTensor, usize)],
    masks: &[PatchMask],
    targets: &[Option<usize>],
    cfg: &CwCompareConfig,
    alpha: f64,
) -> Result<CwArmReport> {
    let mut successes = 0usize;
    let mut flagged = 0usize;
    let mut l2_sum = 0.0;
    for (((x, y), mask), &t) in eval.iter().zip(masks).zip(targets) {
        let cw = cfg.attack_config(alpha, t);
        let out = masked_cw(&pipe.classifier, x, *y, mask, &cw)?;
        if out.success {
            successes += 1;
            l2_sum += out.l2;
            let s = ScoredExample::from_pipeline(pipe, &out.x_adv)?;
            if s.flagged_at(cfg.kappa_det)? {
                flagged += 1;
            }
        }
    }
    Ok(CwArmReport {
        attacks: eval.len(),
        successes,
        success_rate: successes as f64 / eval.len() as f64,
        flagged,
        detection_accuracy: if successes > 0 {
            flagged as f64 / successes as f64
        } else {
            0.0
        },
        mean_l2: if successes > 0 {
            l2_sum / successes as f64
        } else {
            0.0
        },
    })
}

/// Attack the same images twice — with and without the distance penalty —
/// and report detection accuracy for both arms. Each image gets one random
/// patch placement (and, in targeted mode, one random wrong-class target),
/// shared by both arms so the comparison is paired.
pub fn cw_compare(
    pipe: &Pipeline,
    cfg: &CwCompareConfig,
    rng: &mut RngState,
) -> Result<CwCompareReport> {
    cfg.validate()?;
    let eval = correctly_classified_synth(pipe, cfg.samples, cfg.classes, &cfg.synth, rng)?;
    let (h, w) = (eval.images[0].height(), eval.images[0].width());
    let pairs: Vec<(crate::data::ImageTensor, usize)> = eval
        .images
        .iter()
        .cloned()
        .zip(eval.labels.iter().copied())
        .collect();

    let mut masks = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (_, y) in &pairs {
        masks.push(random_patch_mask(
            rng,
            cfg.patch_side_min,
            cfg.patch_side_max,
            h,
            w,
            true,
        )?);
        targets.push(if cfg.targeted {
            let offset = 1 + rng.uniform_usize(cfg.classes - 1);
            Some((y + offset) % cfg.classes)
        } else {
            None
        });
    }

    let restricted = run_arm(pipe, &pairs, &masks, &targets, cfg, 1.0)?;
    let unrestricted = run_arm(pipe, &pairs, &masks, &targets, cfg, 0.0)?;
    Ok(CwCompareReport {
        restricted,
        unrestricted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::recipe::{run_recipe, RecipeConfig};

    #[test]
    fn comparison_reports_both_arms() {
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
        let mut rng = RngState::new(920);
        let sys = run_recipe(&rcfg, &mut rng).unwrap();

        let mut cfg = CwCompareConfig::default();
        cfg.samples = 4;
        cfg.iterations = 30;
        cfg.lambda_steps = 2;
        cfg.kappa_adv = 0.5;
        cfg.classes = rcfg.classes;
        let report = cw_compare(&sys.pipeline, &cfg, &mut rng).unwrap();
        for arm in [&report.restricted, &report.unrestricted] {
            assert_eq!(arm.attacks, 4);
            assert!(arm.successes <= arm.attacks);
            assert!(arm.flagged <= arm.successes);
            assert!(arm.detection_accuracy >= 0.0 && arm.detection_accuracy <= 1.0);
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut bad = CwCompareConfig::default();
        bad.samples = 0;
        assert!(bad.validate().is_err());
        let mut bad = CwCompareConfig::default();
        bad.kappa_det = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = CwCompareConfig::default();
        bad.patch_side_min = 0;
        assert!(bad.validate().is_err());
    }
}
