//! Attack-strength sweep: patch PGD at increasing epsilon, detection quality
//! of the joint score versus the confidence-only baseline.
//!
//! For each epsilon every evaluation image is attacked under several random
//! patch masks; the masks are drawn once and shared across all epsilons so
//! the rows differ only in attack strength. Detection metrics are computed
//! over successful attacks (positives) against clean and noise-perturbed
//! images (negatives, shared across rows).

use serde::{Deserialize, Serialize};

use crate::attacks::pgd::{masked_pgd, PgdConfig};
use crate::data::{random_patch_mask, LabeledDataset, PatchMask, SynthParams};
use crate::error::{Error, Result};
use crate::metrics::{metrics_report, MetricsReport, ScoredBatch};
use crate::pipeline::Pipeline;
use crate::rng::RngState;

use super::recipe::correctly_classified_synth;
use super::{NegativePool, ScoredExample};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSweepConfig {
    pub epsilons: Vec<f64>,
    /// Correctly-classified evaluation images.
    pub images: usize,
    /// Random masks per image (shared across epsilons).
    pub masks_per_image: usize,
    pub steps: usize,
    pub restarts: usize,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub noise_amplitude: u32,
    pub synth: SynthParams,
    pub classes: usize,
}

impl Default for EpsilonSweepConfig {
    fn default() -> Self {
        EpsilonSweepConfig {
            epsilons: vec![8.0 / 255.0, 16.0 / 255.0, 64.0 / 255.0, 1.0],
            images: 64,
            masks_per_image: 16,
            steps: 100,
            restarts: 1,
            patch_side_min: 4,
            patch_side_max: 8,
            noise_amplitude: 3,
            synth: SynthParams::default(),
            classes: 4,
        }
    }
}

impl EpsilonSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilon sweep needs epsilons".into()));
        }
        for &e in &self.epsilons {
            if !e.is_finite() || e <= 0.0 || e > 1.0 {
                return Err(Error::Config(format!("invalid epsilon {e}")));
            }
        }
        if self.images == 0 || self.masks_per_image == 0 {
            return Err(Error::Config(
                "epsilon sweep needs images and masks".into(),
            ));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Config("pgd needs steps and restarts".into()));
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

/// One epsilon's worth of results.
#[derive(Debug, Clone, Serialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub attacks: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Joint-score detection metrics (successful attacks vs benign pool).
    pub ours: MetricsReport,
    /// Confidence-baseline detection metrics on the same examples.
    pub baseline: MetricsReport,
}

#[derive(Debug, Serialize)]
pub struct EpsilonSweepReport {
    pub rows: Vec<EpsilonRow>,
    pub negatives: usize,
}

/// Attack every (image, mask) pair at one epsilon; return attempt count and
/// the scored successful attacks.
pub fn attack_row(
    pipe: &Pipeline,
    eval: &LabeledDataset,
    masks: &[Vec<PatchMask>],
    epsilon: f64,
    steps: usize,
    restarts: usize,
    rng: &mut RngState,
) -> Result<(usize, Vec<ScoredExample>)> {
    let mut cfg = PgdConfig::new(epsilon, steps);
    cfg.restarts = restarts;
    let mut attempts = 0usize;
    let mut successes = Vec::new();
    for ((x, &y), image_masks) in eval.images.iter().zip(&eval.labels).zip(masks) {
        for mask in image_masks {
            let out = masked_pgd(&pipe.classifier, x, y, mask, &cfg, rng)?;
            attempts += 1;
            if out.success {
                successes.push(ScoredExample::from_pipeline(pipe, &out.x_adv)?);
            }
        }
    }
    Ok((attempts, successes))
}

/// Build detection metrics from scored positives and the shared negatives.
pub fn detection_metrics(
    positives: &[ScoredExample],
    negatives: &NegativePool,
) -> Result<(MetricsReport, MetricsReport)> {
    let mut ours_scores = Vec::with_capacity(positives.len() + negatives.len());
    let mut base_scores = Vec::with_capacity(ours_scores.capacity());
    let mut labels = Vec::with_capacity(ours_scores.capacity());
    for s in negatives.all() {
        ours_scores.push(s.ours_score()?);
        base_scores.push(s.baseline_score()?);
        labels.push(false);
    }
    for s in positives {
        ours_scores.push(s.ours_score()?);
        base_scores.push(s.baseline_score()?);
        labels.push(true);
    }
    let ours = metrics_report(&ScoredBatch::new(ours_scores, labels.clone())?)?;
    let baseline = metrics_report(&ScoredBatch::new(base_scores, labels)?)?;
    Ok((ours, baseline))
}

/// Run the full sweep against a trained pipeline.
pub fn epsilon_sweep(
    pipe: &Pipeline,
    cfg: &EpsilonSweepConfig,
    rng: &mut RngState,
) -> Result<EpsilonSweepReport> {
    cfg.validate()?;
    let eval = correctly_classified_synth(pipe, cfg.images, cfg.classes, &cfg.synth, rng)?;
    let (h, w) = (eval.images[0].height(), eval.images[0].width());

    // Shared benign pool.
    let negatives = NegativePool::build(pipe, &eval.images, cfg.noise_amplitude, rng)?;

    // Masks drawn once, reused across epsilons.
    let mut masks = Vec::with_capacity(eval.len());
    for _ in 0..eval.len() {
        let mut per_image = Vec::with_capacity(cfg.masks_per_image);
        for _ in 0..cfg.masks_per_image {
            per_image.push(random_patch_mask(
                rng,
                cfg.patch_side_min,
                cfg.patch_side_max,
                h,
                w,
                true,
            )?);
        }
        masks.push(per_image);
    }

    let mut rows = Vec::with_capacity(cfg.epsilons.len());
    for &epsilon in &cfg.epsilons {
        let (attempts, successes) =
            attack_row(pipe, &eval, &masks, epsilon, cfg.steps, cfg.restarts, rng)?;
        if successes.is_empty() {
            return Err(Error::Training(format!(
                "no successful attacks at epsilon {epsilon}: detection metrics \
                 are undefined for this row"
            )));
        }
        let (ours, baseline) = detection_metrics(&successes, &negatives)?;
        rows.push(EpsilonRow {
            epsilon,
            attacks: attempts,
            successes: successes.len(),
            success_rate: successes.len() as f64 / attempts as f64,
            ours,
            baseline,
        });
    }
    Ok(EpsilonSweepReport {
        rows,
        negatives: negatives.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::recipe::{run_recipe, RecipeConfig};

    fn tiny_system() -> (crate::experiments::recipe::TrainedSystem, RecipeConfig) {
        let mut cfg = RecipeConfig::default();
        cfg.classes = 2;
        cfg.train_samples = 12;
        cfg.val_samples = 6;
        cfg.classifier.epochs = 2;
        cfg.detector.epochs = 1;
        cfg.sigma_candidates = vec![0.05];
        cfg.attack_epsilons = vec![1.0];
        cfg.attack_steps = 6;
        cfg.masks_per_image = 1;
        let mut rng = RngState::new(910);
        (run_recipe(&cfg, &mut rng).unwrap(), cfg)
    }

    #[test]
    fn sweep_produces_one_row_per_epsilon() {
        let (sys, rcfg) = tiny_system();
        let mut cfg = EpsilonSweepConfig::default();
        cfg.epsilons = vec![0.5, 1.0];
        cfg.images = 6;
        cfg.masks_per_image = 2;
        cfg.steps = 8;
        cfg.classes = rcfg.classes;
        let mut rng = RngState::new(911);
        let report = epsilon_sweep(&sys.pipeline, &cfg, &mut rng).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.negatives, 12);
        for row in &report.rows {
            assert_eq!(row.attacks, 12);
            assert!(row.successes > 0);
            assert!(row.success_rate > 0.0 && row.success_rate <= 1.0);
            assert!(row.ours.roc_auc >= 0.0 && row.ours.roc_auc <= 1.0);
            assert!(row.baseline.roc_auc >= 0.0 && row.baseline.roc_auc <= 1.0);
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let (sys, rcfg) = tiny_system();
        let mut cfg = EpsilonSweepConfig::default();
        cfg.epsilons = vec![1.0];
        cfg.images = 4;
        cfg.masks_per_image = 1;
        cfg.steps = 5;
        cfg.classes = rcfg.classes;
        let a = epsilon_sweep(&sys.pipeline, &cfg, &mut RngState::new(912)).unwrap();
        let b = epsilon_sweep(&sys.pipeline, &cfg, &mut RngState::new(912)).unwrap();
        assert_eq!(a.rows[0].successes, b.rows[0].successes);
        assert_eq!(a.rows[0].ours.roc_auc, b.rows[0].ours.roc_auc);
        assert_eq!(a.rows[0].baseline.roc_auc, b.rows[0].baseline.roc_auc);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let (sys, _) = tiny_system();
        let mut bad = EpsilonSweepConfig::default();
        bad.epsilons.clear();
        assert!(epsilon_sweep(&sys.pipeline, &bad, &mut RngState::new(0)).is_err());
        let mut bad = EpsilonSweepConfig::default();
        bad.epsilons = vec![0.0];
        assert!(epsilon_sweep(&sys.pipeline, &bad, &mut RngState::new(0)).is_err());
        let mut bad = EpsilonSweepConfig::default();
        bad.images = 0;
        assert!(epsilon_sweep(&sys.pipeline, &bad, &mut RngState::new(0)).is_err());
    }
}
