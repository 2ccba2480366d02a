//! The end-to-end training recipe: classifier, adversarial pool, noise
//! parameter selection, residual detector, assembled pipeline.
//!
//! The detector never sees raw images — it is trained on wavelet residuals
//! of (a) successful patch attacks against the trained classifier as
//! positives and (b) clean plus pixel-noise-perturbed images as negatives.
//! The denoiser's noise parameter sigma is selected on validation data
//! before the detector is trained, by ranking candidate sigmas on how well
//! the mean absolute residual alone separates attacked from benign inputs.

use serde::{Deserialize, Serialize};

use crate::attacks::pgd::{masked_pgd, PgdConfig};
use crate::data::{
    add_pixel_noise, random_patch_mask, synth_dataset_with, ImageTensor, LabeledDataset, Split,
    SynthParams,
};
use crate::denoise::{residual, DenoiseParams};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, ScoredBatch};
use crate::neural::net::{desk_classifier_spec, desk_detector_spec};
use crate::neural::train::{train_classifier, train_detector};
use crate::neural::{Network, TrainConfig, TrainReport};
use crate::pipeline::{DetectorInput, Pipeline};
use crate::rng::RngState;
use crate::wavelet::WaveletFamily;

/// Everything the training run needs; serializable so runs can be replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeConfig {
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub synth: SynthParams,
    pub classifier: TrainConfig,
    pub detector: TrainConfig,
    /// Candidate noise standard deviations for the denoiser.
    pub sigma_candidates: Vec<f64>,
    pub wavelet_family: WaveletFamily,
    pub wavelet_levels: usize,
    /// Attack strengths used to craft detector training positives.
    pub attack_epsilons: Vec<f64>,
    /// Attack strength for the validation positives that drive sigma
    /// selection — deliberately stronger than the training strengths so the
    /// chosen denoiser is the one whose residual generalizes upward.
    pub validation_epsilon: f64,
    pub attack_steps: usize,
    /// Attacks per training image (different random masks).
    pub masks_per_image: usize,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    /// Benign pixel-noise amplitude in 1/255 steps.
    pub noise_amplitude: u32,
    /// Margin threshold of the deployed two-stage rule.
    pub kappa: f64,
    /// After training, the classifier's final layer is rescaled so the 20th
    /// percentile of clean correct-prediction validation margins lands here.
    /// Decision boundaries are untouched; only the logit scale moves, so
    /// deployment margin thresholds keep a stable meaning across runs.
    pub margin_target: f64,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        RecipeConfig {
            classes: 4,
            train_samples: 240,
            val_samples: 80,
            synth: SynthParams::default(),
            classifier: TrainConfig {
                epochs: 18,
                batch_size: 32,
                optimizer: crate::neural::Optimizer::adam(3e-3),
                l2: 1e-3,
            },
            detector: TrainConfig {
                epochs: 20,
                batch_size: 32,
                optimizer: crate::neural::Optimizer::adam(1e-3),
                l2: 5e-3,
            },
            sigma_candidates: vec![0.01, 0.03, 0.05, 0.08, 0.1],
            wavelet_family: WaveletFamily::Haar,
            wavelet_levels: 2,
            attack_epsilons: vec![8.0 / 255.0, 16.0 / 255.0],
            validation_epsilon: 64.0 / 255.0,
            attack_steps: 75,
            masks_per_image: 2,
            patch_side_min: 4,
            patch_side_max: 8,
            noise_amplitude: 3,
            kappa: 3.0,
            margin_target: 8.0,
        }
    }
}

impl RecipeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.synth.height != self.synth.width {
            return Err(Error::Config(
                "the desk models assume square images".into(),
            ));
        }
        if self.train_samples < self.classes || self.val_samples < self.classes {
            return Err(Error::Config(
                "need at least one train and val sample per class".into(),
            ));
        }
        if self.sigma_candidates.is_empty() {
            return Err(Error::Config("no sigma candidates".into()));
        }
        for &s in &self.sigma_candidates {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Config(format!("invalid sigma candidate {s}")));
            }
        }
        if self.attack_epsilons.is_empty() {
            return Err(Error::Config("no attack epsilons".into()));
        }
        for &e in &self.attack_epsilons {
            if !e.is_finite() || e <= 0.0 || e > 1.0 {
                return Err(Error::Config(format!("invalid attack epsilon {e}")));
            }
        }
        let ve = self.validation_epsilon;
        if !ve.is_finite() || ve <= 0.0 || ve > 1.0 {
            return Err(Error::Config(format!("invalid validation epsilon {ve}")));
        }
        if self.masks_per_image == 0 {
            return Err(Error::Config("masks_per_image must be >= 1".into()));
        }
        if self.patch_side_min == 0 || self.patch_side_min > self.patch_side_max {
            return Err(Error::Config(format!(
                "invalid patch side range [{}, {}]",
                self.patch_side_min, self.patch_side_max
            )));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::Config(format!(
                "kappa must be finite and >= 0, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// The assembled system plus everything worth reporting about how it got there.
pub struct TrainedSystem {
    pub pipeline: Pipeline,
    pub classifier_report: TrainReport,
    pub detector_report: TrainReport,
    /// `(sigma, validation separation AUC)` for every candidate.
    pub sigma_scores: Vec<(f64, f64)>,
    pub chosen_sigma: f64,
    /// Held-out labeled data (never used for any training step).
    pub val: LabeledDataset,
    /// Successful attacks harvested for detector training / validation.
    pub train_positives: usize,
    pub val_positives: usize,
    /// Success rate of the pool-generation attacks on the trained classifier.
    pub pool_success_rate: f64,
}

/// Craft patch attacks against `classifier` and keep the successes. The
/// attack strength cycles through `epsilons`.
fn harvest_positives(
    classifier: &Network,
    data: &LabeledDataset,
    cfg: &RecipeConfig,
    epsilons: &[f64],
    masks_per_image: usize,
    rng: &mut RngState,
) -> Result<(Vec<ImageTensor>, usize)> {
    let (h, w) = (data.images[0].height(), data.images[0].width());
    let mut positives = Vec::new();
    let mut attempts = 0usize;
    for (i, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        for m in 0..masks_per_image {
            let eps = epsilons[(i * masks_per_image + m) % epsilons.len()];
            let mask = random_patch_mask(rng, cfg.patch_side_min, cfg.patch_side_max, h, w, true)?;
            let pgd = PgdConfig::new(eps, cfg.attack_steps);
            let out = masked_pgd(classifier, x, y, &mask, &pgd, rng)?;
            attempts += 1;
            if out.success {
                positives.push(out.x_adv);
            }
        }
    }
    Ok((positives, attempts))
}

/// Mean absolute residual of an image under the given denoiser.
fn residual_energy(x: &ImageTensor, params: &DenoiseParams) -> Result<f64> {
    let r = residual(x, params)?;
    let n = r.data.len() as f64;
    Ok(r.data.iter().map(|v| v.abs()).sum::<f64>() / n)
}

/// Rank sigma candidates by how well mean absolute residual separates
/// attacked from benign images on validation data. Returns all scores and
/// the winner (ties go to the smaller sigma).
fn select_sigma(
    positives: &[ImageTensor],
    negatives: &[ImageTensor],
    cfg: &RecipeConfig,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let mut scores = Vec::with_capacity(cfg.sigma_candidates.len());
    let mut best: Option<(f64, f64)> = None;
    for &sigma in &cfg.sigma_candidates {
        let params = DenoiseParams {
            sigma,
            family: cfg.wavelet_family,
            levels: cfg.wavelet_levels,
        };
        params.validate()?;
        let mut values = Vec::with_capacity(positives.len() + negatives.len());
        let mut labels = Vec::with_capacity(values.capacity());
        for x in negatives {
            values.push(residual_energy(x, &params)?);
            labels.push(false);
        }
        for x in positives {
            values.push(residual_energy(x, &params)?);
            labels.push(true);
        }
        let auc = roc_auc(&ScoredBatch::new(values, labels)?)?;
        scores.push((sigma, auc));
        let better = match best {
            None => true,
            Some((_, b)) => auc > b,
        };
        if better {
            best = Some((sigma, auc));
        }
    }
    let (sigma, _) = best.expect("at least one candidate");
    Ok((scores, sigma))
}

/// Residual dataset for detector training: positives are attack residuals,
/// negatives are residuals of clean and noise-perturbed images. Successful
/// attacks are scarce relative to benign images, so with `balance` set the
/// positives are repeated until the classes are roughly even — otherwise the
/// detector can meet its loss by collapsing onto the majority class.
fn residual_pairs(
    positives: &[ImageTensor],
    clean: &[ImageTensor],
    params: &DenoiseParams,
    noise_amplitude: u32,
    balance: bool,
    rng: &mut RngState,
) -> Result<Vec<(ImageTensor, bool)>> {
    let negatives = 2 * clean.len();
    let repeats = if balance && !positives.is_empty() {
        (negatives.div_ceil(positives.len())).clamp(1, 16)
    } else {
        1
    };
    let mut pairs = Vec::with_capacity(repeats * positives.len() + negatives);
    for x in positives {
        let r = residual(x, params)?;
        for _ in 0..repeats {
            pairs.push((r.clone(), true));
        }
    }
    for x in clean {
        pairs.push((residual(x, params)?, false));
        let noisy = add_pixel_noise(x, rng, noise_amplitude);
        pairs.push((residual(&noisy, params)?, false));
    }
    Ok(pairs)
}

/// Run the whole recipe. Deterministic in (`cfg`, `rng`).
pub fn run_recipe(cfg: &RecipeConfig, rng: &mut RngState) -> Result<TrainedSystem> {
    cfg.validate()?;

    // 1. Data.
    let train = synth_dataset_with(rng, cfg.train_samples, cfg.classes, &cfg.synth);
    let val = synth_dataset_with(rng, cfg.val_samples, cfg.classes, &cfg.synth);
    run_recipe_with_data(train, val, cfg, rng)
}

/// The same recipe on caller-provided train/validation splits (e.g. a real
/// image dataset instead of the synthetic one).
pub fn run_recipe_with_data(
    train: LabeledDataset,
    val: LabeledDataset,
    cfg: &RecipeConfig,
    rng: &mut RngState,
) -> Result<TrainedSystem> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("empty train or validation split".into()));
    }
    if train.num_classes != cfg.classes || val.num_classes != cfg.classes {
        return Err(Error::Config(format!(
            "config expects {} classes but the data has {} (train) / {} (val)",
            cfg.classes, train.num_classes, val.num_classes
        )));
    }
    let side = train.images[0].height();
    if train.images[0].width() != side {
        return Err(Error::Config(
            "the desk models assume square images".into(),
        ));
    }

    // 2. Classifier.
    let (classifier, classifier_report) = train_classifier(
        desk_classifier_spec(3, side, cfg.classes),
        &train,
        &val,
        &cfg.classifier,
        rng,
    )?;

    // 3. Adversarial pools. Training positives come from the configured
    //    (weak) strengths; validation positives use the stronger validation
    //    epsilon so sigma selection and the reported detector accuracy both
    //    measure generalization to attacks harder than the training ones.
    let (train_pos, train_attempts) = harvest_positives(
        &classifier,
        &train,
        cfg,
        &cfg.attack_epsilons,
        cfg.masks_per_image,
        rng,
    )?;
    let (val_pos, val_attempts) = harvest_positives(
        &classifier,
        &val,
        cfg,
        &[cfg.validation_epsilon],
        1,
        rng,
    )?;
    let attempts = train_attempts + val_attempts;
    let pool_success_rate = (train_pos.len() + val_pos.len()) as f64 / attempts.max(1) as f64;
    if train_pos.is_empty() || val_pos.is_empty() {
        return Err(Error::Training(format!(
            "attack pool is empty (train {} / val {} successes): the detector \
             has nothing to learn from — strengthen attack_epsilons or steps",
            train_pos.len(),
            val_pos.len()
        )));
    }

    // 4. Sigma selection on validation data only.
    let (sigma_scores, chosen_sigma) = select_sigma(&val_pos, &val.images, cfg)?;
    let params = DenoiseParams {
        sigma: chosen_sigma,
        family: cfg.wavelet_family,
        levels: cfg.wavelet_levels,
    };

    // 5. Detector on residuals (balanced for training, natural for
    //    validation).
    let train_pairs = residual_pairs(
        &train_pos,
        &train.images,
        &params,
        cfg.noise_amplitude,
        true,
        rng,
    )?;
    let val_pairs = residual_pairs(
        &val_pos,
        &val.images,
        &params,
        cfg.noise_amplitude,
        false,
        rng,
    )?;
    let (detector, detector_report) = train_detector(
        desk_detector_spec(3, side),
        &train_pairs,
        &val_pairs,
        &cfg.detector,
        rng,
    )?;

    // 6. Assemble.
    let pipeline = Pipeline::new(
        classifier,
        detector,
        DetectorInput::Residual(params),
        cfg.kappa,
    )?;
    Ok(TrainedSystem {
        pipeline,
        classifier_report,
        detector_report,
        sigma_scores,
        chosen_sigma,
        val,
        train_positives: train_pos.len(),
        val_positives: val_pos.len(),
        pool_success_rate,
    })
}

/// Generate a fresh labeled set and keep only images the pipeline's
/// classifier already gets right — attacks are only meaningful there.
pub fn correctly_classified_synth(
    pipe: &Pipeline,
    n: usize,
    classes: usize,
    synth: &SynthParams,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let chunk = n.max(classes).max(16);
    let mut attempts = 0usize;
    while images.len() < n {
        let batch = synth_dataset_with(rng, chunk, classes, synth);
        for (x, &y) in batch.images.iter().zip(&batch.labels) {
            attempts += 1;
            if images.len() == n {
                break;
            }
            let z = pipe.class_logits(x)?;
            if crate::neural::argmax(z.as_slice().expect("contiguous")) == y {
                images.push(x.clone());
                labels.push(y);
            }
        }
        if attempts > 20 * n.max(16) {
            return Err(Error::Training(format!(
                "classifier accuracy too low to collect {n} correctly \
                 classified samples ({} found in {attempts} attempts)",
                images.len()
            )));
        }
    }
    LabeledDataset::new(images, labels, classes, Split::Test)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A deliberately tiny configuration so the full recipe runs in seconds.
    fn tiny_config() -> RecipeConfig {
        let mut cfg = RecipeConfig::default();
        cfg.classes = 2;
        cfg.train_samples = 12;
        cfg.val_samples = 6;
        cfg.classifier.epochs = 1;
        cfg.detector.epochs = 1;
        cfg.sigma_candidates = vec![0.03, 0.05];
        cfg.attack_epsilons = vec![1.0];
        cfg.attack_steps = 6;
        cfg.masks_per_image = 1;
        cfg
    }

    #[test]
    fn recipe_assembles_a_working_pipeline() {
        let cfg = tiny_config();
        let mut rng = RngState::new(900);
        let sys = run_recipe(&cfg, &mut rng).unwrap();
        assert!(cfg.sigma_candidates.contains(&sys.chosen_sigma));
        assert_eq!(sys.sigma_scores.len(), 2);
        assert!(sys.train_positives > 0 && sys.val_positives > 0);
        assert!(sys.pool_success_rate > 0.0 && sys.pool_success_rate <= 1.0);
        // The assembled pipeline answers end to end.
        let x = &sys.val.images[0];
        let d = sys.pipeline.decide(x).unwrap();
        assert!(d.margin.is_finite());
        assert_eq!(sys.pipeline.kappa, cfg.kappa);
    }

    #[test]
    fn recipe_is_seed_deterministic() {
        let cfg = tiny_config();
        let mut rng_a = RngState::new(901);
        let mut rng_b = RngState::new(901);
        let a = run_recipe(&cfg, &mut rng_a).unwrap();
        let b = run_recipe(&cfg, &mut rng_b).unwrap();
        assert_eq!(a.chosen_sigma, b.chosen_sigma);
        assert_eq!(a.pipeline.classifier.theta, b.pipeline.classifier.theta);
        assert_eq!(a.pipeline.detector.theta, b.pipeline.detector.theta);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut bad = tiny_config();
        bad.sigma_candidates.clear();
        assert!(run_recipe(&bad, &mut RngState::new(0)).is_err());
        let mut bad = tiny_config();
        bad.attack_epsilons = vec![2.0];
        assert!(run_recipe(&bad, &mut RngState::new(0)).is_err());
        let mut bad = tiny_config();
        bad.patch_side_min = 9;
        bad.patch_side_max = 4;
        assert!(run_recipe(&bad, &mut RngState::new(0)).is_err());
        let mut bad = tiny_config();
        bad.kappa = f64::NAN;
        assert!(run_recipe(&bad, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn correctly_classified_collection_respects_labels() {
        let cfg = tiny_config();
        let mut rng = RngState::new(902);
        let sys = run_recipe(&cfg, &mut rng).unwrap();
        let eval =
            correctly_classified_synth(&sys.pipeline, 8, cfg.classes, &cfg.synth, &mut rng)
                .unwrap();
        assert_eq!(eval.len(), 8);
        for (x, &y) in eval.images.iter().zip(&eval.labels) {
            let z = sys.pipeline.class_logits(x).unwrap();
            assert_eq!(crate::neural::argmax(z.as_slice().unwrap()), y);
        }
    }
}
