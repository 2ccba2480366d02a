//! Experiment harnesses: the measurements behind the headline tables.
//!
//! Attacks are expensive and decisions are cheap, so every harness caches
//! the pipeline's `(Z, Y)` pair per example and re-derives scores and
//! two-stage decisions from the cache. All harnesses are deterministic
//! given their RNG state.

pub mod blackbox;
pub mod cw_compare;
pub mod epsilon;
pub mod heatmap;
pub mod kappa;
pub mod recipe;
pub mod substitute;

pub use blackbox::{
    adaptive_vs_blackbox, pixel_study, AdaptiveCompareConfig, AdaptiveCompareReport,
    PixelStudyConfig, PixelStudyReport,
};
pub use cw_compare::{cw_compare, CwArmReport, CwCompareConfig, CwCompareReport};
pub use epsilon::{
    attack_row, detection_metrics, epsilon_sweep, EpsilonRow, EpsilonSweepConfig,
    EpsilonSweepReport,
};
pub use heatmap::{
    residual_concentration, residual_heatmap, write_heatmap_csv, ConcentrationConfig,
    ConcentrationReport,
};
pub use kappa::{kappa_rows, kappa_sweep, KappaRow, KappaSweepConfig, KappaSweepReport};
pub use recipe::{
    correctly_classified_synth, run_recipe, run_recipe_with_data, RecipeConfig, TrainedSystem,
};
pub use substitute::{
    substitute_study, train_substitute_model, SubstituteConfig, SubstituteReport,
};

use ndarray::Array1;

use crate::data::{add_pixel_noise, ImageTensor};
use crate::detection::{baseline_maxprob_score, detection_score, two_stage_decision};
use crate::error::Result;
use crate::pipeline::Pipeline;
use crate::rng::RngState;

/// Cached joint logits for one example; everything downstream (scores,
/// decisions at any kappa) derives from this without touching the models.
#[derive(Debug, Clone)]
pub struct ScoredExample {
    pub z: Array1<f64>,
    pub y: f64,
}

impl ScoredExample {
    pub fn from_pipeline(pipe: &Pipeline, x: &ImageTensor) -> Result<ScoredExample> {
        let (z, y) = pipe.forward(x)?;
        Ok(ScoredExample { z, y })
    }

    /// The defended system's threshold-free detection score.
    pub fn ours_score(&self) -> Result<f64> {
        detection_score(&self.z, self.y)
    }

    /// The confidence-only baseline score.
    pub fn baseline_score(&self) -> Result<f64> {
        baseline_maxprob_score(&self.z)
    }

    /// Two-stage flag at an arbitrary kappa.
    pub fn flagged_at(&self, kappa: f64) -> Result<bool> {
        Ok(two_stage_decision(&self.z, self.y, kappa)?.flagged)
    }
}

/// Clean and noise-perturbed benign examples, scored once.
#[derive(Debug, Clone)]
pub struct NegativePool {
    pub clean: Vec<ScoredExample>,
    pub noisy: Vec<ScoredExample>,
}

impl NegativePool {
    /// Score each image clean and once more under per-pixel integer noise
    /// of the given amplitude (in 1/255 steps).
    pub fn build(
        pipe: &Pipeline,
        images: &[ImageTensor],
        noise_amplitude: u32,
        rng: &mut RngState,
    ) -> Result<NegativePool> {
        let mut clean = Vec::with_capacity(images.len());
        let mut noisy = Vec::with_capacity(images.len());
        for x in images {
            clean.push(ScoredExample::from_pipeline(pipe, x)?);
            let xn = add_pixel_noise(x, rng, noise_amplitude);
            noisy.push(ScoredExample::from_pipeline(pipe, &xn)?);
        }
        Ok(NegativePool { clean, noisy })
    }

    pub fn all(&self) -> impl Iterator<Item = &ScoredExample> {
        self.clean.iter().chain(self.noisy.iter())
    }

    pub fn len(&self) -> usize {
        self.clean.len() + self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty() && self.noisy.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::DenoiseParams;
    use crate::neural::net::{desk_classifier_spec, desk_detector_spec};
    use crate::neural::Network;
    use crate::pipeline::DetectorInput;

    fn tiny_pipeline() -> Pipeline {
        let mut rng = RngState::new(800);
        let classifier = Network::new(desk_classifier_spec(3, 32, 4), &mut rng).unwrap();
        let detector = Network::new(desk_detector_spec(3, 32), &mut rng).unwrap();
        Pipeline::new(
            classifier,
            detector,
            DetectorInput::Residual(DenoiseParams::default()),
            3.0,
        )
        .unwrap()
    }

    #[test]
    fn scored_example_matches_direct_pipeline_calls() {
        let pipe = tiny_pipeline();
        let mut rng = RngState::new(801);
        let data = crate::data::synth_dataset(&mut rng, 2, 2);
        let x = &data.images[0];
        let s = ScoredExample::from_pipeline(&pipe, x).unwrap();
        assert_eq!(s.ours_score().unwrap(), pipe.detection_score(x).unwrap());
        assert_eq!(
            s.flagged_at(3.0).unwrap(),
            pipe.decide(x).unwrap().flagged
        );
    }

    #[test]
    fn negative_pool_scores_clean_and_noisy_versions() {
        let pipe = tiny_pipeline();
        let mut rng = RngState::new(802);
        let data = crate::data::synth_dataset(&mut rng, 3, 3);
        let pool = NegativePool::build(&pipe, &data.images, 3, &mut rng).unwrap();
        assert_eq!(pool.clean.len(), 3);
        assert_eq!(pool.noisy.len(), 3);
        assert_eq!(pool.len(), 6);
        assert_eq!(pool.all().count(), 6);
    }
}
