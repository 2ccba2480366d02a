//! The protected model: classifier, residual detector, and decision rule.
//!
//! Exact inference always recomputes the denoiser. For gradient-based
//! adaptive attacks the denoiser is non-differentiable here, so gradients go
//! through a straight-through approximation (BPDA): the residual operator
//! `R(x) = x - denoise(x)` is treated as `dR/dx = I`, with the denoised
//! image held in a cache that refreshes every few iterations. Holding the
//! cache fixed makes `x - denoised_cached` exactly linear in `x`, so the
//! straight-through gradient is the exact gradient *of the cached objective*;
//! staleness, not linearization, is the approximation.

use ndarray::{Array1, Array3};

use crate::data::ImageTensor;
use crate::denoise::{denoise, DenoiseParams};
use crate::detection::{two_stage_decision, DetectionDecision};
use crate::error::{Error, Result};
use crate::neural::Network;

/// What the detector looks at.
#[derive(Debug, Clone)]
pub enum DetectorInput {
    /// The wavelet residual of the input (the defended configuration).
    Residual(DenoiseParams),
    /// The raw image itself (used by substitute detectors; gradients exact).
    Image,
}

/// Classifier + detector + decision rule.
pub struct Pipeline {
    pub classifier: Network,
    pub detector: Network,
    pub detector_input: DetectorInput,
    pub kappa: f64,
}

/// Cached denoiser output for straight-through gradient passes.
pub struct BpdaCache {
    denoised: Option<ImageTensor>,
    age: usize,
    refresh_every: usize,
}

impl BpdaCache {
    pub fn new(refresh_every: usize) -> Result<Self> {
        if refresh_every == 0 {
            return Err(Error::Config("refresh_every must be >= 1".into()));
        }
        Ok(BpdaCache {
            denoised: None,
            age: 0,
            refresh_every,
        })
    }

    /// Residual of `x` against the cached denoised image, refreshing the
    /// cache on the first call and then every `refresh_every` calls.
    pub fn residual_for(&mut self, x: &ImageTensor, params: &DenoiseParams) -> Result<ImageTensor> {
        let stale = match &self.denoised {
            None => true,
            Some(_) => self.age >= self.refresh_every,
        };
        if stale {
            self.denoised = Some(denoise(x, params)?);
            self.age = 0;
        }
        self.age += 1;
        let den = self.denoised.as_ref().expect("cache was just filled");
        Ok(ImageTensor {
            data: &x.data - &den.data,
        })
    }

    pub fn invalidate(&mut self) {
        self.denoised = None;
        self.age = 0;
    }
}

impl Pipeline {
    pub fn new(
        classifier: Network,
        detector: Network,
        detector_input: DetectorInput,
        kappa: f64,
    ) -> Result<Self> {
        if classifier.input_shape() != detector.input_shape() {
            return Err(Error::Config(format!(
                "classifier input {:?} and detector input {:?} differ",
                classifier.input_shape(),
                detector.input_shape()
            )));
        }
        if classifier.output_dim() < 2 {
            return Err(Error::Config("classifier needs >= 2 classes".into()));
        }
        if detector.output_dim() != 1 {
            return Err(Error::Config(format!(
                "detector must emit one logit, got {}",
                detector.output_dim()
            )));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::Config(format!(
                "kappa must be finite and non-negative, got {kappa}"
            )));
        }
        if let DetectorInput::Residual(params) = &detector_input {
            params.validate()?;
        }
        Ok(Pipeline {
            classifier,
            detector,
            detector_input,
            kappa,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Exact detector input for `x` (recomputes the denoiser).
    pub fn detector_view(&self, x: &ImageTensor) -> Result<ImageTensor> {
        match &self.detector_input {
            DetectorInput::Residual(params) => crate::denoise::residual(x, params),
            DetectorInput::Image => Ok(x.clone()),
        }
    }

    /// Exact class logits.
    pub fn class_logits(&self, x: &ImageTensor) -> Result<Array1<f64>> {
        self.classifier.forward(&x.data)
    }

    /// Exact detector logit.
    pub fn detector_logit(&self, x: &ImageTensor) -> Result<f64> {
        let view = self.detector_view(x)?;
        Ok(self.detector.forward(&view.data)?[0])
    }

    /// Exact `(Z, Y)` pair.
    pub fn forward(&self, x: &ImageTensor) -> Result<(Array1<f64>, f64)> {
        Ok((self.class_logits(x)?, self.detector_logit(x)?))
    }

    /// Exact two-stage decision at this pipeline's `kappa`.
    pub fn decide(&self, x: &ImageTensor) -> Result<DetectionDecision> {
        let (z, y) = self.forward(x)?;
        two_stage_decision(&z, y, self.kappa)
    }

    /// Exact threshold-free detection score.
    pub fn detection_score(&self, x: &ImageTensor) -> Result<f64> {
        let (z, y) = self.forward(x)?;
        crate::detection::detection_score(&z, y)
    }

    /// `(Z, Y)` where `Y` sees the cache-approximated residual. Image-input
    /// detectors ignore the cache and are exact.
    pub fn forward_approx(
        &self,
        x: &ImageTensor,
        cache: &mut BpdaCache,
    ) -> Result<(Array1<f64>, f64)> {
        let view = match &self.detector_input {
            DetectorInput::Residual(params) => cache.residual_for(x, params)?,
            DetectorInput::Image => x.clone(),
        };
        Ok((
            self.classifier.forward(&x.data)?,
            self.detector.forward(&view.data)?[0],
        ))
    }

    /// Evaluate an objective `f(Z, Y)` and its input gradient in one pass.
    ///
    /// The callback receives the (cache-approximated) logits and returns the
    /// objective value together with `df/dZ` and `df/dY`. The returned
    /// gradient backpropagates the classifier exactly and the detector
    /// through the straight-through residual (`dR/dx = I`).
    pub fn objective_grad<F>(
        &self,
        x: &ImageTensor,
        cache: &mut BpdaCache,
        f: F,
    ) -> Result<(f64, Array3<f64>)>
    where
        F: FnOnce(&Array1<f64>, f64) -> (f64, Array1<f64>, f64),
    {
        let view = match &self.detector_input {
            DetectorInput::Residual(params) => cache.residual_for(x, params)?,
            DetectorInput::Image => x.clone(),
        };
        let (z, trace_c) = self.classifier.forward_trace(&x.data)?;
        let (ylog, trace_d) = self.detector.forward_trace(&view.data)?;
        let y = ylog[0];
        let (value, dz, dy) = f(&z, y);
        let (_, mut grad) = self.classifier.backward(&trace_c, &dz);
        if dy != 0.0 {
            let upstream = Array1::from_vec(vec![dy]);
            let (_, dview) = self.detector.backward(&trace_d, &upstream);
            grad += &dview;
        }
        Ok((value, grad))
    }
}
