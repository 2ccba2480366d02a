//! BayesShrink wavelet denoising and the residual operator built on it.
//!
//! Each channel is decomposed with [`crate::wavelet::dwt2`]; every detail
//! subband is soft-thresholded with its own BayesShrink threshold while the
//! approximation band passes through untouched; the inverse transform then
//! yields the denoised channel. The residual is the elementwise difference
//! `x - denoise(x)`, so `denoise(x) + residual(x)` reassembles `x`.
//!
//! For a subband with coefficients `c` and assumed noise level `sigma`:
//!
//! - noisy-subband variance estimate: `var_y = mean(c^2)` (biased, divide by N)
//! - signal estimate: `sigma_x = sqrt(max(var_y - sigma^2, 0))`
//! - threshold: `T = sigma^2 / sigma_x`, or `max|c|` when `sigma_x == 0`
//!   (the subband is indistinguishable from noise and is fully suppressed).
//!
//! Outputs are deliberately not clamped to the unit box: clamping would break
//! the exact relationship between the denoised image and the residual.

use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::wavelet::{dwt2, idwt2, WaveletFamily};

/// Residual maps share the image container; values may be negative.
pub type ResidualMap = ImageTensor;

/// Configuration of the denoiser.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseParams {
    /// Assumed additive noise standard deviation, in [0,1] pixel units.
    pub sigma: f64,
    /// Wavelet family used for analysis and synthesis.
    pub family: WaveletFamily,
    /// Number of decomposition levels.
    pub levels: usize,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        DenoiseParams {
            sigma: 0.05,
            family: WaveletFamily::Haar,
            levels: 2,
        }
    }
}

impl DenoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// BayesShrink threshold for one detail subband.
pub fn bayes_threshold(coeffs: &[f64], sigma: f64) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    let n = coeffs.len() as f64;
    let var_y = coeffs.iter().map(|c| c * c).sum::<f64>() / n;
    let signal_var = (var_y - sigma * sigma).max(0.0);
    if signal_var > 0.0 {
        sigma * sigma / signal_var.sqrt()
    } else {
        coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
    }
}

/// Soft shrinkage: shrink magnitude by `t`, zeroing anything below it.
pub fn soft_threshold(value: f64, t: f64) -> f64 {
    value.signum() * (value.abs() - t).max(0.0)
}

/// Deepest denoising decomposition for an `h x w` image: one level shallower
/// than the raw transform limit so the untouched approximation band keeps at
/// least a 2x2 summary of the image.
pub fn max_denoise_levels(height: usize, width: usize) -> usize {
    crate::wavelet::max_levels(height, width).saturating_sub(1)
}

/// Denoise every channel of `x`. Output is not clamped to the unit box.
pub fn denoise(x: &ImageTensor, params: &DenoiseParams) -> Result<ImageTensor> {
    params.validate()?;
    let (channels, height, width) = x.data.dim();
    let deepest = max_denoise_levels(height, width);
    if params.levels > deepest {
        return Err(Error::Config(format!(
            "{} denoising levels exceeds depth {deepest} for {height}x{width}",
            params.levels
        )));
    }
    let mut out = ImageTensor::zeros(channels, height, width)?;
    for ch in 0..channels {
        let plane = x.data.index_axis(ndarray::Axis(0), ch).to_owned();
        let mut decomp = dwt2(&plane, params.family, params.levels)?;
        for level in &mut decomp.details {
            for band in level.bands_mut() {
                let coeffs: Vec<f64> = band.iter().copied().collect();
                let t = bayes_threshold(&coeffs, params.sigma);
                band.mapv_inplace(|c| soft_threshold(c, t));
            }
        }
        let restored = idwt2(&decomp)?;
        out.data
            .index_axis_mut(ndarray::Axis(0), ch)
            .assign(&restored);
    }
    Ok(out)
}

/// Residual operator: `x - denoise(x)`.
pub fn residual(x: &ImageTensor, params: &DenoiseParams) -> Result<ResidualMap> {
    let den = denoise(x, params)?;
    Ok(ImageTensor {
        data: &x.data - &den.data,
    })
}

/// Denoised image and residual computed in one pass; the two sum back to `x`.
pub fn denoise_and_residual(
    x: &ImageTensor,
    params: &DenoiseParams,
) -> Result<(ImageTensor, ResidualMap)> {
    let den = denoise(x, params)?;
    let res = ImageTensor {
        data: &x.data - &den.data,
    };
    Ok((den, res))
}
