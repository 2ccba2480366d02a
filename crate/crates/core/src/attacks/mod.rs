//! Patch attacks: white-box first-order (PGD, C&W), black-box (differential
//! evolution on one pixel), adaptive (C&W through the straight-through
//! residual), location brute force, and substitute transfer.
//!
//! Every attack obeys the same contract: pixels outside the patch mask are
//! bit-identical to the clean image, and pixels inside stay in the unit box.
//! Attacks report classifier-level success; detector evaluation is layered
//! on by the experiment harnesses so one crafted image can be scored at many
//! `kappa` values.

pub mod brute;
pub mod cw;
pub mod pgd;
pub mod pixel;
pub mod transfer;

pub use brute::{brute_force_locations, BruteForceReport, PlacementSearch};
pub use cw::{adaptive_cw, masked_cw, AdaptiveCwConfig, AdaptiveOutcome, CwConfig};
pub use pgd::{masked_pgd, PgdConfig};
pub use pixel::{single_pixel_attack, PixelConfig};
pub use transfer::{evaluate_transfer, transfer_pgd, TransferReport};

use ndarray::{Array1, Array3};

use crate::data::{ImageTensor, PatchMask};
use crate::error::Result;
use crate::neural::{softmax, Network};

/// White-box view of a classifier: logits and their input gradients.
pub trait LogitsOracle {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &ImageTensor) -> Result<Array1<f64>>;
    /// Gradient of `sum_j upstream[j] * Z_j(x)` with respect to `x`.
    fn logits_gradient(&self, x: &ImageTensor, upstream: &Array1<f64>)
        -> Result<Array3<f64>>;
}

impl LogitsOracle for Network {
    fn num_classes(&self) -> usize {
        self.output_dim()
    }

    fn logits(&self, x: &ImageTensor) -> Result<Array1<f64>> {
        self.forward(&x.data)
    }

    fn logits_gradient(
        &self,
        x: &ImageTensor,
        upstream: &Array1<f64>,
    ) -> Result<Array3<f64>> {
        self.input_gradient(&x.data, upstream)
    }
}

/// Black-box view of a classifier: class probabilities only.
pub trait ProbabilityOracle {
    fn num_classes(&self) -> usize;
    fn probabilities(&self, x: &ImageTensor) -> Result<Array1<f64>>;
}

impl<T: LogitsOracle> ProbabilityOracle for T {
    fn num_classes(&self) -> usize {
        LogitsOracle::num_classes(self)
    }

    fn probabilities(&self, x: &ImageTensor) -> Result<Array1<f64>> {
        Ok(softmax(&self.logits(x)?))
    }
}

/// What an attack produced.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub x_adv: ImageTensor,
    /// The attack's classification objective was met (exact model evaluation).
    pub success: bool,
    /// Gradient steps or fitness evaluations spent.
    pub iterations: usize,
    /// Whole-image L2 distance to the clean input.
    pub l2: f64,
    /// Whole-image L-infinity distance to the clean input.
    pub linf: f64,
    /// The region the attack was allowed to touch.
    pub mask: Option<PatchMask>,
}

impl AttackOutcome {
    pub(crate) fn measured(
        x: &ImageTensor,
        x_adv: ImageTensor,
        success: bool,
        iterations: usize,
        mask: Option<PatchMask>,
    ) -> Self {
        let l2 = x_adv.l2_distance(x);
        let linf = x_adv.linf_distance(x);
        AttackOutcome {
            x_adv,
            success,
            iterations,
            l2,
            linf,
            mask,
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use ndarray::{Array1, Array3};

    /// Analytic linear model: `Z_j = sum_i A_j[i] * x[i] + b_j`. Gradients
    /// are exact, so attack mechanics can be verified without training.
    pub struct LinearModel {
        pub weights: Vec<Array3<f64>>,
        pub bias: Vec<f64>,
    }

    impl LogitsOracle for LinearModel {
        fn num_classes(&self) -> usize {
            self.weights.len()
        }

        fn logits(&self, x: &ImageTensor) -> Result<Array1<f64>> {
            Ok(Array1::from_iter(self.weights.iter().zip(&self.bias).map(
                |(w, b)| w.iter().zip(x.data.iter()).map(|(a, v)| a * v).sum::<f64>() + b,
            )))
        }

        fn logits_gradient(
            &self,
            x: &ImageTensor,
            upstream: &Array1<f64>,
        ) -> Result<Array3<f64>> {
            let mut g = Array3::zeros(x.data.dim());
            for (w, &u) in self.weights.iter().zip(upstream.iter()) {
                if u != 0.0 {
                    g.zip_mut_with(w, |acc, &a| *acc += u * a);
                }
            }
            Ok(g)
        }
    }

    /// Two-class model whose decision depends only on the masked region:
    /// class 0 grows with masked brightness, class 1 shrinks with it. The
    /// bias is set so class 0 wins whenever mean masked brightness exceeds
    /// 0.3 — attackable by darkening the patch, impossible otherwise.
    pub fn masked_brightness_model(
        mask: &PatchMask,
        channels: usize,
        scale: f64,
    ) -> LinearModel {
        let dims = (channels, mask.image_height(), mask.image_width());
        let mut w0 = Array3::zeros(dims);
        for c in 0..channels {
            for r in mask.top()..mask.top() + mask.patch_height() {
                for col in mask.left()..mask.left() + mask.patch_width() {
                    w0[[c, r, col]] = scale;
                }
            }
        }
        let w1 = -&w0;
        let bias1 = 0.6 * scale * (mask.area() * channels) as f64;
        LinearModel {
            weights: vec![w0, w1],
            bias: vec![0.0, bias1],
        }
    }

    /// Assert the attack contract: untouched outside the mask, unit box inside.
    pub fn assert_mask_contract(x: &ImageTensor, x_adv: &ImageTensor, mask: &PatchMask) {
        assert!(x_adv.all_in_unit_box());
        for c in 0..x.channels() {
            for r in 0..x.height() {
                for col in 0..x.width() {
                    if !mask.contains(r, col) {
                        assert!(
                            x.data[[c, r, col]].to_bits() == x_adv.data[[c, r, col]].to_bits(),
                            "pixel ({c},{r},{col}) outside the mask changed"
                        );
                    }
                }
            }
        }
    }
}
