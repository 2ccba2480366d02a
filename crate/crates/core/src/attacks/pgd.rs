//! Masked projected gradient descent.
//!
//! Untargeted sign-gradient ascent on the cross-entropy of the true label,
//! restricted to a patch mask. The cumulative perturbation is clamped
//! symmetrically to `[-epsilon, epsilon]` and the perturbed pixels to the
//! unit box; pixels outside the mask are never touched. Each restart begins
//! from an independent uniform draw inside the epsilon ball.

use ndarray::Array3;

use crate::data::{ImageTensor, PatchMask};
use crate::error::{Error, Result};
use crate::neural::{argmax, softmax};
use crate::rng::RngState;

use super::{AttackOutcome, LogitsOracle};

/// Configuration for [`masked_pgd`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    /// Per-pixel perturbation bound in `(0, 1]`.
    pub epsilon: f64,
    /// Gradient steps per restart.
    pub steps: usize,
    /// Step size; `None` uses `2.5 * epsilon / steps`.
    pub step_size: Option<f64>,
    /// Independent random restarts (at least 1).
    pub restarts: usize,
}

impl PgdConfig {
    pub fn new(epsilon: f64, steps: usize) -> Self {
        PgdConfig {
            epsilon,
            steps,
            step_size: None,
            restarts: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 || self.epsilon > 1.0 {
            return Err(Error::Config(format!(
                "pgd epsilon must lie in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("pgd needs at least one step".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("pgd needs at least one restart".into()));
        }
        if let Some(s) = self.step_size {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Config(format!(
                    "pgd step size must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    fn effective_step(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps as f64)
    }
}

/// Apply a masked perturbation: `clamp01(x + delta)` inside the mask,
/// bit-exact copy of `x` outside.
fn apply_masked(x: &ImageTensor, delta: &Array3<f64>, mask: &PatchMask) -> ImageTensor {
    let mut out = x.clone();
    for c in 0..x.channels() {
        for r in mask.top()..mask.top() + mask.patch_height() {
            for col in mask.left()..mask.left() + mask.patch_width() {
                out.data[[c, r, col]] =
                    (x.data[[c, r, col]] + delta[[c, r, col]]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Untargeted masked PGD against `model`. Every restart spends its full step
/// budget ascending the true-class cross-entropy, so successful samples are
/// high-confidence, not barely-over-the-boundary iterates. Success means the
/// final iterate of a restart moves the prediction away from `y_true`; the
/// first successful restart's iterate is returned, or the last restart's when
/// every one fails.
pub fn masked_pgd(
    model: &dyn LogitsOracle,
    x: &ImageTensor,
    y_true: usize,
    mask: &PatchMask,
    cfg: &PgdConfig,
    rng: &mut RngState,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if mask.image_height() != x.height() || mask.image_width() != x.width() {
        return Err(Error::Shape(format!(
            "mask geometry {}x{} does not match image {}x{}",
            mask.image_height(),
            mask.image_width(),
            x.height(),
            x.width()
        )));
    }
    let classes = model.num_classes();
    if y_true >= classes {
        return Err(Error::Config(format!(
            "true label {y_true} out of range for {classes} classes"
        )));
    }

    let step = cfg.effective_step();
    let mut iterations = 0usize;
    let mut last = None;

    for _ in 0..cfg.restarts {
        // Independent start inside the epsilon ball, masked region only.
        let mut delta = Array3::zeros(x.data.dim());
        for c in 0..x.channels() {
            for r in mask.top()..mask.top() + mask.patch_height() {
                for col in mask.left()..mask.left() + mask.patch_width() {
                    delta[[c, r, col]] = rng.uniform(-cfg.epsilon, cfg.epsilon);
                }
            }
        }

        for _ in 0..cfg.steps {
            let x_adv = apply_masked(x, &delta, mask);
            let z = model.logits(&x_adv)?;

            // Ascend the cross-entropy of the true label: dL/dZ = p - onehot.
            let mut upstream = softmax(&z);
            upstream[y_true] -= 1.0;
            let grad = model.logits_gradient(&x_adv, &upstream)?;
            iterations += 1;

            for c in 0..x.channels() {
                for r in mask.top()..mask.top() + mask.patch_height() {
                    for col in mask.left()..mask.left() + mask.patch_width() {
                        let g = grad[[c, r, col]];
                        let s = if g > 0.0 {
                            1.0
                        } else if g < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        delta[[c, r, col]] = (delta[[c, r, col]] + step * s)
                            .clamp(-cfg.epsilon, cfg.epsilon);
                    }
                }
            }
        }

        let x_adv = apply_masked(x, &delta, mask);
        let z = model.logits(&x_adv)?;
        let success = argmax(z.as_slice().expect("contiguous logits")) != y_true;
        if success {
            return Ok(AttackOutcome::measured(
                x,
                x_adv,
                true,
                iterations,
                Some(mask.clone()),
            ));
        }
        last = Some(x_adv);
    }

    Ok(AttackOutcome::measured(
        x,
        last.expect("at least one restart ran"),
        false,
        iterations,
        Some(mask.clone()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::testutil::{assert_mask_contract, masked_brightness_model};
    use crate::data::PatchMask;

    fn mid_gray(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(3, h, w, |_| 0.5).unwrap()
    }

    fn small_mask() -> PatchMask {
        PatchMask::new(4, 4, 6, 5, 32, 32).unwrap()
    }

    #[test]
    fn flips_a_linear_model_inside_the_ball() {
        let mask = small_mask();
        let model = masked_brightness_model(&mask, 3, 1.0);
        let x = mid_gray(32, 32);
        // Class 0 wins on the clean image (brightness 0.5 everywhere).
        let cfg = PgdConfig::new(0.6, 40);
        let mut rng = RngState::new(7);
        let out = masked_pgd(&model, &x, 0, &mask, &cfg, &mut rng).unwrap();
        assert!(out.success, "linear model should be trivially attackable");
        assert_mask_contract(&x, &out.x_adv, &mask);
        assert!(out.linf <= 0.6 + 1e-12);
        let z = model.logits(&out.x_adv).unwrap();
        assert!(z[1] > z[0]);
    }

    #[test]
    fn respects_epsilon_even_when_it_fails() {
        let mask = small_mask();
        let model = masked_brightness_model(&mask, 3, 1.0);
        let x = mid_gray(32, 32);
        // Epsilon too small to flip 0.5-brightness pixels negative in sum.
        let cfg = PgdConfig::new(0.01, 25);
        let mut rng = RngState::new(11);
        let out = masked_pgd(&model, &x, 0, &mask, &cfg, &mut rng).unwrap();
        assert!(!out.success);
        assert!(out.linf <= 0.01 + 1e-12);
        assert_mask_contract(&x, &out.x_adv, &mask);
        assert_eq!(out.iterations, 25);
    }

    #[test]
    fn restarts_accumulate_iterations() {
        let mask = small_mask();
        let model = masked_brightness_model(&mask, 3, 1.0);
        let x = mid_gray(32, 32);
        let mut cfg = PgdConfig::new(0.02, 5);
        cfg.restarts = 3;
        let mut rng = RngState::new(3);
        let out = masked_pgd(&model, &x, 0, &mask, &cfg, &mut rng).unwrap();
        assert!(!out.success);
        assert_eq!(out.iterations, 15);
    }

    #[test]
    fn unrestricted_mask_touches_everything_but_stays_in_box() {
        let mask = PatchMask::new_uncapped(0, 0, 16, 16, 16, 16).unwrap();
        let model = masked_brightness_model(&mask, 3, 1.0);
        let x = ImageTensor::from_fn(3, 16, 16, |(c, r, w)| {
            0.05 + 0.9 * ((c + r + w) % 7) as f64 / 7.0
        })
        .unwrap();
        let cfg = PgdConfig::new(1.0, 30);
        let mut rng = RngState::new(42);
        let out = masked_pgd(&model, &x, 0, &mask, &cfg, &mut rng).unwrap();
        assert!(out.success);
        assert!(out.x_adv.all_in_unit_box());
    }

    #[test]
    fn rejects_bad_configuration() {
        let mask = small_mask();
        let model = masked_brightness_model(&mask, 3, 1.0);
        let x = mid_gray(32, 32);
        let mut rng = RngState::new(0);
        assert!(masked_pgd(&model, &x, 0, &mask, &PgdConfig::new(0.0, 10), &mut rng).is_err());
        assert!(masked_pgd(&model, &x, 0, &mask, &PgdConfig::new(1.5, 10), &mut rng).is_err());
        assert!(masked_pgd(&model, &x, 0, &mask, &PgdConfig::new(0.1, 0), &mut rng).is_err());
        assert!(masked_pgd(&model, &x, 9, &mask, &PgdConfig::new(0.1, 5), &mut rng).is_err());
        let wrong_mask = PatchMask::new(0, 0, 4, 4, 16, 16).unwrap();
        assert!(
            masked_pgd(&model, &x, 0, &wrong_mask, &PgdConfig::new(0.1, 5), &mut rng).is_err()
        );
    }

    #[test]
    fn failed_attack_iterate_comes_from_the_last_restart() {
        let mask = small_mask();
        let model = masked_brightness_model(&mask, 3, 1.0);
        let x = mid_gray(32, 32);
        let mut cfg = PgdConfig::new(0.03, 4);
        cfg.restarts = 2;
        let mut rng_a = RngState::new(5);
        let out = masked_pgd(&model, &x, 0, &mask, &cfg, &mut rng_a).unwrap();

        // Replay: burn the first restart's draws, rerun only the second.
        let mut rng_b = RngState::new(5);
        let mut first_delta = Array3::zeros(x.data.dim());
        for c in 0..x.channels() {
            for r in mask.top()..mask.top() + mask.patch_height() {
                for col in mask.left()..mask.left() + mask.patch_width() {
                    first_delta[[c, r, col]] = rng_b.uniform(-cfg.epsilon, cfg.epsilon);
                }
            }
        }
        let mut single = cfg.clone();
        single.restarts = 1;
        let replay = masked_pgd(&model, &x, 0, &mask, &single, &mut rng_b).unwrap();
        assert_eq!(out.x_adv.data, replay.x_adv.data);
    }
}
