//! Margin-threshold sweep: how much protection each kappa buys and what it
//! costs in false positives.
//!
//! Attacks are crafted once; every kappa is then evaluated on the cached
//! `(Z, Y)` pairs. "Protected" means a successful attack is flagged — the
//! misclassification is caught rather than silently accepted.

use serde::{Deserialize, Serialize};

use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::rng::RngState;

use super::epsilon::attack_row;
use super::recipe::correctly_classified_synth;
use super::{NegativePool, ScoredExample};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KappaSweepConfig {
    pub kappas: Vec<f64>,
    /// Attack strengths pooled to build the positives.
    pub pool_epsilons: Vec<f64>,
    pub images: usize,
    pub masks_per_image: usize,
    pub steps: usize,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub noise_amplitude: u32,
    pub synth: SynthParams,
    pub classes: usize,
}

impl Default for KappaSweepConfig {
    fn default() -> Self {
        KappaSweepConfig {
            kappas: vec![0.0, 3.0, 8.0],
            pool_epsilons: vec![16.0 / 255.0, 64.0 / 255.0],
            images: 48,
            masks_per_image: 4,
            steps: 100,
            patch_side_min: 4,
            patch_side_max: 8,
            noise_amplitude: 3,
            synth: SynthParams::default(),
            classes: 4,
        }
    }
}

impl KappaSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappas.is_empty() {
            return Err(Error::Config("kappa sweep needs kappas".into()));
        }
        for &k in &self.kappas {
            if !k.is_finite() || k < 0.0 {
                return Err(Error::Config(format!("invalid kappa {k}")));
            }
        }
        if self.pool_epsilons.is_empty() {
            return Err(Error::Config("kappa sweep needs pool epsilons".into()));
        }
        for &e in &self.pool_epsilons {
            if !e.is_finite() || e <= 0.0 || e > 1.0 {
                return Err(Error::Config(format!("invalid epsilon {e}")));
            }
        }
        if self.images == 0 || self.masks_per_image == 0 || self.steps == 0 {
            return Err(Error::Config(
                "kappa sweep needs images, masks, and steps".into(),
            ));
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
pub struct KappaRow {
    pub kappa: f64,
    pub attacks: usize,
    pub flagged_attacks: usize,
    /// Fraction of successful attacks that are flagged (rendered harmless).
    pub protected_fraction: f64,
    pub negatives: usize,
    pub flagged_negatives: usize,
    pub false_positive_rate: f64,
}

/// Evaluate the two-stage rule at every kappa on cached logits.
pub fn kappa_rows(
    attacks: &[ScoredExample],
    negatives: &[ScoredExample],
    kappas: &[f64],
) -> Result<Vec<KappaRow>> {
    if attacks.is_empty() || negatives.is_empty() {
        return Err(Error::Config(
            "kappa sweep needs both attacks and benign examples".into(),
        ));
    }
    let mut rows = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let mut flagged_attacks = 0usize;
        for s in attacks {
            if s.flagged_at(kappa)? {
                flagged_attacks += 1;
            }
        }
        let mut flagged_negatives = 0usize;
        for s in negatives {
            if s.flagged_at(kappa)? {
                flagged_negatives += 1;
            }
        }
        rows.push(KappaRow {
            kappa,
            attacks: attacks.len(),
            flagged_attacks,
            protected_fraction: flagged_attacks as f64 / attacks.len() as f64,
            negatives: negatives.len(),
            flagged_negatives,
            false_positive_rate: flagged_negatives as f64 / negatives.len() as f64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct KappaSweepReport {
    pub rows: Vec<KappaRow>,
    pub pool_attempts: usize,
    pub pool_successes: usize,
}

/// Craft the attack pool, then sweep kappa on the cached scores.
pub fn kappa_sweep(
    pipe: &Pipeline,
    cfg: &KappaSweepConfig,
    rng: &mut RngState,
) -> Result<KappaSweepReport> {
    cfg.validate()?;
    let eval = correctly_classified_synth(pipe, cfg.images, cfg.classes, &cfg.synth, rng)?;
    let (h, w) = (eval.images[0].height(), eval.images[0].width());
    let negatives = NegativePool::build(pipe, &eval.images, cfg.noise_amplitude, rng)?;

    let mut masks = Vec::with_capacity(eval.len());
    for _ in 0..eval.len() {
        let mut per_image = Vec::with_capacity(cfg.masks_per_image);
        for _ in 0..cfg.masks_per_image {
            per_image.push(crate::data::random_patch_mask(
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

    let mut pool = Vec::new();
    let mut attempts = 0usize;
    for &eps in &cfg.pool_epsilons {
        let (tried, successes) = attack_row(pipe, &eval, &masks, eps, cfg.steps, 1, rng)?;
        attempts += tried;
        pool.extend(successes);
    }
    if pool.is_empty() {
        return Err(Error::Training(
            "kappa sweep attack pool is empty: no successful attacks".into(),
        ));
    }

    let neg: Vec<ScoredExample> = negatives.all().cloned().collect();
    let rows = kappa_rows(&pool, &neg, &cfg.kappas)?;
    Ok(KappaSweepReport {
        rows,
        pool_attempts: attempts,
        pool_successes: pool.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn scored(z: Vec<f64>, y: f64) -> ScoredExample {
        ScoredExample {
            z: Array1::from_vec(z),
            y,
        }
    }

    #[test]
    fn flag_sets_grow_monotonically_with_kappa() {
        // Structural property of the two-stage rule: anything flagged at
        // kappa is still flagged at any larger kappa.
        let mut examples = Vec::new();
        let grid = [-4.0, -1.0, 0.0, 0.5, 2.0, 6.0];
        for &a in &grid {
            for &b in &grid {
                for &y in &[-5.0, -0.5, 0.1, 4.0] {
                    examples.push(scored(vec![a, b, 1.0], y));
                }
            }
        }
        let negs = vec![scored(vec![9.0, 0.0, 0.0], -9.0)];
        let rows = kappa_rows(&examples, &negs, &[0.0, 1.0, 3.0, 8.0]).unwrap();
        for pair in rows.windows(2) {
            assert!(pair[1].flagged_attacks >= pair[0].flagged_attacks);
            assert!(pair[1].flagged_negatives >= pair[0].flagged_negatives);
        }
    }

    #[test]
    fn rows_count_flags_exactly() {
        // kappa = 2: margin below 2 flags; the detector head flags when
        // D_C >= max class logit.
        let attacks = vec![
            scored(vec![5.0, 1.0, 0.0], -10.0), // margin 4: clean pass
            scored(vec![5.0, 4.0, 0.0], -10.0), // margin 1: stage-2 flag
            scored(vec![5.0, 1.0, 0.0], 3.0),   // stage-1 flag
        ];
        let negs = vec![
            scored(vec![7.0, 0.0, 0.0], -10.0), // pass
            scored(vec![7.0, 6.5, 0.0], -10.0), // stage-2 flag
        ];
        let rows = kappa_rows(&attacks, &negs, &[2.0]).unwrap();
        assert_eq!(rows[0].flagged_attacks, 2);
        assert!((rows[0].protected_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rows[0].flagged_negatives, 1);
        assert!((rows[0].false_positive_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_pools_are_rejected() {
        let s = vec![scored(vec![1.0, 0.0], -1.0)];
        assert!(kappa_rows(&[], &s, &[0.0]).is_err());
        assert!(kappa_rows(&s, &[], &[0.0]).is_err());
    }
}
