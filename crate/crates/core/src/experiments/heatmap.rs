//! Residual heatmaps and patch-concentration statistics.
//!
//! The visual claim behind the detector: a patch attack leaves most of its
//! energy in the residual exactly where the patch sits. The heatmap is the
//! channel-mean absolute residual; the concentration statistic compares
//! in-patch residual energy of an attacked image against the same pixels of
//! the clean image.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attacks::pgd::{masked_pgd, PgdConfig};
use crate::csvgrid::write_grid;
use crate::data::{random_patch_mask, ImageTensor, SynthParams};
use crate::denoise::{residual, DenoiseParams};
use crate::error::{Error, Result};
use crate::neural::Network;
use crate::pipeline::Pipeline;
use crate::rng::RngState;

use super::recipe::correctly_classified_synth;

/// Channel-mean absolute residual, one value per pixel.
pub fn residual_heatmap(x: &ImageTensor, params: &DenoiseParams) -> Result<Array2<f64>> {
    let r = residual(x, params)?;
    let (c, h, w) = r.data.dim();
    let mut map = Array2::zeros((h, w));
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                map[[row, col]] += r.data[[ch, row, col]].abs() / c as f64;
            }
        }
    }
    Ok(map)
}

/// Write a heatmap as a plain-text grid, one row per line.
pub fn write_heatmap_csv(path: &std::path::Path, map: &Array2<f64>) -> Result<()> {
    write_grid(path, map)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationConfig {
    /// Successful attacks to accumulate.
    pub samples: usize,
    pub steps: usize,
    pub epsilon: f64,
    pub patch_side_min: usize,
    pub patch_side_max: usize,
    pub synth: SynthParams,
    pub classes: usize,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        ConcentrationConfig {
            samples: 50,
            steps: 60,
            epsilon: 1.0,
            patch_side_min: 4,
            patch_side_max: 8,
            synth: SynthParams::default(),
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub samples: usize,
    /// Mean |R| over attacked-patch pixels, averaged over samples.
    pub adversarial_in_patch: f64,
    /// Mean |R| over the same pixels of the clean images.
    pub clean_in_patch: f64,
    /// `adversarial_in_patch / clean_in_patch`.
    pub ratio: f64,
    /// Per-sample ratios, for distributional checks.
    pub per_sample_ratio: Vec<f64>,
}

/// Accumulate in-patch residual statistics over successful patch attacks.
pub fn residual_concentration(
    pipe: &Pipeline,
    params: &DenoiseParams,
    cfg: &ConcentrationConfig,
    rng: &mut RngState,
) -> Result<ConcentrationReport> {
    if cfg.samples == 0 {
        return Err(Error::Config("concentration needs samples".into()));
    }
    if cfg.patch_side_min == 0 || cfg.patch_side_min > cfg.patch_side_max {
        return Err(Error::Config(format!(
            "invalid patch side range [{}, {}]",
            cfg.patch_side_min, cfg.patch_side_max
        )));
    }
    let pgd = PgdConfig::new(cfg.epsilon, cfg.steps);
    let mut adv_sum = 0.0;
    let mut clean_sum = 0.0;
    let mut ratios = Vec::with_capacity(cfg.samples);
    let mut attempts = 0usize;
    let classifier: &Network = &pipe.classifier;

    while ratios.len() < cfg.samples {
        // Fresh correctly-classified images, small batches at a time.
        let batch =
            correctly_classified_synth(pipe, 8.max(cfg.classes), cfg.classes, &cfg.synth, rng)?;
        for (x, &y) in batch.images.iter().zip(&batch.labels) {
            if ratios.len() == cfg.samples {
                break;
            }
            attempts += 1;
            if attempts > 40 * cfg.samples {
                return Err(Error::Training(format!(
                    "could not accumulate {} successful attacks ({} so far)",
                    cfg.samples,
                    ratios.len()
                )));
            }
            let (h, w) = (x.height(), x.width());
            let mask =
                random_patch_mask(rng, cfg.patch_side_min, cfg.patch_side_max, h, w, true)?;
            let out = masked_pgd(classifier, x, y, &mask, &pgd, rng)?;
            if !out.success {
                continue;
            }
            let r_adv = residual(&out.x_adv, params)?;
            let r_clean = residual(x, params)?;
            let a = r_adv.mean_abs_in_mask(&mask);
            let c = r_clean.mean_abs_in_mask(&mask);
            adv_sum += a;
            clean_sum += c;
            ratios.push(if c > 0.0 { a / c } else { f64::INFINITY });
        }
    }

    let n = ratios.len() as f64;
    let adversarial_in_patch = adv_sum / n;
    let clean_in_patch = clean_sum / n;
    Ok(ConcentrationReport {
        samples: ratios.len(),
        adversarial_in_patch,
        clean_in_patch,
        ratio: if clean_in_patch > 0.0 {
            adversarial_in_patch / clean_in_patch
        } else {
            f64::INFINITY
        },
        per_sample_ratio: ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn heatmap_localizes_an_injected_disturbance() {
        // Smooth image + small sharp blob: the residual heatmap must carry
        // far more mass inside the blob than outside.
        let mut x = ImageTensor::from_fn(3, 32, 32, |(_, r, c)| {
            0.4 + 0.2 * ((r as f64) / 31.0) + 0.1 * ((c as f64) / 31.0)
        })
        .unwrap();
        for r in 12..17 {
            for c in 20..25 {
                for ch in 0..3 {
                    x.data[[ch, r, c]] = if (r + c) % 2 == 0 { 1.0 } else { 0.0 };
                }
            }
        }
        let map = residual_heatmap(&x, &DenoiseParams::default()).unwrap();
        let mut inside = 0.0;
        let mut inside_n = 0.0;
        let mut outside = 0.0;
        let mut outside_n = 0.0;
        for r in 0..32 {
            for c in 0..32 {
                if (12..17).contains(&r) && (20..25).contains(&c) {
                    inside += map[[r, c]];
                    inside_n += 1.0;
                } else {
                    outside += map[[r, c]];
                    outside_n += 1.0;
                }
            }
        }
        assert!(
            inside / inside_n > 5.0 * (outside / outside_n),
            "blob should dominate the heatmap"
        );
    }

    #[test]
    fn heatmap_csv_round_trips_through_the_grid_writer() {
        let x = ImageTensor::from_fn(1, 8, 8, |(_, r, c)| ((r * 8 + c) as f64) / 64.0).unwrap();
        let map = residual_heatmap(&x, &DenoiseParams::default()).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.csv");
        write_heatmap_csv(&path, &map).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 8);
        let first: Vec<f64> = rows[0]
            .split(',')
            .map(|v| v.parse::<f64>().unwrap())
            .collect();
        assert_eq!(first.len(), 8);
        for (i, v) in first.iter().enumerate() {
            assert_eq!(*v, map[[0, i]]);
        }
    }

    #[test]
    fn concentration_rejects_bad_config() {
        let mut rng = RngState::new(0);
        let mut rcfg = crate::experiments::recipe::RecipeConfig::default();
        rcfg.classes = 2;
        rcfg.train_samples = 12;
        rcfg.val_samples = 6;
        rcfg.classifier.epochs = 1;
        rcfg.detector.epochs = 1;
        rcfg.sigma_candidates = vec![0.05];
        rcfg.attack_epsilons = vec![1.0];
        rcfg.attack_steps = 5;
        rcfg.masks_per_image = 1;
        let sys = crate::experiments::recipe::run_recipe(&rcfg, &mut RngState::new(930)).unwrap();
        let mut bad = ConcentrationConfig::default();
        bad.samples = 0;
        assert!(
            residual_concentration(&sys.pipeline, &DenoiseParams::default(), &bad, &mut rng)
                .is_err()
        );
    }
}
