//! Single-pixel attack by differential evolution.
//!
//! A candidate is `(row, col, r, g, b)`: one pixel replaced outright. The
//! population evolves by rand/1 mutation with greedy selection — no
//! crossover, no gradients, only probability queries — making this the
//! black-box reference point for the attack suite.

use crate::data::{ImageTensor, PatchMask};
use crate::error::{Error, Result};
use crate::rng::RngState;

use super::{AttackOutcome, ProbabilityOracle};

/// Configuration for [`single_pixel_attack`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelConfig {
    /// Class the attack drives the prediction toward.
    pub target: usize,
    /// Population size.
    pub population: usize,
    /// Maximum generations.
    pub generations: usize,
    /// Differential weight `F` in `v = a + F * (b - c)`.
    pub differential_weight: f64,
}

impl PixelConfig {
    pub fn new(target: usize) -> Self {
        PixelConfig {
            target,
            population: 75,
            generations: 200,
            differential_weight: 0.5,
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if self.target >= classes {
            return Err(Error::Config(format!(
                "pixel-attack target {} out of range for {classes} classes",
                self.target
            )));
        }
        if self.population < 4 {
            return Err(Error::Config(
                "differential evolution needs a population of at least 4".into(),
            ));
        }
        if self.generations == 0 {
            return Err(Error::Config("pixel attack needs at least one generation".into()));
        }
        if !self.differential_weight.is_finite() || self.differential_weight <= 0.0 {
            return Err(Error::Config(format!(
                "differential weight must be positive, got {}",
                self.differential_weight
            )));
        }
        Ok(())
    }
}

/// A candidate in continuous encoding; clamped on application.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    coords: [f64; 5],
}

impl Candidate {
    fn random(rng: &mut RngState, height: usize, width: usize) -> Candidate {
        Candidate {
            coords: [
                rng.uniform(0.0, height as f64),
                rng.uniform(0.0, width as f64),
                rng.uniform(0.0, 1.0),
                rng.uniform(0.0, 1.0),
                rng.uniform(0.0, 1.0),
            ],
        }
    }

    fn pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let row = (self.coords[0].round().max(0.0) as usize).min(height - 1);
        let col = (self.coords[1].round().max(0.0) as usize).min(width - 1);
        (row, col)
    }

    fn apply(&self, x: &ImageTensor) -> ImageTensor {
        let (row, col) = self.pixel(x.height(), x.width());
        let mut out = x.clone();
        for c in 0..x.channels() {
            out.data[[c, row, col]] = self.coords[2 + c.min(2)].clamp(0.0, 1.0);
        }
        out
    }
}

/// Drive the prediction for `x` toward `cfg.target` by changing one pixel.
/// Fitness is the target-class probability; a candidate wins outright when
/// the target becomes the argmax. `iterations` counts model queries.
pub fn single_pixel_attack(
    model: &dyn ProbabilityOracle,
    x: &ImageTensor,
    cfg: &PixelConfig,
    rng: &mut RngState,
) -> Result<AttackOutcome> {
    cfg.validate(model.num_classes())?;
    let (h, w) = (x.height(), x.width());
    let mut queries = 0usize;

    let fitness = |cand: &Candidate, queries: &mut usize| -> Result<(f64, bool)> {
        let x_adv = cand.apply(x);
        let p = model.probabilities(&x_adv)?;
        *queries += 1;
        let target_p = p[cfg.target];
        let is_argmax = p
            .iter()
            .enumerate()
            .all(|(i, &v)| i == cfg.target || v < target_p);
        Ok((target_p, is_argmax))
    };

    // Population init + evaluation.
    let mut pop: Vec<Candidate> = (0..cfg.population)
        .map(|_| Candidate::random(rng, h, w))
        .collect();
    let mut fit = Vec::with_capacity(cfg.population);
    for cand in &pop {
        let (f, wins) = fitness(cand, &mut queries)?;
        if wins {
            let mask = pixel_mask(cand, h, w)?;
            return Ok(AttackOutcome::measured(
                x,
                cand.apply(x),
                true,
                queries,
                Some(mask),
            ));
        }
        fit.push(f);
    }

    for _ in 0..cfg.generations {
        for i in 0..cfg.population {
            // rand/1: three distinct donors, none equal to i.
            let mut pick = || loop {
                let j = rng.uniform_usize(cfg.population);
                if j != i {
                    return j;
                }
            };
            let (a, b, c) = loop {
                let (a, b, c) = (pick(), pick(), pick());
                if a != b && b != c && a != c {
                    break (a, b, c);
                }
            };
            let mut trial = Candidate { coords: [0.0; 5] };
            for k in 0..5 {
                trial.coords[k] = pop[a].coords[k]
                    + cfg.differential_weight * (pop[b].coords[k] - pop[c].coords[k]);
            }
            trial.coords[0] = trial.coords[0].clamp(0.0, (h - 1) as f64);
            trial.coords[1] = trial.coords[1].clamp(0.0, (w - 1) as f64);
            for k in 2..5 {
                trial.coords[k] = trial.coords[k].clamp(0.0, 1.0);
            }

            let (f_trial, wins) = fitness(&trial, &mut queries)?;
            if wins {
                let mask = pixel_mask(&trial, h, w)?;
                return Ok(AttackOutcome::measured(
                    x,
                    trial.apply(x),
                    true,
                    queries,
                    Some(mask),
                ));
            }
            // Greedy selection.
            if f_trial > fit[i] {
                pop[i] = trial;
                fit[i] = f_trial;
            }
        }
    }

    // Failure: return the fittest survivor.
    let best = fit
        .iter()
        .enumerate()
        .max_by(|l, r| l.1.partial_cmp(r.1).expect("finite fitness"))
        .map(|(i, _)| i)
        .expect("non-empty population");
    let cand = pop[best];
    let mask = pixel_mask(&cand, h, w)?;
    Ok(AttackOutcome::measured(
        x,
        cand.apply(x),
        false,
        queries,
        Some(mask),
    ))
}

fn pixel_mask(cand: &Candidate, h: usize, w: usize) -> Result<PatchMask> {
    let (row, col) = cand.pixel(h, w);
    PatchMask::new(row, col, 1, 1, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::testutil::LinearModel;
    use ndarray::Array3;

    /// Class 1 likes a bright pixel near (r0, c0): weights fall off smoothly
    /// with distance, so evolution has a gradient to follow. The class-0
    /// bias absorbs the clean image's contribution plus a margin of 2, so
    /// only a bright pixel within a few cells of the bump flips the label.
    fn bump_model(h: usize, w: usize, r0: usize, c0: usize, clean_level: f64) -> LinearModel {
        let w1 = Array3::from_shape_fn((3, h, w), |(_, r, c)| {
            let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
            8.0 * (-d2 / 18.0).exp()
        });
        let w0 = Array3::zeros((3, h, w));
        let bias0 = clean_level * w1.sum() + 2.0;
        LinearModel {
            weights: vec![w0, w1],
            bias: vec![bias0, 0.0],
        }
    }

    #[test]
    fn finds_the_sensitive_pixel() {
        let (h, w) = (16, 16);
        let model = bump_model(h, w, 11, 4, 0.1);
        // Dark image: class 0's bias wins until a bright pixel lands near the bump.
        let x = ImageTensor::from_fn(3, h, w, |_| 0.1).unwrap();
        let p0 = model.probabilities(&x).unwrap();
        assert!(p0[0] > p0[1], "clean image must start at class 0");
        let mut cfg = PixelConfig::new(1);
        cfg.generations = 60;
        let mut rng = RngState::new(17);
        let out = single_pixel_attack(&model, &x, &cfg, &mut rng).unwrap();
        assert!(out.success, "evolution should locate the bump");
        let mask = out.mask.as_ref().unwrap();
        assert_eq!(mask.area(), 1);
        // Exactly one pixel differs from the clean image.
        let mut changed = 0;
        for r in 0..h {
            for c in 0..w {
                if (0..3).any(|ch| x.data[[ch, r, c]] != out.x_adv.data[[ch, r, c]]) {
                    changed += 1;
                    assert!(mask.contains(r, c));
                }
            }
        }
        assert_eq!(changed, 1);
        assert!(out.x_adv.all_in_unit_box());
    }

    #[test]
    fn already_satisfied_target_succeeds_in_initialization() {
        let (h, w) = (16, 16);
        // Class 1 wins everywhere regardless of the candidate.
        let model = LinearModel {
            weights: vec![Array3::zeros((3, h, w)), Array3::zeros((3, h, w))],
            bias: vec![0.0, 1.0],
        };
        let x = ImageTensor::from_fn(3, h, w, |_| 0.4).unwrap();
        let cfg = PixelConfig::new(1);
        let mut rng = RngState::new(5);
        let out = single_pixel_attack(&model, &x, &cfg, &mut rng).unwrap();
        assert!(out.success);
        assert_eq!(out.iterations, 1, "first evaluated candidate already wins");
    }

    #[test]
    fn reports_failure_when_no_pixel_suffices() {
        let (h, w) = (16, 16);
        // Class 0's bias is insurmountable by any single-pixel change.
        let model = LinearModel {
            weights: vec![Array3::zeros((3, h, w)), Array3::zeros((3, h, w))],
            bias: vec![5.0, 0.0],
        };
        let x = ImageTensor::from_fn(3, h, w, |_| 0.4).unwrap();
        let mut cfg = PixelConfig::new(1);
        cfg.population = 8;
        cfg.generations = 3;
        let mut rng = RngState::new(9);
        let out = single_pixel_attack(&model, &x, &cfg, &mut rng).unwrap();
        assert!(!out.success);
        assert_eq!(out.iterations, 8 + 8 * 3);
        let mask = out.mask.as_ref().unwrap();
        assert_eq!(mask.area(), 1);
    }

    #[test]
    fn rejects_bad_configuration() {
        let (h, w) = (16, 16);
        let model = bump_model(h, w, 8, 8, 0.1);
        let x = ImageTensor::from_fn(3, h, w, |_| 0.1).unwrap();
        let mut rng = RngState::new(1);
        assert!(single_pixel_attack(&model, &x, &PixelConfig::new(9), &mut rng).is_err());
        let mut tiny_pop = PixelConfig::new(1);
        tiny_pop.population = 3;
        assert!(single_pixel_attack(&model, &x, &tiny_pop, &mut rng).is_err());
        let mut no_gen = PixelConfig::new(1);
        no_gen.generations = 0;
        assert!(single_pixel_attack(&model, &x, &no_gen, &mut rng).is_err());
    }
}
