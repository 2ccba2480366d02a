//! Masked Carlini–Wagner attack, plus its adaptive variant that optimizes
//! through the defended pipeline with straight-through residual gradients.
//!
//! The masked pixels are reparameterized as `x_i = (tanh(w_i) + 1) / 2`, so
//! the unit-box constraint holds by construction, and `w` is optimized with
//! Adam on
//!
//! `alpha * ||x_adv - x||^2 + lambda * f(Z(x_adv))`
//!
//! where `f` is the clipped logit margin `max(margin, -kappa_adv)`. With
//! `alpha = 1` the trade-off weight `lambda` is tuned by a geometric
//! bisection that keeps the least-distorted success; with `alpha = 0` the
//! distance term vanishes and a single run at `lambda = 1` suffices.

use ndarray::{Array1, Array3};

use crate::data::{ImageTensor, PatchMask};
use crate::error::{Error, Result};
use crate::neural::train::OptimizerState;
use crate::neural::{argmax, Optimizer};
use crate::pipeline::{BpdaCache, Pipeline};

use super::{AttackOutcome, LogitsOracle};

const LAMBDA_LO: f64 = 1e-2;
const LAMBDA_HI: f64 = 1e10;
/// Clip pixels away from {0, 1} before atanh so `w` stays finite.
const TANH_CLIP: f64 = 1e-6;

/// Configuration shared by [`masked_cw`] and [`adaptive_cw`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwConfig {
    /// `Some(t)`: push the prediction to class `t`. `None`: push it away
    /// from the true label.
    pub target: Option<usize>,
    /// Required logit margin before `f` clips to zero gradient.
    pub kappa_adv: f64,
    /// Adam steps per lambda trial.
    pub iterations: usize,
    /// Adam learning rate on `w`.
    pub lr: f64,
    /// Weight of the squared-distance term (typically 1.0 or 0.0).
    pub alpha: f64,
    /// Geometric bisection steps for lambda (used only when `alpha > 0`).
    pub lambda_steps: usize,
}

impl CwConfig {
    pub fn new(iterations: usize) -> Self {
        CwConfig {
            target: None,
            kappa_adv: 0.0,
            iterations,
            lr: 1e-2,
            alpha: 1.0,
            lambda_steps: 7,
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("cw needs at least one iteration".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "cw learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !self.kappa_adv.is_finite() || self.kappa_adv < 0.0 {
            return Err(Error::Config(format!(
                "cw confidence margin must be >= 0, got {}",
                self.kappa_adv
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "cw distance weight must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.alpha > 0.0 && self.lambda_steps == 0 {
            return Err(Error::Config(
                "cw with a distance term needs at least one lambda step".into(),
            ));
        }
        if let Some(t) = self.target {
            if t >= classes {
                return Err(Error::Config(format!(
                    "cw target {t} out of range for {classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// The attack goal derived from config + true label.
#[derive(Debug, Clone, Copy)]
enum Goal {
    Targeted(usize),
    Untargeted(usize),
}

impl Goal {
    fn from(cfg: &CwConfig, y_true: usize) -> Goal {
        match cfg.target {
            Some(t) => Goal::Targeted(t),
            None => Goal::Untargeted(y_true),
        }
    }

    /// Clipped margin objective `f(Z)` and `df/dZ`.
    ///
    /// Targeted at `t`:   `f = max(max_{i != t} Z_i - Z_t, -kappa)`.
    /// Untargeted from `y`: `f = max(Z_y - max_{i != y} Z_i, -kappa)`.
    fn objective(&self, z: &Array1<f64>, kappa: f64) -> (f64, Array1<f64>) {
        let mut dz = Array1::zeros(z.len());
        let (pivot, sign) = match *self {
            Goal::Targeted(t) => (t, 1.0),
            Goal::Untargeted(y) => (y, -1.0),
        };
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (i, &v) in z.iter().enumerate() {
            if i != pivot && v > best {
                best = v;
                best_idx = i;
            }
        }
        // sign = +1: margin = best_other - Z_t (targeted).
        // sign = -1: margin = Z_y - best_other (untargeted).
        let margin = sign * (best - z[pivot]);
        if margin > -kappa {
            dz[best_idx] = sign;
            dz[pivot] = -sign;
        }
        (margin.max(-kappa), dz)
    }

    /// Exact success: the predicted class satisfies the goal.
    fn satisfied(&self, z: &Array1<f64>) -> bool {
        let pred = argmax(z.as_slice().expect("contiguous logits"));
        match *self {
            Goal::Targeted(t) => pred == t,
            Goal::Untargeted(y) => pred != y,
        }
    }
}

/// Masked pixels lifted to tanh space.
struct MaskedTanh {
    idxs: Vec<[usize; 3]>,
    w: Vec<f64>,
}

impl MaskedTanh {
    fn new(x: &ImageTensor, mask: &PatchMask) -> MaskedTanh {
        let mut idxs = Vec::new();
        let mut w = Vec::new();
        for c in 0..x.channels() {
            for r in mask.top()..mask.top() + mask.patch_height() {
                for col in mask.left()..mask.left() + mask.patch_width() {
                    let v = x.data[[c, r, col]].clamp(TANH_CLIP, 1.0 - TANH_CLIP);
                    idxs.push([c, r, col]);
                    w.push((2.0 * v - 1.0).atanh());
                }
            }
        }
        MaskedTanh { idxs, w }
    }

    fn materialize(&self, x: &ImageTensor) -> ImageTensor {
        let mut out = x.clone();
        for (idx, &wi) in self.idxs.iter().zip(&self.w) {
            out.data[[idx[0], idx[1], idx[2]]] = 0.5 * (wi.tanh() + 1.0);
        }
        out
    }

    /// Chain an image-space gradient through the tanh map.
    fn chain(&self, dx: &Array3<f64>) -> Vec<f64> {
        self.idxs
            .iter()
            .zip(&self.w)
            .map(|(idx, &wi)| {
                let t = wi.tanh();
                dx[[idx[0], idx[1], idx[2]]] * 0.5 * (1.0 - t * t)
            })
            .collect()
    }
}

struct Best {
    x_adv: ImageTensor,
    l2: f64,
}

fn check_mask(mask: &PatchMask, x: &ImageTensor) -> Result<()> {
    if mask.image_height() != x.height() || mask.image_width() != x.width() {
        return Err(Error::Shape(format!(
            "mask geometry {}x{} does not match image {}x{}",
            mask.image_height(),
            mask.image_width(),
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// One Adam run at a fixed `lambda`. Returns the least-distorted successful
/// iterate (if any), the final iterate, and the number of steps consumed.
fn cw_run(
    model: &dyn LogitsOracle,
    x: &ImageTensor,
    goal: Goal,
    mask: &PatchMask,
    cfg: &CwConfig,
    lambda: f64,
) -> Result<(Option<Best>, ImageTensor, usize)> {
    let mut var = MaskedTanh::new(x, mask);
    let opt = Optimizer::adam(cfg.lr);
    let mut state = OptimizerState::new(var.w.len());
    let mut best: Option<Best> = None;
    let mut steps = 0;

    for _ in 0..cfg.iterations {
        let x_adv = var.materialize(x);
        let z = model.logits(&x_adv)?;
        let (f, dz) = goal.objective(&z, cfg.kappa_adv);
        if f <= -cfg.kappa_adv && goal.satisfied(&z) {
            let l2 = x_adv.l2_distance(x);
            if best.as_ref().map_or(true, |b| l2 < b.l2) {
                best = Some(Best {
                    x_adv: x_adv.clone(),
                    l2,
                });
            }
            if cfg.alpha == 0.0 {
                // No distance term to keep improving.
                return Ok((best, x_adv, steps));
            }
        }

        let mut dx = if dz.iter().any(|&v| v != 0.0) {
            let scaled = dz.mapv(|v| lambda * v);
            model.logits_gradient(&x_adv, &scaled)?
        } else {
            Array3::zeros(x.data.dim())
        };
        if cfg.alpha > 0.0 {
            for idx in &var.idxs {
                let i = [idx[0], idx[1], idx[2]];
                dx[i] += 2.0 * cfg.alpha * (x_adv.data[i] - x.data[i]);
            }
        }
        let grad_w = var.chain(&dx);
        state.update(&opt, &mut var.w, &grad_w);
        steps += 1;
    }

    // Score the final iterate too.
    let x_adv = var.materialize(x);
    let z = model.logits(&x_adv)?;
    let (f, _) = goal.objective(&z, cfg.kappa_adv);
    if f <= -cfg.kappa_adv && goal.satisfied(&z) {
        let l2 = x_adv.l2_distance(x);
        if best.as_ref().map_or(true, |b| l2 < b.l2) {
            best = Some(Best {
                x_adv: x_adv.clone(),
                l2,
            });
        }
    }
    Ok((best, x_adv, steps))
}

/// Masked C&W against a classifier. With `alpha > 0`, `lambda` is tuned by
/// geometric bisection over `[1e-2, 1e10]` (success shrinks it, failure
/// grows it) and the least-distorted success across all trials is returned.
pub fn masked_cw(
    model: &dyn LogitsOracle,
    x: &ImageTensor,
    y_true: usize,
    mask: &PatchMask,
    cfg: &CwConfig,
) -> Result<AttackOutcome> {
    let classes = model.num_classes();
    cfg.validate(classes)?;
    check_mask(mask, x)?;
    if y_true >= classes {
        return Err(Error::Config(format!(
            "true label {y_true} out of range for {classes} classes"
        )));
    }
    let goal = Goal::from(cfg, y_true);

    let mut iterations = 0;
    let mut global_best: Option<Best> = None;
    let mut last_attempt = None;

    if cfg.alpha == 0.0 {
        let (best, last, steps) = cw_run(model, x, goal, mask, cfg, 1.0)?;
        iterations += steps;
        global_best = best;
        last_attempt = Some(last);
    } else {
        let (mut lo, mut hi) = (LAMBDA_LO, LAMBDA_HI);
        for _ in 0..cfg.lambda_steps {
            let lambda = (lo * hi).sqrt();
            let (best, last, steps) = cw_run(model, x, goal, mask, cfg, lambda)?;
            iterations += steps;
            match best {
                Some(b) => {
                    if global_best.as_ref().map_or(true, |g| b.l2 < g.l2) {
                        global_best = Some(b);
                    }
                    // Success: a lighter attack weight may distort less.
                    hi = lambda;
                }
                None => {
                    lo = lambda;
                }
            }
            last_attempt = Some(last);
        }
    }

    Ok(match global_best {
        Some(b) => AttackOutcome::measured(x, b.x_adv, true, iterations, Some(mask.clone())),
        None => AttackOutcome::measured(
            x,
            last_attempt.expect("at least one run happened"),
            false,
            iterations,
            Some(mask.clone()),
        ),
    })
}

/// Configuration for [`adaptive_cw`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveCwConfig {
    pub cw: CwConfig,
    /// Weight of the detector hinge in the attack objective.
    pub detector_weight: f64,
    /// The hinge pushes the detector logit below `-detector_slack`.
    pub detector_slack: f64,
    /// Denoiser cache refresh cadence for the straight-through gradient.
    pub refresh_every: usize,
}

impl AdaptiveCwConfig {
    pub fn new(iterations: usize) -> Self {
        AdaptiveCwConfig {
            cw: CwConfig::new(iterations),
            detector_weight: 1.0,
            detector_slack: 0.05,
            refresh_every: 5,
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        self.cw.validate(classes)?;
        if !self.detector_weight.is_finite() || self.detector_weight < 0.0 {
            return Err(Error::Config(format!(
                "detector weight must be >= 0, got {}",
                self.detector_weight
            )));
        }
        if !self.detector_slack.is_finite() || self.detector_slack < 0.0 {
            return Err(Error::Config(format!(
                "detector slack must be >= 0, got {}",
                self.detector_slack
            )));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// What the adaptive attack achieved, judged by exact pipeline evaluation.
#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub outcome: AttackOutcome,
    /// The returned iterate fooled the classifier AND evaded the two-stage
    /// rule at the pipeline's kappa (exact evaluation, no cache).
    pub evaded: bool,
    /// Exact detector logit at the returned iterate.
    pub detector_logit: f64,
}

/// One Adam run of the adaptive objective at fixed `lambda`.
fn adaptive_run(
    pipe: &Pipeline,
    x: &ImageTensor,
    goal: Goal,
    mask: &PatchMask,
    cfg: &AdaptiveCwConfig,
    lambda: f64,
) -> Result<(Option<Best>, ImageTensor, usize)> {
    let mut var = MaskedTanh::new(x, mask);
    let opt = Optimizer::adam(cfg.cw.lr);
    let mut state = OptimizerState::new(var.w.len());
    let mut cache = BpdaCache::new(cfg.refresh_every)?;
    let mut best: Option<Best> = None;
    let mut steps = 0;

    for _ in 0..cfg.cw.iterations {
        let x_adv = var.materialize(x);

        // Exact bookkeeping: did this iterate actually evade the defense?
        let decision = pipe.decide(&x_adv)?;
        let z_exact = pipe.class_logits(&x_adv)?;
        if goal.satisfied(&z_exact) && !decision.flagged {
            let l2 = x_adv.l2_distance(x);
            if best.as_ref().map_or(true, |b| l2 < b.l2) {
                best = Some(Best {
                    x_adv: x_adv.clone(),
                    l2,
                });
            }
            if cfg.cw.alpha == 0.0 {
                return Ok((best, x_adv, steps));
            }
        }

        // Straight-through gradient of the cached objective.
        let kappa_adv = cfg.cw.kappa_adv;
        let beta = cfg.detector_weight;
        let slack = cfg.detector_slack;
        let (_, mut dx) = pipe.objective_grad(&x_adv, &mut cache, |z, y| {
            let (f, mut dz) = goal.objective(z, kappa_adv);
            let hinge = (y + slack).max(0.0);
            let dy = if y + slack > 0.0 { lambda * beta } else { 0.0 };
            dz.mapv_inplace(|v| lambda * v);
            (lambda * (f + beta * hinge), dz, dy)
        })?;
        if cfg.cw.alpha > 0.0 {
            for idx in &var.idxs {
                let i = [idx[0], idx[1], idx[2]];
                dx[i] += 2.0 * cfg.cw.alpha * (x_adv.data[i] - x.data[i]);
            }
        }
        let grad_w = var.chain(&dx);
        state.update(&opt, &mut var.w, &grad_w);
        steps += 1;
    }

    let x_adv = var.materialize(x);
    let decision = pipe.decide(&x_adv)?;
    let z_exact = pipe.class_logits(&x_adv)?;
    if goal.satisfied(&z_exact) && !decision.flagged {
        let l2 = x_adv.l2_distance(x);
        if best.as_ref().map_or(true, |b| l2 < b.l2) {
            best = Some(Best {
                x_adv: x_adv.clone(),
                l2,
            });
        }
    }
    Ok((best, x_adv, steps))
}

/// Adaptive C&W against the full pipeline: the objective adds a hinge on the
/// detector logit, `max(Y + slack, 0)`, so the optimizer drives the input
/// both across the class boundary and under the detector's radar. Gradients
/// flow through the straight-through residual with a cache refreshed every
/// `refresh_every` steps; success bookkeeping always re-evaluates exactly.
pub fn adaptive_cw(
    pipe: &Pipeline,
    x: &ImageTensor,
    y_true: usize,
    mask: &PatchMask,
    cfg: &AdaptiveCwConfig,
) -> Result<AdaptiveOutcome> {
    let classes = pipe.num_classes();
    cfg.validate(classes)?;
    check_mask(mask, x)?;
    if y_true >= classes {
        return Err(Error::Config(format!(
            "true label {y_true} out of range for {classes} classes"
        )));
    }
    let goal = Goal::from(&cfg.cw, y_true);

    let mut iterations = 0;
    let mut global_best: Option<Best> = None;
    let mut last_attempt = None;

    if cfg.cw.alpha == 0.0 {
        let (best, last, steps) = adaptive_run(pipe, x, goal, mask, cfg, 1.0)?;
        iterations += steps;
        global_best = best;
        last_attempt = Some(last);
    } else {
        let (mut lo, mut hi) = (LAMBDA_LO, LAMBDA_HI);
        for _ in 0..cfg.cw.lambda_steps {
            let lambda = (lo * hi).sqrt();
            let (best, last, steps) = adaptive_run(pipe, x, goal, mask, cfg, lambda)?;
            iterations += steps;
            match best {
                Some(b) => {
                    if global_best.as_ref().map_or(true, |g| b.l2 < g.l2) {
                        global_best = Some(b);
                    }
                    hi = lambda;
                }
                None => lo = lambda,
            }
            last_attempt = Some(last);
        }
    }

    let (outcome, x_final) = match global_best {
        Some(b) => {
            let out = AttackOutcome::measured(x, b.x_adv, true, iterations, Some(mask.clone()));
            let xf = out.x_adv.clone();
            (out, xf)
        }
        None => {
            let last = last_attempt.expect("at least one run happened");
            let z = pipe.class_logits(&last)?;
            let success = goal.satisfied(&z);
            let out = AttackOutcome::measured(x, last, success, iterations, Some(mask.clone()));
            let xf = out.x_adv.clone();
            (out, xf)
        }
    };
    let decision = pipe.decide(&x_final)?;
    let (_, y_exact) = pipe.forward(&x_final)?;
    let z_final = pipe.class_logits(&x_final)?;
    let evaded = goal.satisfied(&z_final) && !decision.flagged;
    Ok(AdaptiveOutcome {
        outcome,
        evaded,
        detector_logit: y_exact,
    })
}
