//! Joint classifier–detector logits and the two-stage decision rule.
//!
//! Given class logits `Z` (length `C`) and the detector logit `Y`, the joint
//! logit vector has `C + 1` coordinates:
//!
//! - `D_i = Z_i` for the class coordinates, and
//! - `D_C = (1 + Y) * M` with `M = max(max_j Z_j, tau)`, `tau = 1e-3`.
//!
//! The `tau` floor keeps the detector coordinate from flipping sign when
//! every class logit is negative (a negative scale would inverse the effect
//! of `Y`).
//!
//! The two-stage decision flags an input when
//! 1. the joint argmax lands on the detector coordinate (ties flag), or
//! 2. otherwise, the classifier's top-two margin falls below `kappa`.
//!
//! `detection_score` collapses the same signals into one scalar for
//! threshold-free metrics: `max(Y, -margin)`. Thresholding this score is not
//! exactly the two-stage family — stage 1 ignores `kappa` while a score
//! threshold moves both signals together — so tests compare the two only on
//! batches whose detector logits sit clear of the disagreement region.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::argmax;

/// Stabilization floor for the joint-logit scale.
pub const TAU: f64 = 1e-3;

/// Why an input was (or was not) flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    /// Stage 1: the joint argmax selected the detector coordinate.
    DetectorLogit,
    /// Stage 2: the classifier margin fell below `kappa`.
    SmallMargin,
    NotFlagged,
}

/// Outcome of the two-stage rule for one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionDecision {
    pub flagged: bool,
    pub reason: FlagReason,
    /// Classifier prediction (argmax of `Z`), regardless of flagging.
    pub predicted: usize,
    /// Top-two margin of `Z`.
    pub margin: f64,
}

fn validate(z: &Array1<f64>, y: f64) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 class logits, got {}",
            z.len()
        )));
    }
    if !z.iter().all(|v| v.is_finite()) || !y.is_finite() {
        return Err(Error::Config("logits must be finite".into()));
    }
    Ok(())
}

/// Joint logit vector `[Z_0 .. Z_{C-1}, (1 + Y) * max(max Z, tau)]`.
pub fn joint_logits(z: &Array1<f64>, y: f64) -> Result<Array1<f64>> {
    validate(z, y)?;
    let max_z = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = max_z.max(TAU);
    let mut d = Array1::zeros(z.len() + 1);
    d.slice_mut(ndarray::s![..z.len()]).assign(z);
    d[z.len()] = (1.0 + y) * m;
    Ok(d)
}

/// Top-two margin of the class logits: `Z_{k*} - max_{i != k*} Z_i`.
pub fn top_two_margin(z: &Array1<f64>) -> (usize, f64) {
    let k = argmax(z.as_slice().expect("contiguous"));
    let mut second = f64::NEG_INFINITY;
    for (i, &v) in z.iter().enumerate() {
        if i != k {
            second = second.max(v);
        }
    }
    (k, z[k] - second)
}

/// Apply the two-stage decision rule at detection strictness `kappa`.
pub fn two_stage_decision(z: &Array1<f64>, y: f64, kappa: f64) -> Result<DetectionDecision> {
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(Error::Config(format!(
            "kappa must be finite and non-negative, got {kappa}"
        )));
    }
    let d = joint_logits(z, y)?;
    let c = z.len();
    let (predicted, margin) = top_two_margin(z);
    let max_class = d
        .iter()
        .take(c)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if d[c] >= max_class {
        return Ok(DetectionDecision {
            flagged: true,
            reason: FlagReason::DetectorLogit,
            predicted,
            margin,
        });
    }
    if margin < kappa {
        return Ok(DetectionDecision {
            flagged: true,
            reason: FlagReason::SmallMargin,
            predicted,
            margin,
        });
    }
    Ok(DetectionDecision {
        flagged: false,
        reason: FlagReason::NotFlagged,
        predicted,
        margin,
    })
}

/// Threshold-free detection score: `max(Y, -margin)`. Large detector logits
/// or small classifier margins both push the score up.
pub fn detection_score(z: &Array1<f64>, y: f64) -> Result<f64> {
    validate(z, y)?;
    let (_, margin) = top_two_margin(z);
    Ok(y.max(-margin))
}

/// Baseline detection score: one minus the maximum softmax probability, i.e.
/// low classifier confidence reads as suspicion. Computed as the sum of the
/// non-top probabilities, which stays exact even when the top probability
/// rounds to 1.
pub fn baseline_maxprob_score(z: &Array1<f64>) -> Result<f64> {
    if z.len() < 2 || !z.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("need >= 2 finite class logits".into()));
    }
    let p = crate::neural::softmax(z);
    let top = argmax(p.as_slice().expect("contiguous probabilities"));
    Ok(p.iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, v)| *v)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use ndarray::array;

    /// Literal transcription of the rule, kept independent of the
    /// implementation above: build the joint vector, take its argmax with
    /// ties toward the detector coordinate, then compare the margin.
    fn oracle_decision(z: &[f64], y: f64, kappa: f64) -> bool {
        let max_z = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let m = if max_z > TAU { max_z } else { TAU };
        let d_det = (1.0 + y) * m;
        // Joint argmax with ties toward the detector coordinate.
        if d_det >= max_z {
            return true;
        }
        let mut sorted = z.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        let margin = sorted[0] - sorted[1];
        margin < kappa
    }

    #[test]
    fn joint_logits_hand_cases() {
        // Positive top logit: scale is max Z.
        let d = joint_logits(&array![2.0, -1.0], 0.5).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d[0], 2.0);
        assert_eq!(d[1], -1.0);
        assert!((d[2] - 1.5 * 2.0).abs() < 1e-15);
        // All-negative logits: scale falls back to tau.
        let d = joint_logits(&array![-2.0, -3.0], 1.0).unwrap();
        assert!((d[2] - 2.0 * TAU).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(joint_logits(&array![1.0], 0.0).is_err());
        assert!(joint_logits(&array![f64::NAN, 0.0], 0.0).is_err());
        assert!(joint_logits(&array![1.0, 0.0], f64::INFINITY).is_err());
        assert!(two_stage_decision(&array![1.0, 0.0], 0.0, -1.0).is_err());
        assert!(two_stage_decision(&array![1.0, 0.0], 0.0, f64::NAN).is_err());
    }

    #[test]
    fn decision_matches_exhaustive_enumeration() {
        // Full grid over logit patterns (with exact ties), detector logits,
        // and kappa values; every combination must match the independent
        // transcription of the rule.
        let grid = [-1.0, -0.5, 0.0, 0.25, 1.0];
        let ys = [-2.0, -1.0, -0.5, 0.0, 0.5, 2.0];
        let kappas = [0.0, 0.3, 3.0];
        let mut cases = 0usize;
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let z = array![a, b, c];
                    for &y in &ys {
                        for &kappa in &kappas {
                            let dec = two_stage_decision(&z, y, kappa).unwrap();
                            let expect = oracle_decision(&[a, b, c], y, kappa);
                            assert_eq!(
                                dec.flagged, expect,
                                "z={z:?} y={y} kappa={kappa}"
                            );
                            cases += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(cases, grid.len().pow(3) * ys.len() * kappas.len());
    }

    #[test]
    fn decision_matches_oracle_on_random_logits() {
        let mut rng = RngState::new(55);
        for _ in 0..2000 {
            let c = 2 + rng.uniform_usize(4);
            let z = Array1::from_shape_fn(c, |_| rng.uniform(-4.0, 4.0));
            let y = rng.uniform(-6.0, 6.0);
            let kappa = rng.uniform(0.0, 4.0);
            let dec = two_stage_decision(&z, y, kappa).unwrap();
            let expect = oracle_decision(z.as_slice().unwrap(), y, kappa);
            assert_eq!(dec.flagged, expect);
        }
    }

    #[test]
    fn flagging_is_monotone_in_kappa() {
        let mut rng = RngState::new(56);
        for _ in 0..500 {
            let z = Array1::from_shape_fn(4, |_| rng.uniform(-3.0, 3.0));
            let y = rng.uniform(-5.0, 3.0);
            let lo = two_stage_decision(&z, y, 0.5).unwrap();
            let hi = two_stage_decision(&z, y, 2.5).unwrap();
            if lo.flagged {
                assert!(hi.flagged, "flag must not disappear as kappa grows");
            }
        }
    }

    #[test]
    fn stage_reasons_are_attributed() {
        // Strong detector logit: stage 1.
        let dec = two_stage_decision(&array![3.0, 0.0], 0.5, 0.0).unwrap();
        assert_eq!(dec.reason, FlagReason::DetectorLogit);
        // Weak detector, slim margin: stage 2.
        let dec = two_stage_decision(&array![1.0, 0.9], -3.0, 0.5).unwrap();
        assert_eq!(dec.reason, FlagReason::SmallMargin);
        assert!((dec.margin - 0.1).abs() < 1e-12);
        // Confident and clean: not flagged.
        let dec = two_stage_decision(&array![4.0, 0.0], -3.0, 1.0).unwrap();
        assert_eq!(dec.reason, FlagReason::NotFlagged);
        assert_eq!(dec.predicted, 0);
    }

    #[test]
    fn score_threshold_reproduces_two_stage_away_from_disagreement() {
        // The score family matches the two-stage family when (a) the top
        // class logit is positive, (b) Y is never in [-kappa, 0], and (c) no
        // margin ties kappa exactly. Construct such a batch and check both
        // deployed kappa values with threshold -kappa.
        let mut rng = RngState::new(57);
        for &kappa in &[0.0, 3.0] {
            for _ in 0..400 {
                let attack = rng.next_f64() < 0.5;
                let y = if attack {
                    rng.uniform(0.5, 4.0)
                } else {
                    rng.uniform(-6.0, -kappa - 0.5)
                };
                let top = rng.uniform(0.5, 4.0);
                let mut margin = rng.uniform(0.1, 5.0);
                if (margin - kappa).abs() < 0.1 {
                    margin += 0.2;
                }
                let z = array![top, top - margin, top - margin - 1.0];
                let dec = two_stage_decision(&z, y, kappa).unwrap();
                let s = detection_score(&z, y).unwrap();
                assert_eq!(
                    dec.flagged,
                    s >= -kappa,
                    "kappa={kappa} y={y} margin={margin}"
                );
            }
        }
    }

    #[test]
    fn baseline_score_tracks_confidence() {
        let confident = baseline_maxprob_score(&array![8.0, 0.0, 0.0]).unwrap();
        let unsure = baseline_maxprob_score(&array![0.3, 0.0, 0.1]).unwrap();
        assert!(confident < 0.01);
        assert!(unsure > 0.5);
        assert!(unsure <= 1.0);
    }
}
